//! Distinct-state census and small regression helpers.
//!
//! The census empirically checks the state-complexity claims: it runs seeded
//! trials and collects every canonical abstract-state encoding seen at the
//! stability-check cadence (including the input configuration and the final
//! one), then counts distinct values. Implementation-only fields are already
//! excluded by each protocol's encoder.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::sim::{sample_pair, Color, Protocol, RunConfig};

/// One census measurement.
#[derive(Clone, Debug)]
pub struct CensusPoint {
    pub protocol: String,
    pub n: usize,
    pub distinct_abstract_states: usize,
}

/// Runs one seeded trial, inserting the abstract encoding of every agent at
/// every cadence checkpoint and at the stop configuration. Returns whether
/// the trial timed out.
pub fn census_trial<P: Protocol>(
    protocol: &P,
    inputs: &[Color],
    seed: u64,
    cfg: &RunConfig,
    seen: &mut HashSet<u64>,
) -> bool {
    let n = inputs.len();
    let mut states: Vec<P::State> = inputs.iter().map(|&c| protocol.init_state(c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = protocol.pair_mode();
    let mut at = 0u64;
    loop {
        for s in &states {
            seen.insert(protocol.encode_abstract(s));
        }
        if protocol.is_stable(&states) {
            return false;
        }
        if at >= cfg.max_interactions {
            return true;
        }
        let next = (at + cfg.check_every).min(cfg.max_interactions);
        for _ in at..next {
            let (i, j) = sample_pair(&mut rng, n, mode);
            let (a, b) = protocol.transition(states[i], states[j]);
            states[i] = a;
            states[j] = b;
        }
        at = next;
    }
}

/// Census over a batch of trials with consecutive seeds; the distinct count
/// is over the union of all trials.
pub fn census_count<P: Protocol>(
    protocol: &P,
    inputs: &[Color],
    base_seed: u64,
    trials: u64,
    cfg: &RunConfig,
) -> usize {
    let mut seen = HashSet::new();
    for t in 0..trials {
        census_trial(protocol, inputs, base_seed + t, cfg, &mut seen);
    }
    seen.len()
}

// ---------------------------------------------------------------------------
// Least-squares helpers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination of the fit.
    pub r2: f64,
}

/// Ordinary least squares y = intercept + slope·x.
pub fn fit_linear(points: &[(f64, f64)]) -> LinearFit {
    assert!(points.len() >= 2, "need at least two points to fit a line");
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for &(x, y) in points {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    assert!(sxx > 0.0, "x values must not be constant");
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    LinearFit {
        slope,
        intercept,
        r2,
    }
}

/// Fits y = C·x^β by least squares in log-log space; `slope` is β.
pub fn fit_power(points: &[(f64, f64)]) -> LinearFit {
    let logged: Vec<(f64, f64)> = points
        .iter()
        .map(|&(x, y)| {
            assert!(x > 0.0 && y > 0.0, "power-law fit needs positive data");
            (x.ln(), y.ln())
        })
        .collect();
    fit_linear(&logged)
}
