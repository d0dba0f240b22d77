//! Shared test oracles and statistics helpers.
//!
//! The Markov solver here is deliberately independent of the simulator: it
//! enumerates count configurations of the four ambassador states and solves
//! the absorbing chain exactly, so simulator means can be checked against
//! closed-form expectations rather than against the simulator itself.

#![allow(dead_code)] // each integration test binary uses its own subset

use std::collections::HashMap;

/// Count configuration of the ambassador population:
/// (strong black, strong white, weak black, weak white).
type Counts = (u32, u32, u32, u32);

/// Mirrors the stability predicate of the running protocol: no interaction
/// can change any agent's output. Strongs of both colors can still cancel;
/// a strong can still flip an opposite weak; anything else is frozen.
fn counts_stable(c: Counts) -> bool {
    let (sb, sw, wb, ww) = c;
    if sb > 0 && sw > 0 {
        return false;
    }
    if sb > 0 && ww > 0 {
        return false;
    }
    if sw > 0 && wb > 0 {
        return false;
    }
    true
}

/// Exact expected stabilization time of the ambassador protocol as measured
/// by a runner that tests stability every `check_every` interactions: the
/// expectation of `ceil(T / check_every) * check_every` where `T` is the
/// first interaction count after which the configuration is stable.
///
/// Works by evolving the full distribution over count configurations one
/// interaction at a time (the state space for small `n` is tiny), crossing
/// absorbed mass into the detected-time accumulator at checkpoint indices.
pub fn ambassador_expected_detected(n: u32, black: u32, check_every: u64) -> f64 {
    assert!(n >= 2 && black <= n);
    assert!(check_every >= 1);

    // Enumerate reachable configurations and index them.
    let mut index: HashMap<Counts, usize> = HashMap::new();
    let mut states: Vec<Counts> = Vec::new();
    let mut stack = vec![(black, n - black, 0u32, 0u32)];
    index.insert(stack[0], 0);
    states.push(stack[0]);
    while let Some(c) = stack.pop() {
        for (_, next) in transitions(c) {
            if !index.contains_key(&next) {
                index.insert(next, states.len());
                states.push(next);
                stack.push(next);
            }
        }
    }

    // Row-stochastic step matrix as sparse rows; absorbing rows are exits.
    let pairs = (n as f64) * (n as f64 - 1.0) / 2.0;
    let rows: Vec<Vec<(usize, f64)>> = states
        .iter()
        .map(|&c| {
            if counts_stable(c) {
                return Vec::new();
            }
            let mut row: Vec<(usize, f64)> = Vec::new();
            let mut moved = 0.0;
            for (ways, next) in transitions(c) {
                let p = ways as f64 / pairs;
                moved += p;
                row.push((index[&next], p));
            }
            row.push((index[&c], 1.0 - moved));
            row
        })
        .collect();

    let mut dist = vec![0.0f64; states.len()];
    dist[0] = 1.0;
    let mut expected = 0.0;
    let mut t: u64 = 0;
    loop {
        // Detected time accumulates as E[ceil(T/k)]·k = k·Σ_{m≥0} P(T > mk);
        // at each checkpoint the not-yet-stable mass contributes one period.
        let live: f64 = states
            .iter()
            .zip(&dist)
            .filter(|(&c, _)| !counts_stable(c))
            .map(|(_, &p)| p)
            .sum();
        if live < 1e-13 {
            break;
        }
        expected += live * check_every as f64;
        for _ in 0..check_every {
            let mut next = vec![0.0f64; states.len()];
            for (i, &p) in dist.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                if rows[i].is_empty() {
                    next[i] += p;
                } else {
                    for &(j, q) in &rows[i] {
                        next[j] += p * q;
                    }
                }
            }
            dist = next;
        }
        t += check_every;
        assert!(t < 100_000_000, "oracle failed to converge");
    }
    expected
}

/// All productive interactions from a count configuration: (number of
/// unordered pairs realizing it, successor configuration).
fn transitions(c: Counts) -> Vec<(u64, Counts)> {
    let (sb, sw, wb, ww) = c;
    let mut out = Vec::new();
    if sb > 0 && sw > 0 {
        // Opposite strongs neutralize each other.
        out.push((sb as u64 * sw as u64, (sb - 1, sw - 1, wb + 1, ww + 1)));
    }
    if sb > 0 && ww > 0 {
        // A strong black flips a weak white.
        out.push((sb as u64 * ww as u64, (sb, sw, wb + 1, ww - 1)));
    }
    if sw > 0 && wb > 0 {
        out.push((sw as u64 * wb as u64, (sb, sw, wb - 1, ww + 1)));
    }
    out
}

// ---------------------------------------------------------------------------
// Statistics helpers
// ---------------------------------------------------------------------------

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Pearson chi-square statistic of observed counts against expected counts.
pub fn chi_square(observed: &[u64], expected: &[f64]) -> f64 {
    assert_eq!(observed.len(), expected.len());
    observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| {
            debug_assert!(e > 0.0);
            let d = o as f64 - e;
            d * d / e
        })
        .sum()
}

/// Upper critical value of the chi-square distribution by the Wilson–Hilferty
/// cube approximation; `z` is the standard-normal quantile of the target
/// significance (e.g. 4.7534 for α = 1e-6). Accurate to a fraction of a
/// percent for df ≥ 3, which is all the uniformity tests need.
pub fn chi_square_critical(df: u64, z: f64) -> f64 {
    let k = df as f64;
    let t = 1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt();
    k * t * t * t
}

/// Standard-normal quantile for α = 1e-6 (one-sided).
pub const Z_ALPHA_1E6: f64 = 4.7534;
