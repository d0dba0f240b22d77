//! Batch balls-into-bins workbench for the Left two-choices strategy.
//!
//! The clock population splits into a Left and a Right half; each allocation
//! draws one bin from each half and the lower-loaded bin receives the ball,
//! with ties going Left — exactly the increment rule the clock counters
//! follow. This module runs that process directly on counter arrays so the
//! concentration behavior (hole fractions, maximum gap, per-bin receive
//! probabilities) can be measured at scale and compared against both the
//! analytic bounds and the live clock population.

use rand::Rng;

use crate::three_halves::Side;
use crate::two::ceil_log2;

#[derive(Clone, Debug)]
pub struct BinsState {
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub balls: u64,
}

impl BinsState {
    /// `n` total bins, split evenly; `n` must be even and at least 2.
    pub fn new(n: usize) -> BinsState {
        assert!(n >= 2 && n % 2 == 0, "need an even number of bins");
        BinsState {
            left: vec![0; n / 2],
            right: vec![0; n / 2],
            balls: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.left.len() + self.right.len()
    }

    /// Completed batches ("time"): t after t·n balls.
    pub fn batch(&self) -> u64 {
        self.balls / self.n() as u64
    }

    /// Where the next ball would land: one uniform bin per half, the
    /// strictly lower count receives, ties go Left. Does not allocate.
    pub fn peek_receiver_left(&self, rng: &mut impl Rng) -> (Side, usize) {
        let i = rng.random_range(0..self.left.len());
        let j = rng.random_range(0..self.right.len());
        if self.left[i] <= self.right[j] {
            (Side::Left, i)
        } else {
            (Side::Right, j)
        }
    }

    pub fn allocate_ball_left(&mut self, rng: &mut impl Rng) {
        match self.peek_receiver_left(rng) {
            (Side::Left, i) => self.left[i] += 1,
            (Side::Right, j) => self.right[j] += 1,
        }
        self.balls += 1;
    }

    /// Baseline without choice: one uniform bin over all `n` receives.
    pub fn allocate_ball_onechoice(&mut self, rng: &mut impl Rng) {
        let k = rng.random_range(0..self.n());
        if k < self.left.len() {
            self.left[k] += 1;
        } else {
            let k = k - self.left.len();
            self.right[k] += 1;
        }
        self.balls += 1;
    }

    fn counts(&self) -> impl Iterator<Item = u32> + '_ {
        self.left.iter().chain(self.right.iter()).copied()
    }

    /// Hole statistics at a batch boundary: `alpha[i]` is the fraction of
    /// bins at least `i` balls below the batch average, `max_holes` the
    /// deepest such deficit.
    pub fn holes_profile(&self) -> HolesProfile {
        let n = self.n() as u64;
        assert!(
            self.balls % n == 0,
            "hole statistics are defined at batch boundaries"
        );
        let t = self.balls / n;
        let max_holes = self
            .counts()
            .map(|c| t.saturating_sub(c as u64))
            .max()
            .unwrap_or(0) as u32;
        let mut below = vec![0u64; max_holes as usize + 2];
        for c in self.counts() {
            let holes = t.saturating_sub(c as u64) as usize;
            if (c as u64) <= t {
                below[holes] += 1;
            }
        }
        // Suffix-sum: alpha[i] counts every bin with at least i holes.
        let mut alpha = vec![0.0; max_holes as usize + 2];
        let mut acc = 0u64;
        for i in (0..alpha.len()).rev() {
            acc += below.get(i).copied().unwrap_or(0);
            alpha[i] = acc as f64 / self.n() as f64;
        }
        HolesProfile {
            t,
            alpha,
            max_holes,
        }
    }

    /// Highest bin count minus the rounded average load.
    pub fn max_gap(&self) -> i64 {
        let mean = (self.balls as f64 / self.n() as f64).round() as i64;
        let max = self.counts().max().unwrap_or(0) as i64;
        max - mean
    }
}

#[derive(Clone, Debug)]
pub struct HolesProfile {
    pub t: u64,
    /// `alpha[i]` = fraction of bins with count ≤ t − i; index 0 is the
    /// fraction at or below the average, the vector always ends in a zero.
    pub alpha: Vec<f64>,
    pub max_holes: u32,
}

impl HolesProfile {
    pub fn alpha_at(&self, i: usize) -> f64 {
        self.alpha.get(i).copied().unwrap_or(0.0)
    }
}

/// The proven per-level ceiling plus finite-size allowances: a relative
/// slack on the constant and two bins' worth of additive room.
pub fn invariant1_bound(i: u32, n: usize, slack: f64) -> f64 {
    1.3 * 2.8f64.powi(-(i as i32)) * (1.0 + slack) + 2.0 / n as f64
}

/// Hole-tail ceiling: Pr[q_t ≥ i + 5] ≤ 13.5 · 3.4^{−i}.
pub const HOLE_TAIL_PREFACTOR: f64 = 13.5;
pub const HOLE_TAIL_BASE: f64 = 3.4;
pub const HOLE_TAIL_OFFSET: u32 = 5;

pub const DEFAULT_INV1_SLACK: f64 = 0.15;
pub const DEFAULT_INV1_C1: f64 = 2.0;
pub const DEFAULT_INV1_C2: f64 = 2.0;

#[derive(Clone, Copy, Debug)]
pub struct Invariant1Violation {
    pub i: u32,
    pub alpha: f64,
    pub bound: f64,
}

/// Checks the hole-fraction profile against the per-level ceiling for
/// 1 ≤ i ≤ c1·log₂n and against exact zero for i ≥ c2·log₂n.
pub fn check_invariant1(
    profile: &HolesProfile,
    n: usize,
    slack: f64,
    c1: f64,
    c2: f64,
) -> Vec<Invariant1Violation> {
    let log2n = ceil_log2(n) as f64;
    let banded = (c1 * log2n).floor() as u32;
    let zero_from = (c2 * log2n).ceil() as u32;
    let mut out = Vec::new();
    for i in 1..=banded.max(profile.max_holes) {
        let alpha = profile.alpha_at(i as usize);
        if i <= banded {
            let bound = invariant1_bound(i, n, slack);
            if alpha > bound {
                out.push(Invariant1Violation { i, alpha, bound });
            }
        }
        if i >= zero_from && alpha > 0.0 {
            out.push(Invariant1Violation {
                i,
                alpha,
                bound: 0.0,
            });
        }
    }
    out
}

/// Monte-Carlo estimate (with standard error) of the probability that one
/// specific bin receives the next ball under the Left rule.
pub fn receive_probability_mc(
    state: &BinsState,
    side: Side,
    bin: usize,
    samples: u64,
    rng: &mut impl Rng,
) -> (f64, f64) {
    assert!(samples > 0);
    let mut hits = 0u64;
    for _ in 0..samples {
        if state.peek_receiver_left(rng) == (side, bin) {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    let se = (p * (1.0 - p) / samples as f64).sqrt();
    (p, se)
}
