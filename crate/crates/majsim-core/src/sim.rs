//! Uniform pair scheduler and the run loop shared by every protocol.
//!
//! The loop alternates between a branch-free burst of interactions and a
//! checkpoint where stability is evaluated and observers may sample the
//! configuration. Stability is only checked every `check_every` interactions
//! (default `n`), so the recorded stabilization point is the first checkpoint
//! at which the predicate holds, not the exact interaction that made it true.
//! Oracles that predict stabilization times must model the same cadence.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Name of the generator used for every trial, recorded in output metadata.
/// One stream per trial, seeded with `base_seed + trial_index`.
pub const RNG_NAME: &str = "chacha8";

/// Agent opinion. Protocol cells that can also be empty use `Option<Color>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Black,
    White,
}

impl Color {
    pub fn opposite(self) -> Color {
        match self {
            Color::Black => Color::White,
            Color::White => Color::Black,
        }
    }
}

/// Whether transitions receive an (initiator, responder) pair or a canonical
/// unordered pair. Unordered pairs are reported as (smaller, larger) index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    Ordered,
    Unordered,
}

/// One uniformly random pair of distinct agents. Self-interactions are never
/// produced: the second index is drawn from `n - 1` values and shifted past
/// the first, which keeps every ordered pair at probability `1 / (n(n-1))`
/// without rejection sampling.
#[inline]
pub fn sample_pair(rng: &mut ChaCha8Rng, n: usize, mode: PairMode) -> (usize, usize) {
    debug_assert!(n >= 2, "need at least two agents to form a pair");
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    match mode {
        PairMode::Ordered => (i, j),
        PairMode::Unordered => (i.min(j), i.max(j)),
    }
}

// ---------------------------------------------------------------------------
// Per-trial metric log
// ---------------------------------------------------------------------------

/// Phase boundary snapshot. A stage is considered begun once 90% of the
/// eligible agents have entered it; snapshots are taken at the first
/// checkpoint past that threshold.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase_index: u32,
    /// Colored-cell vacancy right after the cancellation stage, if the run
    /// lasted long enough to observe it.
    pub empty_fraction_after_cancel: Option<f64>,
    /// De-synchronized agents at the end of the phase (0 for protocols
    /// without a synchronization flag).
    pub out_of_sync_count: u32,
    /// Count of the true input majority color minus the minority color at
    /// the start of the phase.
    pub majority_minus_minority: i64,
}

/// Epoch boundary snapshot for the epoch-structured protocols.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch_index: u32,
    /// Sum over de-synchronized agents of the number of colored cells each
    /// still owes, measured when 90% have entered the catch-up phase.
    pub owed_at_catchup_start: u64,
    /// De-synchronized agents left when the next epoch begins.
    pub out_of_sync_at_end: Option<u32>,
    pub majority_minus_minority_at_start: i64,
}

/// Population composition snapshot (three-halves only).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RoleSnapshot {
    pub interactions: u64,
    pub left_clocks: u32,
    pub right_clocks: u32,
    pub workers: u32,
    pub unassigned: u32,
}

/// Everything observers accumulate over one trial.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrialLog {
    pub phases: Vec<PhaseRecord>,
    pub epochs: Vec<EpochRecord>,
    pub roles: Vec<RoleSnapshot>,
    /// Largest observed clock lead (max unwrapped tick count minus the mean)
    /// across checkpoints, for concentration checks.
    pub clock_gap_max: Option<f64>,
    /// Largest de-synchronized agent count seen at any checkpoint.
    pub max_out_of_sync: Option<u32>,
}

// ---------------------------------------------------------------------------
// Protocol abstraction
// ---------------------------------------------------------------------------

/// End-of-run flags extracted from the final configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UsageFlags {
    /// Some agent abandoned the primary schedule and restarted the phased
    /// doubling protocol from a backup color.
    pub used_fallback: bool,
    /// Some agent failed; outputs defer to the background arbiter.
    pub used_ambassador: bool,
}

/// Checkpoint hook. Observers may keep private shadow state (for example
/// unwrapped clock counters); nothing they track feeds back into the run.
pub trait StateObserver<S> {
    fn checkpoint(&mut self, states: &[S], interactions: u64, log: &mut TrialLog);
    /// Called once when the run stops, after the last checkpoint.
    fn finish(&mut self, _states: &[S], _interactions: u64, _log: &mut TrialLog) {}
}

/// Observer for protocols that do not log phase metrics.
pub struct NoopObserver;

impl<S> StateObserver<S> for NoopObserver {
    fn checkpoint(&mut self, _: &[S], _: u64, _: &mut TrialLog) {}
}

/// A population protocol: per-agent state, pairwise transition, stability
/// predicate, and an output map.
pub trait Protocol {
    type State: Copy + Send + Sync;
    type Observer: StateObserver<Self::State>;

    fn pair_mode(&self) -> PairMode;
    fn init_state(&self, input: Color) -> Self::State;
    /// Apply one interaction. Under `Ordered` mode `a` is the initiator.
    fn transition(&self, a: Self::State, b: Self::State) -> (Self::State, Self::State);
    /// True once no reachable interaction changes any agent's output.
    fn is_stable(&self, states: &[Self::State]) -> bool;
    fn output(&self, state: &Self::State) -> Color;
    fn usage(&self, states: &[Self::State]) -> UsageFlags;
    fn observer(&self) -> Self::Observer;
    /// Canonical packing of the abstract state for census counting.
    /// Implementation-only caches (e.g. last-color memories) are excluded.
    fn encode_abstract(&self, state: &Self::State) -> u64;
}

// ---------------------------------------------------------------------------
// Run loop
// ---------------------------------------------------------------------------

/// Working state of one trial.
pub struct Population<S> {
    pub states: Vec<S>,
    pub interactions: u64,
    pub rng: ChaCha8Rng,
}

impl<S> Population<S> {
    pub fn n(&self) -> usize {
        self.states.len()
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub max_interactions: u64,
    /// Stability cadence; observers fire at the same checkpoints.
    pub check_every: u64,
    /// Record phase/epoch metrics. Off by default: the observer pass scans
    /// the whole population at every checkpoint.
    pub observe: bool,
    /// Extra interaction counts (sorted) where observers also fire, for
    /// probes that need finer granularity than `check_every`.
    pub extra_checkpoints: Vec<u64>,
}

impl RunConfig {
    pub fn new(n: usize, max_interactions: u64) -> Self {
        RunConfig {
            max_interactions,
            check_every: n as u64,
            observe: false,
            extra_checkpoints: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Interactions executed when the run stopped. Equals the stabilization
    /// checkpoint unless the run timed out.
    pub interactions: u64,
    pub timed_out: bool,
    pub log: TrialLog,
}

impl RunOutcome {
    pub fn parallel_time(&self, n: usize) -> f64 {
        self.interactions as f64 / n as f64
    }
}

/// Run one seeded trial to stability or the interaction cap. Identical
/// config and seed always reproduce the identical outcome and final states.
pub fn run<P: Protocol>(
    protocol: &P,
    inputs: &[Color],
    seed: u64,
    cfg: &RunConfig,
) -> (RunOutcome, Vec<P::State>) {
    let n = inputs.len();
    assert!(n >= 2, "population needs at least two agents");
    let mut pop = Population {
        states: inputs.iter().map(|&c| protocol.init_state(c)).collect(),
        interactions: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mode = protocol.pair_mode();
    let mut observer = protocol.observer();
    let mut log = TrialLog::default();
    let mut extras = cfg.extra_checkpoints.clone();
    extras.sort_unstable();
    let mut next_extra = 0usize;

    let mut timed_out = false;
    loop {
        let at = pop.interactions;
        let on_cadence = at % cfg.check_every == 0;
        if cfg.observe {
            let extra_due = next_extra < extras.len() && extras[next_extra] == at;
            if extra_due {
                next_extra += 1;
            }
            if on_cadence || extra_due {
                observer.checkpoint(&pop.states, at, &mut log);
            }
        }
        if on_cadence && protocol.is_stable(&pop.states) {
            break;
        }
        if at >= cfg.max_interactions {
            timed_out = true;
            break;
        }

        // Burst until the next boundary of interest, branch-free inside.
        let mut next = (at / cfg.check_every + 1) * cfg.check_every;
        if cfg.observe && next_extra < extras.len() {
            next = next.min(extras[next_extra]);
        }
        next = next.min(cfg.max_interactions);
        for _ in at..next {
            let (i, j) = sample_pair(&mut pop.rng, n, mode);
            let (a, b) = protocol.transition(pop.states[i], pop.states[j]);
            pop.states[i] = a;
            pop.states[j] = b;
        }
        pop.interactions = next;
    }

    if cfg.observe {
        observer.finish(&pop.states, pop.interactions, &mut log);
    }
    let outcome = RunOutcome {
        interactions: pop.interactions,
        timed_out,
        log,
    };
    (outcome, pop.states)
}

/// Input assignment: the first `black` agents are black, the rest white.
/// The scheduler is exchangeable, so the layout carries no information.
pub fn inputs(n: usize, black: usize) -> Vec<Color> {
    assert!(black <= n);
    let mut v = vec![Color::Black; black];
    v.extend(std::iter::repeat_n(Color::White, n - black));
    v
}

/// The strict input majority, if any.
pub fn majority(n: usize, black: usize) -> Option<Color> {
    use std::cmp::Ordering::*;
    match (2 * black).cmp(&n) {
        Greater => Some(Color::Black),
        Less => Some(Color::White),
        Equal => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_distinct_and_canonical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let (i, j) = sample_pair(&mut rng, 7, PairMode::Unordered);
            assert!(i < j && j < 7);
            let (a, b) = sample_pair(&mut rng, 7, PairMode::Ordered);
            assert!(a != b && a < 7 && b < 7);
        }
    }

    #[test]
    fn two_agents_always_pair_each_other() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            assert_eq!(sample_pair(&mut rng, 2, PairMode::Unordered), (0, 1));
        }
    }

    #[test]
    fn majority_is_strict() {
        assert_eq!(majority(4, 2), None);
        assert_eq!(majority(4, 3), Some(Color::Black));
        assert_eq!(majority(5, 2), Some(Color::White));
    }

    #[test]
    fn inputs_layout() {
        let v = inputs(4, 3);
        assert_eq!(v, vec![Color::Black, Color::Black, Color::Black, Color::White]);
    }
}
