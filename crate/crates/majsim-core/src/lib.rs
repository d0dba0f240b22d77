//! Simulation framework for exact-majority population protocols.
//!
//! A population of `n` anonymous agents repeatedly interacts in uniformly
//! random pairs. Each protocol is a pairwise transition function over a small
//! per-agent state; a run ends when the configuration stabilizes (no reachable
//! interaction can change any agent's output) or when an interaction cap is
//! hit. Parallel time is interactions divided by `n`.
//!
//! Protocols provided:
//!
//! * [`primitives::AmbassadorProtocol`] — four-state exact majority, slow but
//!   simple; also runs in the background of every other protocol as the
//!   arbiter of last resort.
//! * [`two::TwoProtocol`] — phased cancellation/doubling with buffer stages,
//!   quadratic-in-`log n` state count.
//! * [`epoch::EpochProtocol`] — cancellation/doubling grouped into epochs with
//!   catch-up phases; counter strategy is either per-interaction increments or
//!   a min-counter rule that needs ordered pairs.
//! * [`three_halves::ThreeHalvesProtocol`] — splits the population into
//!   workers and two clock camps; clock counters pace the worker schedule.
//! * [`bins`] — the balls-into-bins process behind the clock concentration
//!   argument, plus a one-choice baseline.
//!
//! The [`sim`] module owns the scheduler and run loop, [`experiment`] drives
//! seeded trial batches with CSV/JSON output, and [`census`] counts distinct
//! abstract states a protocol visits.

pub mod bins;
pub mod census;
pub mod epoch;
pub mod experiment;
pub mod primitives;
pub mod sim;
pub mod three_halves;
pub mod two;

pub use experiment::{ExperimentConfig, ProtocolKind, RunResult};
pub use sim::{
    Color, EpochRecord, PairMode, PhaseRecord, Population, Protocol, RunConfig, RunOutcome,
    StateObserver, TrialLog,
};
