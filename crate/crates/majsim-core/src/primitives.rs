//! Background primitives composed into every majority protocol: one-bit
//! epidemic broadcast and the four-state "ambassador" exact-majority protocol
//! that runs in the background as an always-correct (but slow) arbiter.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sim::{
    majority, Color, NoopObserver, PairMode, Protocol, RunConfig, RunOutcome, TrialLog,
    UsageFlags,
};

/// One epidemic-broadcast step over optional payloads. An informed side
/// spreads its payload to an uninformed one; two informed sides with
/// different payloads change nothing and raise the conflict flag so the
/// caller can decide (the phased protocols respond by failing).
pub fn broadcast_step<P: Copy + PartialEq>(
    u: Option<P>,
    v: Option<P>,
) -> (Option<P>, Option<P>, bool) {
    match (u, v) {
        (Some(a), Some(b)) if a != b => (u, v, true),
        (Some(_), None) => (u, u, false),
        (None, Some(_)) => (v, v, false),
        _ => (u, v, false),
    }
}

/// Ambassador agent state: an opinion plus a strength bit. All agents start
/// strong; exactly four states exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AmbassadorState {
    pub opinion: Color,
    pub strong: bool,
}

pub fn ambassador_init(input: Color) -> AmbassadorState {
    AmbassadorState {
        opinion: input,
        strong: true,
    }
}

/// The two ambassador rules: opposite strongs both turn weak (opinions
/// kept), and a strong converts an opposite-opinion weak. Every rule
/// conserves the signed difference #strong-black − #strong-white.
pub fn ambassador_step(
    u: AmbassadorState,
    v: AmbassadorState,
) -> (AmbassadorState, AmbassadorState) {
    if u.opinion == v.opinion {
        return (u, v);
    }
    let weak = |opinion| AmbassadorState { opinion, strong: false };
    match (u.strong, v.strong) {
        (true, true) => (weak(u.opinion), weak(v.opinion)),
        (true, false) => (u, weak(u.opinion)),
        (false, true) => (weak(v.opinion), v),
        (false, false) => (u, v),
    }
}

/// Population tallies of the four ambassador states.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AmbCounts {
    pub strong_black: u64,
    pub strong_white: u64,
    pub weak_black: u64,
    pub weak_white: u64,
}

impl AmbCounts {
    pub fn new(n: u64, black: u64) -> Self {
        AmbCounts {
            strong_black: black,
            strong_white: n - black,
            weak_black: 0,
            weak_white: 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.strong_black + self.strong_white + self.weak_black + self.weak_white
    }

    pub fn tally(states: &[AmbassadorState]) -> Self {
        let mut c = AmbCounts::default();
        for s in states {
            match (s.opinion, s.strong) {
                (Color::Black, true) => c.strong_black += 1,
                (Color::White, true) => c.strong_white += 1,
                (Color::Black, false) => c.weak_black += 1,
                (Color::White, false) => c.weak_white += 1,
            }
        }
        c
    }

    /// True iff no rule can change any agent's opinion, and opinions are
    /// unanimous-to-be: one strong side survives with no opposite weaks, or
    /// all agents are weak with a single opinion. All-weak with both
    /// opinions present is a frozen disagreement (a deadlock, unreachable
    /// when the input majority is strict), not stability.
    pub fn stable(&self) -> bool {
        match (self.strong_black > 0, self.strong_white > 0) {
            (true, true) => false,
            (true, false) => self.weak_white == 0,
            (false, true) => self.weak_black == 0,
            (false, false) => self.weak_black == 0 || self.weak_white == 0,
        }
    }

    /// The unanimous opinion once `stable()` holds.
    pub fn output(&self) -> Color {
        if self.strong_black > 0 || self.weak_black > 0 {
            Color::Black
        } else {
            Color::White
        }
    }
}

pub fn ambassador_stable(states: &[AmbassadorState]) -> bool {
    AmbCounts::tally(states).stable()
}

/// The ambassador protocol run standalone.
pub struct AmbassadorProtocol {
    pub n: usize,
}

impl Protocol for AmbassadorProtocol {
    type State = AmbassadorState;
    type Observer = NoopObserver;

    fn pair_mode(&self) -> PairMode {
        PairMode::Unordered
    }

    fn init_state(&self, input: Color) -> AmbassadorState {
        ambassador_init(input)
    }

    fn transition(&self, a: AmbassadorState, b: AmbassadorState) -> (AmbassadorState, AmbassadorState) {
        ambassador_step(a, b)
    }

    fn is_stable(&self, states: &[AmbassadorState]) -> bool {
        ambassador_stable(states)
    }

    fn output(&self, state: &AmbassadorState) -> Color {
        state.opinion
    }

    fn usage(&self, _states: &[AmbassadorState]) -> UsageFlags {
        UsageFlags::default()
    }

    fn observer(&self) -> NoopObserver {
        NoopObserver
    }

    fn encode_abstract(&self, s: &AmbassadorState) -> u64 {
        let opinion = match s.opinion {
            Color::Black => 0u64,
            Color::White => 1,
        };
        opinion << 1 | s.strong as u64
    }
}

/// Count-level simulation of the ambassador protocol. Agents are
/// exchangeable, so the population is fully described by the four tallies;
/// the runner samples the next state-changing interaction directly (a
/// geometric skip over no-op pairs plus a categorical pick among effective
/// pair types), which is distribution-identical to the agent-level runner
/// but costs O(n) events instead of O(n² log n) interactions.
///
/// Stabilization is reported at the same cadence as [`crate::sim::run`]:
/// the first multiple of `check_every` at or past absorption.
pub fn run_ambassador_counts(
    n: usize,
    black: usize,
    seed: u64,
    cfg: &RunConfig,
) -> (RunOutcome, AmbCounts) {
    assert!(
        majority(n, black).is_some(),
        "ambassador count runner needs a strict majority"
    );
    let mut c = AmbCounts::new(n as u64, black as u64);
    let pairs = (n as u64 * (n as u64 - 1) / 2) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut at: u64 = 0;
    let (interactions, timed_out) = loop {
        let w_cancel = c.strong_black * c.strong_white;
        let w_to_black = c.strong_black * c.weak_white;
        let w_to_white = c.strong_white * c.weak_black;
        let effective = w_cancel + w_to_black + w_to_white;
        if effective == 0 {
            // Absorbed at `at`; detection waits for the next checkpoint.
            let detected = at.div_ceil(cfg.check_every) * cfg.check_every;
            if detected <= cfg.max_interactions {
                break (detected, false);
            }
            break (cfg.max_interactions, true);
        }
        let p = effective as f64 / pairs;
        let skip = if p >= 1.0 {
            0
        } else {
            let u01 = 1.0 - rng.random::<f64>(); // (0, 1]
            (u01.ln() / (1.0 - p).ln()).floor() as u64
        };
        let event_at = at.saturating_add(skip).saturating_add(1);
        if event_at > cfg.max_interactions {
            break (cfg.max_interactions, true);
        }
        at = event_at;
        let x = rng.random_range(0..effective);
        if x < w_cancel {
            c.strong_black -= 1;
            c.strong_white -= 1;
            c.weak_black += 1;
            c.weak_white += 1;
        } else if x < w_cancel + w_to_black {
            c.weak_white -= 1;
            c.weak_black += 1;
        } else {
            c.weak_black -= 1;
            c.weak_white += 1;
        }
    };
    let outcome = RunOutcome {
        interactions,
        timed_out,
        log: TrialLog::default(),
    };
    (outcome, c)
}
