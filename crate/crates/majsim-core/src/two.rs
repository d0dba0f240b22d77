//! The phased cancellation/splitting majority protocol.
//!
//! A phase is four equal stages — Cancellation, Buffer1, Splitting, Buffer2 —
//! each `stage_len` interactions long, tracked per agent by a step counter.
//! Opposite colors cancel to empty during cancellation; colored agents copy
//! onto empty ones during splitting (at most one split per agent per phase);
//! the buffers absorb stragglers, helped by pulling late Buffer2 agents into
//! the next phase. A colored agent that fails to split learned that its color
//! has no empty cells left to fill, i.e. it is the majority, and broadcasts
//! Done. Inconsistencies (stage gaps, phase overflow, conflicting Done
//! colors) raise Fail, which defers the output to the background ambassador.
//!
//! The core state machine here is reused by the epoch protocols as their
//! fallback, and by the worker/clock protocol for worker warm-up, so its
//! per-interaction events are reported to the wrapper instead of being
//! applied to wrapper-level flags directly.

use serde::{Deserialize, Serialize};

use crate::primitives::{ambassador_init, ambassador_stable, ambassador_step, AmbassadorState};
use crate::sim::{Color, PairMode, PhaseRecord, Protocol, StateObserver, TrialLog, UsageFlags};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Cancellation,
    Buffer1,
    Splitting,
    Buffer2,
}

/// Stage as a pure function of the in-phase step counter.
#[inline]
pub fn stage_of(step: u16, stage_len: u16) -> Stage {
    debug_assert!(step < 4 * stage_len);
    match step / stage_len {
        0 => Stage::Cancellation,
        1 => Stage::Buffer1,
        2 => Stage::Splitting,
        _ => Stage::Buffer2,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TwoParams {
    pub stage_len: u16,
    /// Reaching this phase index ends the run of the core (failure for the
    /// standalone and fallback uses, completion for warm-up).
    pub phase_cap: u16,
}

impl TwoParams {
    /// Standard parameterization: stage length `⌈c_len · log₂ n⌉` and the
    /// `⌈log₂ n⌉ + 2` phase budget that suffices from any starting margin.
    pub fn classic(n: usize, c_len: f64) -> TwoParams {
        let log2n = ceil_log2(n);
        TwoParams {
            stage_len: (c_len * log2n as f64).ceil() as u16,
            phase_cap: log2n as u16 + 2,
        }
    }
}

/// `⌈log₂ n⌉` for n ≥ 1, computed exactly in integers.
pub fn ceil_log2(n: usize) -> u32 {
    assert!(n >= 1);
    usize::BITS - (n - 1).leading_zeros()
}

/// Per-agent state of the phased core.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoCore {
    pub color: Option<Color>,
    pub phase: u16,
    pub step: u16,
    pub split_used: bool,
}

impl TwoCore {
    pub fn new(color: Option<Color>) -> TwoCore {
        TwoCore {
            color,
            phase: 0,
            step: 0,
            split_used: false,
        }
    }

    /// Absolute stage index across phases; consecutive-stage checks and
    /// pulling compare these.
    fn global_stage(&self, p: &TwoParams) -> u32 {
        self.phase as u32 * 4 + self.step as u32 / p.stage_len as u32
    }

    fn stage(&self, p: &TwoParams) -> Stage {
        stage_of(self.step, p.stage_len)
    }
}

/// What one interaction did to one side of the pair, for the wrapper to
/// translate (fail flags, Done broadcasts, warm-up completion).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepFlags {
    /// Stage gap ≥ 2 detected; the protocol's self-consistency is broken.
    pub fail: bool,
    /// The phase counter reached the cap through its natural wrap.
    pub capped: bool,
    /// Entered Buffer2 colored without having split: this color is the
    /// claimed majority.
    pub done: Option<Color>,
}

/// One interaction between two active cores. Every rule predicate is
/// evaluated on the pre-interaction states — the rules "happen in parallel"
/// — so the code order of the writes below is immaterial; the rules write
/// disjoint fields except for the split flag, where the parallel reading is
/// kept deliberately (an agent whose very last splitting-stage interaction
/// is its first split still reports Done, exactly as the simultaneous-rule
/// semantics dictates; the event is rare and the color it announces is
/// almost surely the one that would win anyway).
pub fn classic_step(u: &mut TwoCore, v: &mut TwoCore, p: &TwoParams) -> (StepFlags, StepFlags) {
    let (pu, pv) = (*u, *v);
    if pu.global_stage(p).abs_diff(pv.global_stage(p)) >= 2 {
        let fail = StepFlags {
            fail: true,
            ..StepFlags::default()
        };
        return (fail, fail);
    }
    (
        classic_step_side(u, &pu, &pv, p),
        classic_step_side(v, &pv, &pu, p),
    )
}

fn classic_step_side(
    me: &mut TwoCore,
    pre: &TwoCore,
    other: &TwoCore,
    p: &TwoParams,
) -> StepFlags {
    let mut flags = StepFlags::default();
    let my_stage = pre.stage(p);
    let other_stage = other.stage(p);

    // Cancellation: both in the cancellation stage with opposite colors.
    if my_stage == Stage::Cancellation
        && other_stage == Stage::Cancellation
        && opposite_colors(pre.color, other.color)
    {
        me.color = None;
    }

    // Split: both in the splitting stage, one colored and unsplit, one empty.
    if my_stage == Stage::Splitting && other_stage == Stage::Splitting {
        if pre.color.is_none() && other.color.is_some() && !other.split_used {
            me.color = other.color;
            me.split_used = true;
        } else if pre.color.is_some() && other.color.is_none() && !pre.split_used {
            me.split_used = true;
        }
    }

    // Counters: step, wrap into the next phase, pull from Buffer2 into the
    // next phase's cancellation stage.
    me.step = pre.step + 1;
    if me.step == 4 * p.stage_len {
        me.step = 0;
        me.phase = pre.phase + 1;
    }
    if my_stage == Stage::Buffer2
        && other_stage == Stage::Cancellation
        && other.global_stage(p) == pre.global_stage(p) + 1
    {
        me.phase = other.phase;
        me.step = 0;
    }
    if me.phase == p.phase_cap {
        flags.capped = true;
    }

    // Buffer2 entry happens only through the step increment. A colored agent
    // arriving with its split budget intact announces its color as the
    // majority; a spent budget is renewed for the next phase instead.
    if pre.step + 1 == 3 * p.stage_len {
        if !pre.split_used {
            if pre.color.is_some() {
                flags.done = pre.color;
            }
        } else {
            me.split_used = false;
        }
    }
    flags
}

fn opposite_colors(a: Option<Color>, b: Option<Color>) -> bool {
    matches!(
        (a, b),
        (Some(Color::Black), Some(Color::White)) | (Some(Color::White), Some(Color::Black))
    )
}

// ---------------------------------------------------------------------------
// Standalone protocol
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TwoState {
    pub core: TwoCore,
    pub done: Option<Color>,
    pub fail: bool,
    pub amb: AmbassadorState,
    /// Most recent non-empty color, for the output of an empty, not-done,
    /// not-failed agent. Implementation cache, excluded from the census.
    pub last: Color,
}

pub struct TwoProtocol {
    pub n: usize,
    pub params: TwoParams,
}

impl TwoProtocol {
    pub fn new(n: usize, c_len: f64) -> TwoProtocol {
        TwoProtocol {
            n,
            params: TwoParams::classic(n, c_len),
        }
    }
}

/// Default stage-length constant. Desynchronization arbitration fires when
/// the sampled stage spread ever reaches two stages, so the stage length has
/// to dominate the counters' random spread (≈ √(parallel time) per agent,
/// maximized over the population). Measured arbitration rates per phase:
/// certain at 4–12, ≈8% per run at 20, and extrapolating the observed ~30×
/// drop per +4 puts 32 below 10⁻⁶ per phase — negligible across a whole
/// experiment batch while keeping stages Θ(log n).
pub const DEFAULT_TWO_C_LEN: f64 = 32.0;

/// Done/Fail broadcast exchange, shared by every protocol that wraps the
/// phased core. Returns the updated (done, fail) pairs. `u_color`/`v_color`
/// are the colors visible on each side for conflict detection (an agent
/// broadcasting Done fails upon meeting an opposite non-empty color).
pub fn done_exchange(
    u_done: Option<Color>,
    u_color: Option<Color>,
    v_done: Option<Color>,
    v_color: Option<Color>,
) -> ((Option<Color>, bool), (Option<Color>, bool)) {
    let side = |my_done: Option<Color>,
                their_done: Option<Color>,
                their_color: Option<Color>|
     -> (Option<Color>, bool) {
        if let Some(c) = my_done {
            let visible = their_done.or(their_color);
            let conflict = visible.is_some_and(|vc| vc != c);
            (Some(c), conflict)
        } else {
            // Adopt the partner's claim.
            (their_done, false)
        }
    };
    (
        side(u_done, v_done, v_color),
        side(v_done, u_done, u_color),
    )
}

impl Protocol for TwoProtocol {
    type State = TwoState;
    type Observer = TwoObserver;

    fn pair_mode(&self) -> PairMode {
        PairMode::Unordered
    }

    fn init_state(&self, input: Color) -> TwoState {
        TwoState {
            core: TwoCore::new(Some(input)),
            done: None,
            fail: false,
            amb: ambassador_init(input),
            last: input,
        }
    }

    fn transition(&self, mut u: TwoState, mut v: TwoState) -> (TwoState, TwoState) {
        // The ambassador runs in the background on every interaction.
        let (ua, va) = ambassador_step(u.amb, v.amb);
        u.amb = ua;
        v.amb = va;

        if u.fail || v.fail {
            u.fail = true;
            v.fail = true;
            return (u, v);
        }
        if u.done.is_some() || v.done.is_some() {
            let ((ud, uf), (vd, vf)) = done_exchange(u.done, u.core.color, v.done, v.core.color);
            apply_done(&mut u, ud, uf);
            apply_done(&mut v, vd, vf);
            return (u, v);
        }

        let (fu, fv) = classic_step(&mut u.core, &mut v.core, &self.params);
        for (node, f) in [(&mut u, fu), (&mut v, fv)] {
            node.fail |= f.fail || f.capped;
            if let Some(c) = f.done {
                node.done = Some(c);
            }
            if let Some(c) = node.core.color {
                node.last = c;
            }
        }
        (u, v)
    }

    fn is_stable(&self, states: &[TwoState]) -> bool {
        two_family_stable(
            states.iter().map(|s| (s.done, s.fail)),
            || states.iter().map(|s| s.amb),
        )
    }

    fn output(&self, s: &TwoState) -> Color {
        if s.fail {
            s.amb.opinion
        } else if let Some(c) = s.done {
            c
        } else {
            s.core.color.unwrap_or(s.last)
        }
    }

    fn usage(&self, states: &[TwoState]) -> UsageFlags {
        UsageFlags {
            used_fallback: false,
            used_ambassador: states.iter().any(|s| s.fail),
        }
    }

    fn observer(&self) -> TwoObserver {
        TwoObserver::new(self.n, self.params)
    }

    fn encode_abstract(&self, s: &TwoState) -> u64 {
        pack_core(&s.core)
            | (pack_opt_color(s.done) << 32)
            | ((s.fail as u64) << 34)
            | (pack_amb(&s.amb) << 35)
    }
}

fn apply_done(node: &mut TwoState, done: Option<Color>, conflict: bool) {
    if let Some(c) = done {
        if node.done.is_none() {
            node.core.color = Some(c);
            node.last = c;
        }
        node.done = Some(c);
    }
    node.fail |= conflict;
}

/// Stability shared by all protocols built on the phased core: either every
/// agent broadcasts Done with one color and none has failed (a failed agent
/// would go on to spread Fail and flip outputs to ambassador opinions), or
/// every agent has failed and the background ambassador has itself
/// stabilized.
pub fn two_family_stable<I, J, F>(done_fail: I, ambs: F) -> bool
where
    I: Iterator<Item = (Option<Color>, bool)>,
    J: Iterator<Item = AmbassadorState>,
    F: FnOnce() -> J,
{
    let mut unanimous: Option<Color> = None;
    let mut done_unanimous = true;
    let mut any_fail = false;
    let mut all_fail = true;
    for (done, fail) in done_fail {
        match (done, unanimous) {
            (Some(c), None) => unanimous = Some(c),
            (Some(c), Some(prev)) => done_unanimous &= c == prev,
            (None, _) => done_unanimous = false,
        }
        any_fail |= fail;
        all_fail &= fail;
        if (!done_unanimous || any_fail) && !all_fail {
            return false; // both branches already ruled out
        }
    }
    if done_unanimous && unanimous.is_some() && !any_fail {
        return true;
    }
    all_fail && {
        let v: Vec<AmbassadorState> = ambs().collect();
        ambassador_stable(&v)
    }
}

pub fn pack_opt_color(c: Option<Color>) -> u64 {
    match c {
        None => 0,
        Some(Color::Black) => 1,
        Some(Color::White) => 2,
    }
}

pub fn pack_amb(a: &AmbassadorState) -> u64 {
    (matches!(a.opinion, Color::White) as u64) << 1 | a.strong as u64
}

pub fn pack_core(c: &TwoCore) -> u64 {
    pack_opt_color(c.color) | ((c.phase as u64) << 2) | ((c.step as u64) << 10)
        | ((c.split_used as u64) << 26)
}

// ---------------------------------------------------------------------------
// Observer: phase-start margins and post-cancellation vacancy
// ---------------------------------------------------------------------------

/// Stage-entry census for the standalone protocol. A stage has "begun" once
/// 90% of the agents have reached it; the margin is recorded when a phase's
/// cancellation stage begins and the empty fraction when the following
/// buffer stage begins.
pub struct TwoObserver {
    n: usize,
    params: TwoParams,
    next_rank: u32,
    majority: Option<Color>,
}

pub const STAGE_BEGIN_QUORUM: f64 = 0.9;

impl TwoObserver {
    fn new(n: usize, params: TwoParams) -> TwoObserver {
        TwoObserver {
            n,
            params,
            next_rank: 0,
            majority: None,
        }
    }
}

impl StateObserver<TwoState> for TwoObserver {
    fn checkpoint(&mut self, states: &[TwoState], _interactions: u64, log: &mut TrialLog) {
        if self.majority.is_none() {
            // First checkpoint sees the untouched inputs.
            let black = states.iter().filter(|s| s.core.color == Some(Color::Black)).count();
            self.majority = Some(if 2 * black > states.len() {
                Color::Black
            } else {
                Color::White
            });
        }
        let maj = self.majority.unwrap();
        let quorum = (STAGE_BEGIN_QUORUM * self.n as f64).ceil() as usize;
        // Ranks past the phase cap cannot correspond to live agents; without
        // this bound an all-Done population would satisfy every rank.
        let rank_cap = 4 * (self.params.phase_cap as u32 + 1);
        while self.next_rank < rank_cap {
            let mut reached = 0usize;
            let mut maj_count = 0i64;
            let mut min_count = 0i64;
            let mut empty = 0usize;
            for s in states {
                let rank = if s.done.is_some() || s.fail {
                    u32::MAX
                } else {
                    s.core.global_stage(&self.params)
                };
                if rank >= self.next_rank {
                    reached += 1;
                }
                match s.core.color {
                    Some(c) if c == maj => maj_count += 1,
                    Some(_) => min_count += 1,
                    None => empty += 1,
                }
            }
            if reached < quorum {
                return;
            }
            let phase = self.next_rank / 4;
            match self.next_rank % 4 {
                0 => log.phases.push(PhaseRecord {
                    phase_index: phase,
                    empty_fraction_after_cancel: None,
                    out_of_sync_count: 0,
                    majority_minus_minority: maj_count - min_count,
                }),
                1 => {
                    if let Some(rec) = log
                        .phases
                        .iter_mut()
                        .find(|r| r.phase_index == phase)
                    {
                        rec.empty_fraction_after_cancel = Some(empty as f64 / self.n as f64);
                    }
                }
                _ => {}
            }
            self.next_rank += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: TwoParams = TwoParams {
        stage_len: 8,
        phase_cap: 6,
    };

    fn core(color: Option<Color>, phase: u16, step: u16, split_used: bool) -> TwoCore {
        TwoCore {
            color,
            phase,
            step,
            split_used,
        }
    }

    #[test]
    fn stage_boundaries() {
        assert_eq!(stage_of(0, 8), Stage::Cancellation);
        assert_eq!(stage_of(7, 8), Stage::Cancellation);
        assert_eq!(stage_of(8, 8), Stage::Buffer1);
        assert_eq!(stage_of(16, 8), Stage::Splitting);
        assert_eq!(stage_of(31, 8), Stage::Buffer2);
    }

    #[test]
    fn cancellation_empties_both() {
        let mut u = core(Some(Color::Black), 0, 3, false);
        let mut v = core(Some(Color::White), 0, 5, false);
        classic_step(&mut u, &mut v, &P);
        assert_eq!(u.color, None);
        assert_eq!(v.color, None);
        assert_eq!((u.step, v.step), (4, 6));
    }

    #[test]
    fn same_colors_do_not_cancel() {
        let mut u = core(Some(Color::Black), 0, 3, false);
        let mut v = core(Some(Color::Black), 0, 5, false);
        classic_step(&mut u, &mut v, &P);
        assert_eq!(u.color, Some(Color::Black));
        assert_eq!(v.color, Some(Color::Black));
    }

    #[test]
    fn split_copies_color_and_marks_both() {
        let mut u = core(Some(Color::Black), 0, 17, false);
        let mut v = core(None, 0, 18, false);
        classic_step(&mut u, &mut v, &P);
        assert_eq!(v.color, Some(Color::Black));
        assert!(u.split_used && v.split_used);
        // A second split from the same donor is refused.
        let mut w = core(None, 0, 18, false);
        classic_step(&mut u, &mut w, &P);
        assert_eq!(w.color, None);
        assert!(!w.split_used);
    }

    #[test]
    fn buffer2_entry_sets_done_without_split() {
        let mut u = core(Some(Color::White), 1, 23, false);
        let mut v = core(Some(Color::White), 1, 20, true);
        let (fu, fv) = classic_step(&mut u, &mut v, &P);
        assert_eq!(fu.done, Some(Color::White));
        assert_eq!(fv.done, None);
        assert!(!u.split_used);
    }

    #[test]
    fn buffer2_entry_resets_split_flag() {
        let mut u = core(Some(Color::White), 1, 23, true);
        let mut v = core(Some(Color::White), 1, 20, true);
        let (fu, _) = classic_step(&mut u, &mut v, &P);
        assert_eq!(fu.done, None);
        assert!(!u.split_used);
    }

    #[test]
    fn last_moment_split_still_reports_done() {
        // The donor's final splitting interaction performs a split and
        // crosses into Buffer2 simultaneously; the entry check reads the
        // pre-interaction flag (parallel rule semantics), so Done fires.
        let mut u = core(Some(Color::Black), 0, 23, false);
        let mut v = core(None, 0, 17, false);
        let (fu, _) = classic_step(&mut u, &mut v, &P);
        assert_eq!(fu.done, Some(Color::Black));
        assert_eq!(v.color, Some(Color::Black));
        assert_eq!(stage_of(u.step, P.stage_len), Stage::Buffer2);
    }

    #[test]
    fn last_moment_receiver_keeps_flag_and_is_not_done() {
        // An empty agent that receives a split on its own Buffer2-entry
        // interaction was empty pre-state: no Done, and the fresh split flag
        // (written by the split rule) survives into the next phase.
        let mut u = core(None, 0, 23, false);
        let mut v = core(Some(Color::White), 0, 17, false);
        let (fu, _) = classic_step(&mut u, &mut v, &P);
        assert_eq!(fu.done, None);
        assert_eq!(u.color, Some(Color::White));
        assert!(u.split_used);
    }

    #[test]
    fn stage_gap_fails_both() {
        let mut u = core(Some(Color::Black), 0, 0, false);
        let mut v = core(Some(Color::White), 0, 17, false);
        let (fu, fv) = classic_step(&mut u, &mut v, &P);
        assert!(fu.fail && fv.fail);
        // Untouched otherwise.
        assert_eq!(u.step, 0);
        assert_eq!(v.step, 17);
    }

    #[test]
    fn pulling_into_next_phase() {
        let mut u = core(None, 2, 26, false); // Buffer2 of phase 2
        let mut v = core(Some(Color::Black), 3, 1, false); // Cancellation of phase 3
        classic_step(&mut u, &mut v, &P);
        assert_eq!((u.phase, u.step), (3, 0));
        assert_eq!((v.phase, v.step), (3, 2));
    }

    #[test]
    fn phase_cap_reports_capped() {
        let mut u = core(Some(Color::Black), 5, 31, true);
        let mut v = core(Some(Color::Black), 5, 29, true);
        let (fu, fv) = classic_step(&mut u, &mut v, &P);
        assert!(fu.capped);
        assert!(!fv.capped);
        assert_eq!(u.phase, 6);
    }

    #[test]
    fn wrap_into_next_phase() {
        let mut u = core(None, 1, 31, false);
        let mut v = core(None, 1, 30, false);
        classic_step(&mut u, &mut v, &P);
        assert_eq!((u.phase, u.step), (2, 0));
        assert_eq!((v.phase, v.step), (1, 31));
    }

    #[test]
    fn done_exchange_spreads_and_conflicts() {
        use Color::*;
        // Spread to an empty agent.
        let ((ud, uf), (vd, vf)) = done_exchange(Some(Black), Some(Black), None, None);
        assert_eq!((ud, uf), (Some(Black), false));
        assert_eq!((vd, vf), (Some(Black), false));
        // Conflict against an opposite colored agent.
        let ((_, uf), (vd, _)) = done_exchange(Some(Black), Some(Black), None, Some(White));
        assert!(uf);
        assert_eq!(vd, Some(Black));
        // Two Done agents with different colors both fail.
        let ((_, uf), (_, vf)) = done_exchange(Some(Black), Some(Black), Some(White), Some(White));
        assert!(uf && vf);
        // Same color: quiet.
        let ((_, uf), (_, vf)) = done_exchange(Some(Black), Some(Black), Some(Black), Some(Black));
        assert!(!uf && !vf);
    }
}
