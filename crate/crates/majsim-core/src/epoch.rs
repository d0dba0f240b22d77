//! Epoch-structured majority with catch-up phases.
//!
//! Phases keep only the cancellation and splitting stages and are grouped
//! into epochs; each epoch ends with a catch-up window in which agents that
//! missed splits ("out-of-sync") replay them against empty agents, halving
//! their owed value per catch-up split. An agent still out-of-sync when its
//! epoch ends triggers a population-wide restart of the phased protocol from
//! the colors held two epoch boundaries ago, which then finishes the job.
//! The counter-update strategy is pluggable: both sides counting gives the
//! symmetric variant, min-side counting gives the two-choices variant whose
//! counters stay tightly concentrated (and which therefore tolerates a
//! larger phases-per-epoch exponent).

use serde::{Deserialize, Serialize};

use crate::primitives::{ambassador_init, ambassador_step, AmbassadorState};
use crate::sim::{
    Color, EpochRecord, PairMode, PhaseRecord, Protocol, StateObserver, TrialLog, UsageFlags,
};
use crate::two::{
    ceil_log2, classic_step, done_exchange, pack_amb, pack_core, pack_opt_color,
    two_family_stable, TwoCore, TwoParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CounterStrategy {
    /// Every interaction advances both agents' counters.
    BothIncrement,
    /// Only the strictly smaller counter advances; ties advance the
    /// initiator. Requires ordered pairs.
    MinIncrement,
}

#[derive(Clone, Copy, Debug)]
pub struct EpochParams {
    pub a: f64,
    /// Phases per epoch, `⌈(log₂ n)^a⌉`.
    pub k: u32,
    /// Scheduled epoch count, `⌈(log₂ n)^{1−a}⌉`.
    pub epochs: u32,
    /// Interactions per stage, `⌈c_len · (log₂ n)^{1−a}⌉`.
    pub phase_len: u32,
    /// Catch-up window length, `⌈c_catch · log₂ n⌉`.
    pub catch_len: u32,
    pub strategy: CounterStrategy,
    /// Parameters for the restarted phased protocol.
    pub fallback: TwoParams,
}

pub const DEFAULT_EPOCH_C_LEN: f64 = 6.0;
pub const DEFAULT_EPOCH_C_CATCH: f64 = 8.0;

impl EpochParams {
    pub fn new(n: usize, a: f64, strategy: CounterStrategy) -> EpochParams {
        EpochParams::with_constants(
            n,
            a,
            DEFAULT_EPOCH_C_LEN,
            DEFAULT_EPOCH_C_CATCH,
            crate::two::DEFAULT_TWO_C_LEN,
            strategy,
        )
    }

    pub fn with_constants(
        n: usize,
        a: f64,
        c_len: f64,
        c_catch: f64,
        fallback_c_len: f64,
        strategy: CounterStrategy,
    ) -> EpochParams {
        assert!(0.0 < a && a < 1.0);
        let log2n = ceil_log2(n) as f64;
        let k = log2n.powf(a).ceil() as u32;
        let epochs = log2n.powf(1.0 - a).ceil() as u32;
        // The schedule must provide at least one phase per doubling.
        assert!(k * epochs >= log2n as u32);
        EpochParams {
            a,
            k,
            epochs,
            phase_len: (c_len * log2n.powf(1.0 - a)).ceil() as u32,
            catch_len: (c_catch * log2n).ceil() as u32,
            strategy,
            fallback: TwoParams::classic(n, fallback_c_len),
        }
    }

    /// Counted interactions per epoch: K phases of two stages plus catch-up.
    pub fn epoch_len(&self) -> u64 {
        self.k as u64 * 2 * self.phase_len as u64 + self.catch_len as u64
    }
}

/// Owed singletons of an out-of-sync agent: `2^{K−phi}`.
pub fn val(phi: u32, k: u32) -> u64 {
    assert!(phi <= k);
    1u64 << (k - phi)
}

/// Where a counter value sits in the epoch schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Cancel(u32),
    Split(u32),
    CatchUp,
}

pub fn slot_at(counter: u64, p: &EpochParams) -> (u64, Slot) {
    let t = p.epoch_len();
    let epoch = counter / t;
    let pos = counter % t;
    let phase_span = 2 * p.phase_len as u64;
    let slot = if pos < p.k as u64 * phase_span {
        let phase = (pos / phase_span) as u32;
        if pos % phase_span < p.phase_len as u64 {
            Slot::Cancel(phase)
        } else {
            Slot::Split(phase)
        }
    } else {
        Slot::CatchUp
    };
    (epoch, slot)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochCore {
    pub color: Option<Color>,
    pub sync: bool,
    /// While out-of-sync: the phase index (0-based, within the epoch) at
    /// which sync was lost, advanced by catch-up splits toward K.
    pub phi: u32,
    pub counter: u64,
    pub split_used: bool,
    /// Color at the start of the current epoch.
    pub backup1: Option<Color>,
    /// Color at the start of the previous epoch; the restart color.
    pub backup2: Option<Color>,
    /// Color at the start of the epoch before that. Needed by nodes that
    /// have already crossed into the epoch after the one whose boundary
    /// triggered a restart: their start-of-(j−1) color has shifted one slot
    /// further down the chain. Without it the restarted ensemble would mix
    /// snapshots of two different epochs, whose combined majority can
    /// disagree with the true one while margins are still small.
    pub backup3: Option<Color>,
}

impl EpochCore {
    pub fn new(color: Option<Color>) -> EpochCore {
        EpochCore {
            color,
            sync: true,
            phi: 0,
            counter: 0,
            split_used: false,
            backup1: color,
            backup2: color,
            backup3: color,
        }
    }

    pub fn position(&self, p: &EpochParams) -> (u64, Slot) {
        slot_at(self.counter, p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpochMode {
    Counting(EpochCore),
    /// Restarted phased protocol. `gen` is the index (mod 4) of the epoch
    /// whose boundary fired the restart; joining nodes use it to pick the
    /// backup slot holding their color from the start of epoch gen−1, so the
    /// whole fallback population restarts from one consistent snapshot.
    Fallback { core: TwoCore, gen: u8 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochState {
    pub mode: EpochMode,
    pub done: Option<Color>,
    pub fail: bool,
    pub amb: AmbassadorState,
    /// Most recent non-empty color; output cache only, not census state.
    pub last: Color,
}

impl EpochState {
    pub fn visible_color(&self) -> Option<Color> {
        match self.mode {
            EpochMode::Counting(c) => c.color,
            EpochMode::Fallback { core, .. } => core.color,
        }
    }
}

/// Outcome of one agent's counter advance: a restart trigger carries the
/// color the restarted protocol must begin from together with the index
/// (mod 4) of the epoch whose boundary fired.
#[derive(Clone, Copy, Debug, Default)]
struct Advance {
    trigger: Option<(Option<Color>, u8)>,
    exhausted: bool,
}

/// Crossing an epoch boundary: an out-of-sync agent that caught all the way
/// up resynchronizes; one that did not triggers the restart (its core is
/// abandoned, so the backups are deliberately left unshifted — the restart
/// color is the one two boundaries back). Synchronized agents snapshot their
/// color into the backup chain.
fn cross_epoch_boundary(core: &mut EpochCore, p: &EpochParams) -> Advance {
    let mut adv = Advance::default();
    if !core.sync {
        if core.phi == p.k {
            core.sync = true;
        } else {
            let j = (core.counter / p.epoch_len() - 1) as u8 & 3;
            adv.trigger = Some((core.backup2, j));
            return adv;
        }
    }
    core.phi = 0;
    core.split_used = false;
    core.backup3 = core.backup2;
    core.backup2 = core.backup1;
    core.backup1 = core.color;
    // A counter past the scheduled epochs (with slack for the trailing
    // doubling) means the margin machinery silently stalled; give up on
    // counting rather than spin forever.
    if core.counter / p.epoch_len() >= (p.epochs + 2) as u64 {
        adv.exhausted = true;
    }
    adv
}

/// Advance one agent's counter by one slot, firing the stage-exit and
/// epoch-boundary events it crosses. The splitting-exit check reads the
/// current (post-interaction) split flag: an agent whose split happened on
/// its final splitting-stage interaction did split in that stage.
fn bump(core: &mut EpochCore, p: &EpochParams) -> Advance {
    let phase_span = 2 * p.phase_len as u64;
    let pos = core.counter % p.epoch_len();
    if pos < p.k as u64 * phase_span && pos % phase_span == phase_span - 1 {
        let phase = (pos / phase_span) as u32;
        if core.sync && core.color.is_some() && !core.split_used {
            core.sync = false;
            core.phi = phase;
        }
        core.split_used = false;
    }
    core.counter += 1;
    if core.counter % p.epoch_len() == 0 {
        cross_epoch_boundary(core, p)
    } else {
        Advance::default()
    }
}

/// Pulling: a catch-up agent meeting anyone already in the next epoch jumps
/// to that epoch's start, crossing its own boundary on the way.
fn pull_to_next_epoch(core: &mut EpochCore, p: &EpochParams) -> Advance {
    core.counter = (core.counter / p.epoch_len() + 1) * p.epoch_len();
    cross_epoch_boundary(core, p)
}

/// Pair rules plus counter discipline for two counting agents. `initiator`
/// breaks counter ties under `MinIncrement`. Returned advances report
/// restart triggers for the wrapper to apply.
fn counting_step(
    u: &mut EpochCore,
    v: &mut EpochCore,
    p: &EpochParams,
) -> (Advance, Advance) {
    let (pu, pv) = (*u, *v);
    let (eu, su) = pu.position(p);
    let (ev, sv) = pv.position(p);

    // Color rules need both agents synchronized and at the same schedule
    // position; an out-of-sync agent ignores them entirely.
    if pu.sync && pv.sync && eu == ev {
        match (su, sv) {
            (Slot::Cancel(q), Slot::Cancel(r)) if q == r => {
                if opposite(pu.color, pv.color) {
                    u.color = None;
                    v.color = None;
                }
            }
            (Slot::Split(q), Slot::Split(r)) if q == r => {
                if pu.color.is_none() && pv.color.is_some() && !pv.split_used {
                    u.color = pv.color;
                    u.split_used = true;
                    v.split_used = true;
                } else if pu.color.is_some() && pv.color.is_none() && !pu.split_used {
                    v.color = pu.color;
                    v.split_used = true;
                    u.split_used = true;
                }
            }
            _ => {}
        }
    }

    // Catch-up split: an out-of-sync agent passes half its owed value to an
    // empty synchronized agent in the same catch-up window.
    if su == Slot::CatchUp && sv == Slot::CatchUp && eu == ev {
        if !pu.sync && pu.phi < p.k && pv.sync && pv.color.is_none() {
            debug_assert!(pu.color.is_some());
            u.phi = pu.phi + 1;
            v.color = pu.color;
            v.phi = pu.phi + 1;
            v.sync = false;
        } else if !pv.sync && pv.phi < p.k && pu.sync && pu.color.is_none() {
            debug_assert!(pv.color.is_some());
            v.phi = pv.phi + 1;
            u.color = pv.color;
            u.phi = pv.phi + 1;
            u.sync = false;
        }
    }

    // Counters: a catch-up agent one epoch behind its partner is pulled
    // instead of stepping; otherwise the strategy decides who steps.
    let u_pulled = su == Slot::CatchUp && ev == eu + 1;
    let v_pulled = sv == Slot::CatchUp && eu == ev + 1;
    let (u_steps, v_steps) = match p.strategy {
        CounterStrategy::BothIncrement => (true, true),
        CounterStrategy::MinIncrement => {
            let u_min = pu.counter <= pv.counter; // tie goes to the initiator
            (u_min, !u_min)
        }
    };
    let au = if u_pulled {
        pull_to_next_epoch(u, p)
    } else if u_steps {
        bump(u, p)
    } else {
        Advance::default()
    };
    let av = if v_pulled {
        pull_to_next_epoch(v, p)
    } else if v_steps {
        bump(v, p)
    } else {
        Advance::default()
    };
    (au, av)
}

fn opposite(a: Option<Color>, b: Option<Color>) -> bool {
    matches!(
        (a, b),
        (Some(Color::Black), Some(Color::White)) | (Some(Color::White), Some(Color::Black))
    )
}

/// Restart color for a counting node joining a fallback broadcast that was
/// fired at the boundary of epoch `gen` (mod 4): its stored color from the
/// start of epoch gen−1. A node's slots hold the starts of its last three
/// epochs, which covers every position within one epoch of the trigger —
/// the whole population, outside astronomically unlikely stragglers (who
/// resolve to the nearest stored slot instead).
fn restart_seed(core: &EpochCore, gen: u8, p: &EpochParams) -> Option<Color> {
    let e = (core.counter / p.epoch_len()) as u8 & 3;
    match e.wrapping_sub(gen) & 3 {
        0 => core.backup2,
        3 => core.backup1,
        _ => core.backup3,
    }
}

// ---------------------------------------------------------------------------
// Protocol wrapper
// ---------------------------------------------------------------------------

pub struct EpochProtocol {
    pub n: usize,
    pub params: EpochParams,
}

impl EpochProtocol {
    pub fn new(n: usize, a: f64, strategy: CounterStrategy) -> EpochProtocol {
        EpochProtocol {
            n,
            params: EpochParams::new(n, a, strategy),
        }
    }
}

impl Protocol for EpochProtocol {
    type State = EpochState;
    type Observer = EpochObserver;

    fn pair_mode(&self) -> PairMode {
        match self.params.strategy {
            CounterStrategy::BothIncrement => PairMode::Unordered,
            CounterStrategy::MinIncrement => PairMode::Ordered,
        }
    }

    fn init_state(&self, input: Color) -> EpochState {
        EpochState {
            mode: EpochMode::Counting(EpochCore::new(Some(input))),
            done: None,
            fail: false,
            amb: ambassador_init(input),
            last: input,
        }
    }

    fn transition(&self, mut u: EpochState, mut v: EpochState) -> (EpochState, EpochState) {
        let (ua, va) = ambassador_step(u.amb, v.amb);
        u.amb = ua;
        v.amb = va;

        if u.fail || v.fail {
            u.fail = true;
            v.fail = true;
            return (u, v);
        }
        if u.done.is_some() || v.done.is_some() {
            let ((ud, uf), (vd, vf)) =
                done_exchange(u.done, u.visible_color(), v.done, v.visible_color());
            apply_done(&mut u, ud, uf);
            apply_done(&mut v, vd, vf);
            return (u, v);
        }

        match (&mut u.mode, &mut v.mode) {
            (EpochMode::Counting(cu), EpochMode::Counting(cv)) => {
                let (au, av) = counting_step(cu, cv, &self.params);
                apply_advance(&mut u, au);
                apply_advance(&mut v, av);
            }
            (EpochMode::Fallback { core: fu, .. }, EpochMode::Fallback { core: fv, .. }) => {
                let (su, sv) = classic_step(fu, fv, &self.params.fallback);
                for (node, s) in [(&mut u, su), (&mut v, sv)] {
                    node.fail |= s.fail || s.capped;
                    if let Some(c) = s.done {
                        node.done = Some(c);
                    }
                }
            }
            // Restart contagion: the counting side joins the fallback from
            // its generation-matched snapshot; the interaction is spent on
            // the switch.
            (EpochMode::Counting(cu), EpochMode::Fallback { gen, .. }) => {
                let gen = *gen;
                let seed = restart_seed(cu, gen, &self.params);
                u.mode = EpochMode::Fallback {
                    core: TwoCore::new(seed),
                    gen,
                };
            }
            (EpochMode::Fallback { gen, .. }, EpochMode::Counting(cv)) => {
                let gen = *gen;
                let seed = restart_seed(cv, gen, &self.params);
                v.mode = EpochMode::Fallback {
                    core: TwoCore::new(seed),
                    gen,
                };
            }
        }
        for node in [&mut u, &mut v] {
            if let Some(c) = node.visible_color() {
                node.last = c;
            }
        }
        (u, v)
    }

    fn is_stable(&self, states: &[EpochState]) -> bool {
        two_family_stable(states.iter().map(|s| (s.done, s.fail)), || {
            states.iter().map(|s| s.amb)
        })
    }

    fn output(&self, s: &EpochState) -> Color {
        if s.fail {
            s.amb.opinion
        } else if let Some(c) = s.done {
            c
        } else {
            s.visible_color().unwrap_or(s.last)
        }
    }

    fn usage(&self, states: &[EpochState]) -> UsageFlags {
        UsageFlags {
            used_fallback: states
                .iter()
                .any(|s| matches!(s.mode, EpochMode::Fallback { .. })),
            used_ambassador: states.iter().any(|s| s.fail),
        }
    }

    fn observer(&self) -> EpochObserver {
        EpochObserver::new(self.n, self.params)
    }

    fn encode_abstract(&self, s: &EpochState) -> u64 {
        let body = match s.mode {
            EpochMode::Counting(c) => {
                pack_opt_color(c.color)
                    | ((c.sync as u64) << 2)
                    | ((c.phi as u64) << 3)
                    | ((c.split_used as u64) << 11)
                    | (pack_opt_color(c.backup1) << 12)
                    | (pack_opt_color(c.backup2) << 14)
                    | (pack_opt_color(c.backup3) << 16)
                    | (c.counter << 18)
            }
            EpochMode::Fallback { core, gen } => {
                (1 << 62) | ((gen as u64) << 50) | pack_core(&core)
            }
        };
        body | (pack_opt_color(s.done) << 55) | ((s.fail as u64) << 57) | (pack_amb(&s.amb) << 58)
    }
}

fn apply_done(node: &mut EpochState, done: Option<Color>, conflict: bool) {
    if let Some(c) = done {
        if node.done.is_none() {
            match &mut node.mode {
                EpochMode::Counting(core) => core.color = Some(c),
                EpochMode::Fallback { core, .. } => core.color = Some(c),
            }
            node.last = c;
        }
        node.done = Some(c);
    }
    node.fail |= conflict;
}

fn apply_advance(node: &mut EpochState, adv: Advance) {
    if let Some((restart, gen)) = adv.trigger {
        node.mode = EpochMode::Fallback {
            core: TwoCore::new(restart),
            gen,
        };
    } else if adv.exhausted {
        node.fail = true;
    }
}

// ---------------------------------------------------------------------------
// Observer: per-phase margins, out-of-sync accounting, owed value
// ---------------------------------------------------------------------------

/// Stage-entry census keyed by a global rank: each epoch contributes its K
/// cancellation and K splitting stages plus the catch-up window. A stage has
/// begun once 90% of agents have reached it (restarted or finished agents
/// count as past everything).
pub struct EpochObserver {
    n: usize,
    params: EpochParams,
    next_rank: u32,
    majority: Option<Color>,
    pub max_out_of_sync: u32,
}

impl EpochObserver {
    fn new(n: usize, params: EpochParams) -> EpochObserver {
        EpochObserver {
            n,
            params,
            next_rank: 0,
            majority: None,
            max_out_of_sync: 0,
        }
    }

    fn rank_of(&self, s: &EpochState) -> u32 {
        if s.done.is_some() || s.fail {
            return u32::MAX;
        }
        match s.mode {
            EpochMode::Fallback { .. } => u32::MAX,
            EpochMode::Counting(c) => {
                let (epoch, slot) = c.position(&self.params);
                let idx = match slot {
                    Slot::Cancel(q) => 2 * q,
                    Slot::Split(q) => 2 * q + 1,
                    Slot::CatchUp => 2 * self.params.k,
                };
                epoch as u32 * (2 * self.params.k + 1) + idx
            }
        }
    }
}

impl StateObserver<EpochState> for EpochObserver {
    fn checkpoint(&mut self, states: &[EpochState], _interactions: u64, log: &mut TrialLog) {
        if self.majority.is_none() {
            let black = states
                .iter()
                .filter(|s| s.visible_color() == Some(Color::Black))
                .count();
            self.majority = Some(if 2 * black > states.len() {
                Color::Black
            } else {
                Color::White
            });
        }
        let maj = self.majority.unwrap();
        let oos_now = states
            .iter()
            .filter(|s| matches!(s.mode, EpochMode::Counting(c) if !c.sync))
            .count() as u32;
        self.max_out_of_sync = self.max_out_of_sync.max(oos_now);

        let quorum = (0.9 * self.n as f64).ceil() as usize;
        let per_epoch = 2 * self.params.k + 1;
        let rank_cap = (self.params.epochs + 2) * per_epoch;
        while self.next_rank < rank_cap {
            let reached = states
                .iter()
                .filter(|s| self.rank_of(s) >= self.next_rank)
                .count();
            if reached < quorum {
                return;
            }
            let epoch = self.next_rank / per_epoch;
            let idx = self.next_rank % per_epoch;
            let k = self.params.k;

            let mut maj_count = 0i64;
            let mut min_count = 0i64;
            let mut empty = 0usize;
            for s in states {
                match s.visible_color() {
                    Some(c) if c == maj => maj_count += 1,
                    Some(_) => min_count += 1,
                    None => empty += 1,
                }
            }
            let newly_oos = |phase: u32| -> u32 {
                states
                    .iter()
                    .filter(|s| {
                        matches!(s.mode, EpochMode::Counting(c)
                            if !c.sync && c.phi == phase
                            && c.counter / self.params.epoch_len() == epoch as u64)
                    })
                    .count() as u32
            };

            if idx < 2 * k && idx % 2 == 0 {
                // Cancellation begins: new phase record; settle the
                // out-of-sync count born in the previous phase.
                let q = idx / 2;
                if q > 0 {
                    if let Some(rec) = log
                        .phases
                        .iter_mut()
                        .find(|r| r.phase_index == epoch * k + q - 1)
                    {
                        rec.out_of_sync_count = newly_oos(q - 1);
                    }
                }
                log.phases.push(PhaseRecord {
                    phase_index: epoch * k + q,
                    empty_fraction_after_cancel: None,
                    out_of_sync_count: 0,
                    majority_minus_minority: maj_count - min_count,
                });
            } else if idx < 2 * k {
                // Splitting begins: cancellation is over, record vacancy.
                let q = idx / 2;
                if let Some(rec) = log
                    .phases
                    .iter_mut()
                    .find(|r| r.phase_index == epoch * k + q)
                {
                    rec.empty_fraction_after_cancel = Some(empty as f64 / self.n as f64);
                }
            } else {
                // Catch-up begins: owed value and the last phase's damage;
                // settle the previous epoch's residue now that 90% have
                // moved on... (that happens at the next cancel-begin).
                if k > 0 {
                    if let Some(rec) = log
                        .phases
                        .iter_mut()
                        .find(|r| r.phase_index == epoch * k + k - 1)
                    {
                        rec.out_of_sync_count = newly_oos(k - 1);
                    }
                }
                let owed: u64 = states
                    .iter()
                    .filter_map(|s| match s.mode {
                        EpochMode::Counting(c) if !c.sync => Some(val(c.phi, k)),
                        _ => None,
                    })
                    .sum();
                log.epochs.push(EpochRecord {
                    epoch_index: epoch,
                    owed_at_catchup_start: owed,
                    out_of_sync_at_end: None,
                    majority_minus_minority_at_start: maj_count - min_count,
                });
            }
            if idx == 0 && epoch > 0 {
                // 90% are in the new epoch: whoever is still unsynchronized
                // (or already restarted the phased protocol) failed to catch
                // up by the previous epoch's end.
                let residue = states
                    .iter()
                    .filter(|s| match s.mode {
                        EpochMode::Counting(c) => !c.sync && c.phi < k,
                        EpochMode::Fallback { .. } => true,
                    })
                    .count() as u32;
                if let Some(rec) = log
                    .epochs
                    .iter_mut()
                    .find(|r| r.epoch_index == epoch - 1)
                {
                    rec.out_of_sync_at_end = Some(residue);
                }
            }
            self.next_rank += 1;
        }
    }

    fn finish(&mut self, _states: &[EpochState], _interactions: u64, log: &mut TrialLog) {
        log.max_out_of_sync = Some(self.max_out_of_sync);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> EpochParams {
        EpochParams {
            a: 0.5,
            k: 4,
            epochs: 4,
            phase_len: 5,
            catch_len: 12,
            strategy: CounterStrategy::BothIncrement,
            fallback: TwoParams {
                stage_len: 8,
                phase_cap: 6,
            },
        }
    }

    fn core(color: Option<Color>, counter: u64) -> EpochCore {
        EpochCore {
            counter,
            ..EpochCore::new(color)
        }
    }

    #[test]
    fn val_formula() {
        assert_eq!(val(4, 4), 1);
        assert_eq!(val(1, 4), 8);
        assert_eq!(val(0, 4), 16);
    }

    #[test]
    fn schedule_slots() {
        let p = params(); // epoch_len = 4*10 + 12 = 52
        assert_eq!(p.epoch_len(), 52);
        assert_eq!(slot_at(0, &p), (0, Slot::Cancel(0)));
        assert_eq!(slot_at(4, &p), (0, Slot::Cancel(0)));
        assert_eq!(slot_at(5, &p), (0, Slot::Split(0)));
        assert_eq!(slot_at(10, &p), (0, Slot::Cancel(1)));
        assert_eq!(slot_at(39, &p), (0, Slot::Split(3)));
        assert_eq!(slot_at(40, &p), (0, Slot::CatchUp));
        assert_eq!(slot_at(51, &p), (0, Slot::CatchUp));
        assert_eq!(slot_at(52, &p), (1, Slot::Cancel(0)));
    }

    #[test]
    fn cancel_and_split_in_phase() {
        let p = params();
        let mut u = core(Some(Color::Black), 2);
        let mut v = core(Some(Color::White), 3);
        counting_step(&mut u, &mut v, &p);
        assert_eq!((u.color, v.color), (None, None));
        assert_eq!((u.counter, v.counter), (3, 4));

        let mut u = core(Some(Color::Black), 6);
        let mut v = core(None, 7);
        counting_step(&mut u, &mut v, &p);
        assert_eq!(v.color, Some(Color::Black));
        assert!(u.split_used && v.split_used);
    }

    #[test]
    fn no_rules_across_phases_or_epochs() {
        let p = params();
        // Same stage kind, different phases: nothing happens to colors.
        let mut u = core(Some(Color::Black), 2);
        let mut v = core(Some(Color::White), 12);
        counting_step(&mut u, &mut v, &p);
        assert_eq!(u.color, Some(Color::Black));
        assert_eq!(v.color, Some(Color::White));
        // Same schedule slot, different epochs.
        let mut u = core(Some(Color::Black), 2);
        let mut v = core(Some(Color::White), 2 + 52);
        counting_step(&mut u, &mut v, &p);
        assert_eq!(u.color, Some(Color::Black));
        assert_eq!(v.color, Some(Color::White));
    }

    #[test]
    fn missing_split_desynchronizes_at_stage_exit() {
        let p = params();
        // Colored, unsplit, on the last interaction of phase 1's splitting
        // stage (pos 19 → 20), partner elsewhere in the same stage.
        let mut u = core(Some(Color::Black), 19);
        let mut v = core(Some(Color::Black), 16);
        counting_step(&mut u, &mut v, &p);
        assert!(!u.sync);
        assert_eq!(u.phi, 1);
        assert!(v.sync);
    }

    #[test]
    fn last_interaction_split_keeps_sync() {
        let p = params();
        let mut u = core(Some(Color::Black), 19);
        let mut v = core(None, 16);
        counting_step(&mut u, &mut v, &p);
        assert!(u.sync, "split on the final stage interaction still counts");
        assert_eq!(v.color, Some(Color::Black));
    }

    #[test]
    fn empty_agent_stays_synchronized() {
        let p = params();
        let mut u = core(None, 19);
        let mut v = core(None, 16);
        counting_step(&mut u, &mut v, &p);
        assert!(u.sync);
    }

    #[test]
    fn catchup_split_conserves_val() {
        let p = params();
        let mut u = core(Some(Color::Black), 45);
        u.sync = false;
        u.phi = 2;
        let mut v = core(None, 44);
        let before = val(u.phi, p.k);
        counting_step(&mut u, &mut v, &p);
        assert_eq!(u.phi, 3);
        assert_eq!(v.color, Some(Color::Black));
        assert_eq!(v.phi, 3);
        assert!(!v.sync);
        assert_eq!(val(u.phi, p.k) + val(v.phi, p.k), before);
    }

    #[test]
    fn caught_up_agent_stops_splitting() {
        let p = params();
        let mut u = core(Some(Color::Black), 45);
        u.sync = false;
        u.phi = p.k;
        let mut v = core(None, 44);
        counting_step(&mut u, &mut v, &p);
        assert_eq!(v.color, None);
        assert!(v.sync);
    }

    #[test]
    fn boundary_resyncs_or_triggers() {
        let p = params();
        // Caught up: resynchronizes and shifts backups.
        let mut u = core(Some(Color::Black), 51);
        u.sync = false;
        u.phi = p.k;
        u.backup1 = Some(Color::White);
        u.backup2 = None;
        let mut v = core(Some(Color::Black), 48);
        let (au, _) = counting_step(&mut u, &mut v, &p);
        assert!(au.trigger.is_none());
        assert!(u.sync);
        assert_eq!(u.phi, 0);
        assert_eq!(u.backup3, None);
        assert_eq!(u.backup2, Some(Color::White));
        assert_eq!(u.backup1, Some(Color::Black));

        // Still owing: triggers the restart from the pre-shift snapshot,
        // tagged with the finished epoch's index.
        let mut u = core(Some(Color::Black), 51);
        u.sync = false;
        u.phi = 2;
        u.backup1 = Some(Color::Black);
        u.backup2 = Some(Color::White);
        let (au, _) = counting_step(&mut u, &mut v, &p);
        assert_eq!(au.trigger, Some((Some(Color::White), 0)));
    }

    #[test]
    fn synchronized_boundary_shifts_backups() {
        let p = params();
        let mut u = core(Some(Color::Black), 51);
        u.backup1 = Some(Color::White);
        u.backup2 = None;
        let mut v = core(Some(Color::Black), 50);
        let (au, _) = counting_step(&mut u, &mut v, &p);
        assert!(au.trigger.is_none());
        assert_eq!(u.backup3, None);
        assert_eq!(u.backup2, Some(Color::White));
        assert_eq!(u.backup1, Some(Color::Black));
        assert_eq!(u.counter, 52);
    }

    #[test]
    fn restart_seed_follows_trigger_generation() {
        let p = params(); // epoch_len = 52
        let mut u = core(Some(Color::Black), 2 * 52 + 10); // inside epoch 2
        u.backup1 = Some(Color::Black); // start of epoch 2
        u.backup2 = Some(Color::White); // start of epoch 1
        u.backup3 = None; // start of epoch 0
        // Trigger fired at epoch 2's boundary: same epoch → start of 1.
        assert_eq!(restart_seed(&u, 2, &p), Some(Color::White));
        // Trigger at epoch 1's boundary while this node already sits in
        // epoch 2 → its start-of-0 color lives one slot further down.
        assert_eq!(restart_seed(&u, 1, &p), None);
        // A lagging node still in epoch 2 joining an epoch-3 trigger needs
        // start-of-2, its newest snapshot.
        assert_eq!(restart_seed(&u, 3, &p), Some(Color::Black));
    }

    #[test]
    fn pulling_jumps_to_next_epoch_start() {
        let p = params();
        let mut u = core(Some(Color::Black), 45); // catch-up of epoch 0
        let mut v = core(Some(Color::White), 55); // epoch 1
        counting_step(&mut u, &mut v, &p);
        assert_eq!(u.counter, 52);
        assert_eq!(v.counter, 56);
    }

    #[test]
    fn min_increment_advances_smaller_or_initiator() {
        let mut p = params();
        p.strategy = CounterStrategy::MinIncrement;
        let mut u = core(None, 30);
        let mut v = core(None, 20);
        counting_step(&mut u, &mut v, &p);
        assert_eq!((u.counter, v.counter), (30, 21));
        let mut u = core(None, 20);
        let mut v = core(None, 20);
        counting_step(&mut u, &mut v, &p);
        assert_eq!((u.counter, v.counter), (21, 20));
    }

    #[test]
    fn exhaustion_fails_counting() {
        let p = params();
        let mut u = core(None, (p.epochs as u64 + 2) * p.epoch_len() - 1);
        let mut v = core(None, u.counter - 2);
        let (au, _) = counting_step(&mut u, &mut v, &p);
        assert!(au.exhausted);
    }
}
