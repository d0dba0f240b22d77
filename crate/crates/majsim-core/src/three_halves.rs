//! The O(log n)-state worker/clock majority protocol.
//!
//! Agents self-partition at their first interaction: a first meeting of two
//! fresh agents with opposite colors turns them into a Right-clock (black)
//! and a Left-clock (white) — removing one of each color, so the worker
//! majority equals the global majority. Everyone else becomes a worker.
//!
//! Clocks drive the epoch schedule with a Left-biased min-counter rule:
//! cross-side clock meetings advance the strictly smaller counter (ties go
//! Left), keeping all clocks tightly concentrated. A counter first counts a
//! warm-up window (giving workers time to finish two phases of the phased
//! protocol among themselves, which alone solves lopsided inputs), then
//! cycles through the epoch schedule; each wrap marks a new epoch.
//!
//! Workers never count their own interactions past the warm-up: they read
//! stage positions off gated clocks and run the epoch-structured
//! cancel/split/catch-up machinery against workers at the same position.
//! A worker finishing an epoch still owing splits restarts the phased
//! protocol population-wide from two-epochs-old colors — and the restarted
//! run keeps reading its stages off the clocks, which is what holds the
//! whole state space to O(log n) where the counting variants pay a
//! logarithmic factor more.

use crate::epoch::{val, Slot};
use crate::primitives::{ambassador_init, ambassador_step, AmbassadorState};
use crate::sim::{
    Color, EpochRecord, PairMode, PhaseRecord, Protocol, RoleSnapshot, StateObserver, TrialLog,
    UsageFlags,
};
use crate::two::{
    ceil_log2, classic_step, done_exchange, pack_amb, pack_core, pack_opt_color,
    two_family_stable, StepFlags, TwoCore, TwoParams,
};

#[derive(Clone, Copy, Debug)]
pub struct ThreeHalvesParams {
    /// Phases per epoch, `⌈√log₂n⌉` (the schedule exponent is fixed at 1/2).
    pub k: u32,
    /// Clock ticks per stage, `⌈c_len·√log₂n⌉`.
    pub phase_len: u32,
    /// Clock ticks of catch-up per epoch, `⌈c_catch·log₂n⌉`.
    pub catch_len: u32,
    /// Warm-up tick count: a clock's first cycle runs 0..=t_warm before the
    /// epoch schedule begins, sized so workers finish their two phases.
    pub t_warm: u32,
    /// Parameters for the two-phase worker warm-up.
    pub warmup: TwoParams,
    /// Phase budget for the restarted phased protocol, `⌈log₂n⌉ + 2`; a
    /// restarted worker completing this many cancel/split rounds without a
    /// verdict declares failure.
    pub fallback_cap: u32,
}

// Tick-denominated stage constants. One clock tick costs about eight
// parallel-time units (ticks only accrue on cross-side clock meetings, one
// per meeting, and roughly a quarter of the population ends up as clocks),
// so these are an order of magnitude below the per-interaction stage
// constants of the counting variants.
pub const DEFAULT_TH_C_LEN: f64 = 1.5;
pub const DEFAULT_TH_C_CATCH: f64 = 1.0;
/// Sized so every worker finishes warm-up before any gate opens: the two
/// warm-up phases take ≈ 8·stage_len steps per agent at ≈ 1.5 steps per
/// parallel-time unit, and a tick costs ≈ 8 such units, all measured at the
/// default warm-up stage constant. Workers must then adopt positions within
/// the clocks' first gated cycle, or cancellations could pair values from
/// different epochs.
pub const DEFAULT_TH_C_T: f64 = 36.0;

impl ThreeHalvesParams {
    pub fn new(n: usize) -> ThreeHalvesParams {
        ThreeHalvesParams::with_constants(
            n,
            DEFAULT_TH_C_LEN,
            DEFAULT_TH_C_CATCH,
            DEFAULT_TH_C_T,
            crate::two::DEFAULT_TWO_C_LEN,
        )
    }

    pub fn with_constants(
        n: usize,
        c_len: f64,
        c_catch: f64,
        c_t: f64,
        warmup_c_len: f64,
    ) -> ThreeHalvesParams {
        let log2n = ceil_log2(n) as f64;
        let k = log2n.sqrt().ceil() as u32;
        ThreeHalvesParams {
            k,
            phase_len: (c_len * log2n.sqrt()).ceil() as u32,
            catch_len: (c_catch * log2n).ceil() as u32,
            t_warm: (c_t * log2n).ceil() as u32,
            warmup: TwoParams {
                stage_len: TwoParams::classic(n, warmup_c_len).stage_len,
                phase_cap: 2,
            },
            fallback_cap: ceil_log2(n) + 2,
        }
    }

    /// Clock ticks per epoch cycle.
    pub fn t_epoch(&self) -> u32 {
        self.k * 2 * self.phase_len + self.catch_len
    }
}

/// Schedule position indicated by a gated clock's counter.
pub fn schedule_from_gamma(gamma: u32, p: &ThreeHalvesParams) -> Slot {
    assert!(gamma < p.t_epoch());
    if gamma < p.k * 2 * p.phase_len {
        let phase = gamma / (2 * p.phase_len);
        if gamma % (2 * p.phase_len) < p.phase_len {
            Slot::Cancel(phase)
        } else {
            Slot::Split(phase)
        }
    } else {
        Slot::CatchUp
    }
}

/// The same position as a dense index 0..=2K: 2q cancel, 2q+1 split, 2K
/// catch-up. Worker progress is tracked in these units.
pub fn slot_index_from_gamma(gamma: u32, p: &ThreeHalvesParams) -> u8 {
    match schedule_from_gamma(gamma, p) {
        Slot::Cancel(q) => 2 * q as u8,
        Slot::Split(q) => 2 * q as u8 + 1,
        Slot::CatchUp => 2 * p.k as u8,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClockCore {
    pub side: Side,
    pub gamma: u32,
    /// Set on the first wrap; only gated clocks indicate schedule positions.
    pub gate: bool,
}

impl ClockCore {
    fn new(side: Side) -> ClockCore {
        ClockCore {
            side,
            gamma: 0,
            gate: false,
        }
    }
}

/// One clock counter increment, wrapping at the end of the current cycle
/// (the warm-up window before the first wrap, the epoch schedule after).
fn tick(c: &mut ClockCore, p: &ThreeHalvesParams) {
    let cycle_end = if c.gate {
        p.t_epoch() - 1
    } else {
        p.t_warm
    };
    if c.gamma >= cycle_end {
        c.gamma = 0;
        c.gate = true;
    } else {
        c.gamma += 1;
    }
}

/// Cross-side meeting: the logically-behind counter ticks, ties tick Left.
/// "Behind" must respect the cycle structure, not the raw counter values:
/// an ungated clock is still inside its first cycle, so it is behind any
/// gated one no matter what the counters read; between gated clocks the
/// counters live on a circle of length T_epoch and the behind one is the
/// circular predecessor within half a cycle. Comparing raw values instead
/// would freeze whichever side wraps second at the warm-up boundary.
pub fn clock_tick(u: &mut ClockCore, v: &mut ClockCore, p: &ThreeHalvesParams) {
    if u.side == v.side {
        return;
    }
    let u_ticks = match (u.gate, v.gate) {
        (false, true) => true,
        (true, false) => false,
        (false, false) => match u.gamma.cmp(&v.gamma) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => u.side == Side::Left,
        },
        (true, true) => {
            let t = p.t_epoch();
            let u_lead = (u.gamma + t - v.gamma) % t;
            if u_lead == 0 {
                u.side == Side::Left
            } else {
                u_lead > t / 2
            }
        }
    };
    if u_ticks {
        tick(u, p);
    } else {
        tick(v, p);
    }
}

/// Main-mode worker state: epoch machinery driven by clock readings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MainCore {
    /// Dense schedule position, 0..=2K.
    pub slot: u8,
    /// Epoch count since this worker entered the main dynamics. Runtime
    /// bookkeeping only — it is derivable from the trajectory and is
    /// excluded from the abstract state encoding.
    pub epoch: u32,
    pub color: Option<Color>,
    pub sync: bool,
    pub phi: u32,
    pub split_used: bool,
    pub backup1: Option<Color>,
    pub backup2: Option<Color>,
    /// Start-of-epoch color from two epochs before the current one, kept so
    /// a worker that already crossed past a restart-firing boundary can
    /// still produce the same generation's snapshot as everyone else.
    pub backup3: Option<Color>,
}

/// Restarted phased protocol, driven by the clocks rather than by counting
/// interactions: even slots are cancellation stages, odd slots splitting
/// stages, catch-up a buffer. Keeping the stage position external is what
/// holds the whole protocol's state space to a log factor — a counting
/// restart would reintroduce the phase×step product of the counting
/// variants. Only the phase tally (for the failure cap) grows with n.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FallbackCore {
    /// Dense schedule position, 0..=2K, chased exactly like a main worker's.
    pub slot: u8,
    pub color: Option<Color>,
    pub split_used: bool,
    /// Splitting stages completed since the restart.
    pub phases: u32,
}

impl FallbackCore {
    /// A restarted worker adopting the schedule position `slot`. Joining
    /// mid-splitting-stage starts with the split budget spent: the worker
    /// missed part of the stage, so exiting it without a split must not
    /// count as evidence of saturation (and it may not hand out a value it
    /// could not have received under the stage discipline).
    fn new(color: Option<Color>, slot: u8) -> FallbackCore {
        FallbackCore {
            slot,
            color,
            split_used: slot % 2 == 1,
            phases: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WorkerMode {
    /// Two phases of the phased protocol among workers; clocks are ignored.
    Warmup(TwoCore),
    /// Warm-up finished; waiting to meet a gated clock.
    Wait { color: Option<Color> },
    Main(MainCore),
    /// Restarted phased protocol after a trigger. Carries the index (mod 4)
    /// of the epoch whose boundary fired, so contacted workers can hand over
    /// the snapshot from the matching generation regardless of how far their
    /// own epoch counters have drifted.
    Fallback(FallbackCore, u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Fresh { color: Color },
    Clock(ClockCore),
    Worker(WorkerMode),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ThreeHalvesState {
    pub role: Role,
    pub done: Option<Color>,
    pub fail: bool,
    pub amb: AmbassadorState,
    pub last: Color,
}

impl ThreeHalvesState {
    pub fn visible_color(&self) -> Option<Color> {
        match self.role {
            Role::Fresh { color } => Some(color),
            Role::Clock(_) => None,
            Role::Worker(WorkerMode::Warmup(c)) => c.color,
            Role::Worker(WorkerMode::Wait { color }) => color,
            Role::Worker(WorkerMode::Main(m)) => m.color,
            Role::Worker(WorkerMode::Fallback(f, _)) => f.color,
        }
    }
}

/// First-interaction role assignment. A first cancellation (two fresh
/// agents, opposite colors) mints a clock pair — black Right, white Left —
/// and any other first interaction makes the fresh agent(s) workers with
/// their input colors.
pub fn initial_interaction(u: &mut Role, v: &mut Role) {
    if let (Role::Fresh { color: cu }, Role::Fresh { color: cv }) = (&*u, &*v) {
        if cu != cv {
            let (black, white) = if *cu == Color::Black { (u, v) } else { (v, u) };
            *black = Role::Clock(ClockCore::new(Side::Right));
            *white = Role::Clock(ClockCore::new(Side::Left));
            return;
        }
    }
    for role in [u, v] {
        if let Role::Fresh { color } = *role {
            *role = Role::Worker(WorkerMode::Warmup(TwoCore::new(Some(color))));
        }
    }
}

/// Advance a main-mode worker one schedule slot, firing the splitting-exit
/// check and, on wrapping out of catch-up, the epoch-boundary bookkeeping.
/// Returns the restart seed and the completed epoch's index (mod 4) if the
/// boundary finds the worker still owing.
fn advance_main_one(m: &mut MainCore, p: &ThreeHalvesParams) -> Option<(Option<Color>, u8)> {
    if m.slot % 2 == 1 {
        // Leaving a splitting stage.
        let phase = (m.slot / 2) as u32;
        if m.sync && m.color.is_some() && !m.split_used {
            m.sync = false;
            m.phi = phase;
        }
        m.split_used = false;
    }
    if m.slot == 2 * p.k as u8 {
        // Leaving catch-up: the epoch boundary.
        if !m.sync {
            if m.phi == p.k {
                m.sync = true;
            } else {
                return Some((m.backup2, (m.epoch & 3) as u8));
            }
        }
        m.slot = 0;
        m.epoch += 1;
        m.phi = 0;
        m.split_used = false;
        m.backup3 = m.backup2;
        m.backup2 = m.backup1;
        m.backup1 = m.color;
    } else {
        m.slot += 1;
    }
    None
}

/// Advance a restarted worker one schedule slot: leaving a splitting stage
/// still colored with the split budget intact announces the color as the
/// majority (nobody empty was left to take half), otherwise the budget is
/// renewed and the completed phase counts against the failure cap.
fn advance_fallback_one(f: &mut FallbackCore, p: &ThreeHalvesParams) -> StepFlags {
    let mut flags = StepFlags::default();
    if f.slot % 2 == 1 {
        if f.color.is_some() && !f.split_used {
            flags.done = f.color;
        }
        f.split_used = false;
        f.phases += 1;
        if f.phases >= p.fallback_cap {
            flags.capped = true;
        }
    }
    f.slot = if f.slot == 2 * p.k as u8 { 0 } else { f.slot + 1 };
    flags
}

/// Forward distance from a worker's slot to the clock's, if it is a
/// believable lead: never backward, and not more than K slots — a larger
/// circular distance is indistinguishable from the clock being behind.
fn chase_distance(slot: u8, c_slot: u8, p: &ThreeHalvesParams) -> u8 {
    let slots = 2 * p.k as u8 + 1;
    let forward = (slots + c_slot - slot) % slots;
    if (1..=p.k as u8).contains(&forward) {
        forward
    } else {
        0
    }
}

/// A worker meeting a clock. Waiting workers enter the main dynamics off a
/// gated clock; main and restarted workers chase the clock's position one
/// slot at a time. The clock is never modified. An epoch boundary crossed
/// still owing converts the worker to the restarted protocol in place; any
/// verdict from restarted-slot bookkeeping is returned for the caller to
/// apply to the agent.
pub fn worker_clock_interaction(
    w: &mut WorkerMode,
    c: &ClockCore,
    p: &ThreeHalvesParams,
) -> StepFlags {
    let mut flags = StepFlags::default();
    if !c.gate {
        return flags;
    }
    let c_slot = slot_index_from_gamma(c.gamma, p);
    match w {
        WorkerMode::Warmup(_) => {}
        WorkerMode::Wait { color } => {
            *w = WorkerMode::Main(MainCore {
                slot: c_slot,
                epoch: 0,
                color: *color,
                sync: true,
                phi: 0,
                split_used: false,
                backup1: *color,
                backup2: *color,
                backup3: *color,
            });
        }
        WorkerMode::Main(m) => {
            for _ in 0..chase_distance(m.slot, c_slot, p) {
                if let Some((seed, gen)) = advance_main_one(m, p) {
                    *w = WorkerMode::Fallback(FallbackCore::new(seed, c_slot), gen);
                    break;
                }
            }
        }
        WorkerMode::Fallback(f, _) => {
            for _ in 0..chase_distance(f.slot, c_slot, p) {
                flags = advance_fallback_one(f, p);
                if flags.done.is_some() || flags.capped {
                    break;
                }
            }
        }
    }
    flags
}

/// Solo warm-up counter advance for a warm-up worker whose partner is a
/// worker past warm-up: the interaction counts toward its two phases even
/// though no cancel/split can happen across the mode boundary.
fn warmup_solo_step(core: &mut TwoCore, p: &TwoParams) -> StepFlags {
    let mut flags = StepFlags::default();
    let pre = *core;
    core.step = pre.step + 1;
    if core.step == 4 * p.stage_len {
        core.step = 0;
        core.phase = pre.phase + 1;
    }
    if core.phase == p.phase_cap {
        flags.capped = true;
    }
    if pre.step + 1 == 3 * p.stage_len {
        if !pre.split_used {
            if pre.color.is_some() {
                flags.done = pre.color;
            }
        } else {
            core.split_used = false;
        }
    }
    flags
}

// ---------------------------------------------------------------------------
// Protocol wrapper
// ---------------------------------------------------------------------------

pub struct ThreeHalvesProtocol {
    pub n: usize,
    pub params: ThreeHalvesParams,
}

impl ThreeHalvesProtocol {
    pub fn new(n: usize) -> ThreeHalvesProtocol {
        ThreeHalvesProtocol {
            n,
            params: ThreeHalvesParams::new(n),
        }
    }
}

fn apply_warmup_flags(node: &mut ThreeHalvesState, flags: StepFlags) {
    node.fail |= flags.fail;
    if let Some(c) = flags.done {
        // No split while colored: broadcast the color as the majority.
        node.done = Some(c);
    } else if flags.capped {
        // Both phases finished: wait for a gated clock.
        if let Role::Worker(mode @ WorkerMode::Warmup(_)) = &mut node.role {
            let color = match mode {
                WorkerMode::Warmup(core) => core.color,
                _ => unreachable!(),
            };
            *mode = WorkerMode::Wait { color };
        }
    }
}

/// Seed a worker joining the restart with the snapshot generation the
/// trigger named. A main worker picks the backup slot whose epoch offset
/// matches (mod 4, covering front-runners one epoch past the boundary and
/// stragglers one epoch behind); workers not yet in the main dynamics never
/// split, so their current color is already a faithful input.
fn fallback_seed(mode: &WorkerMode, gen: u8) -> Option<Color> {
    match mode {
        WorkerMode::Main(m) => match (m.epoch as u8).wrapping_sub(gen) & 3 {
            0 => m.backup2,
            3 => m.backup1,
            _ => m.backup3,
        },
        WorkerMode::Wait { color } => *color,
        WorkerMode::Warmup(core) => core.color,
        WorkerMode::Fallback(f, _) => f.color,
    }
}

/// Translate restarted-slot bookkeeping into agent-level verdicts: a missed
/// split announces its color, an expired phase budget defers to the
/// always-correct backstop.
fn apply_fallback_flags(node: &mut ThreeHalvesState, flags: StepFlags) {
    node.fail |= flags.fail;
    if let Some(c) = flags.done {
        node.done = Some(c);
    } else if flags.capped {
        node.fail = true;
    }
}

impl Protocol for ThreeHalvesProtocol {
    type State = ThreeHalvesState;
    type Observer = ThreeHalvesObserver;

    fn pair_mode(&self) -> PairMode {
        PairMode::Unordered
    }

    fn init_state(&self, input: Color) -> ThreeHalvesState {
        ThreeHalvesState {
            role: Role::Fresh { color: input },
            done: None,
            fail: false,
            amb: ambassador_init(input),
            last: input,
        }
    }

    fn transition(
        &self,
        mut u: ThreeHalvesState,
        mut v: ThreeHalvesState,
    ) -> (ThreeHalvesState, ThreeHalvesState) {
        let p = &self.params;
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
        if matches!(u.role, Role::Fresh { .. }) || matches!(v.role, Role::Fresh { .. }) {
            initial_interaction(&mut u.role, &mut v.role);
            return (u, v);
        }

        let u_clock = matches!(u.role, Role::Clock(_));
        let v_clock = matches!(v.role, Role::Clock(_));
        match (u_clock, v_clock) {
            (true, true) => {
                if let (Role::Clock(cu), Role::Clock(cv)) = (&mut u.role, &mut v.role) {
                    clock_tick(cu, cv, p);
                }
            }
            (false, true) | (true, false) => {
                let core = match if v_clock { &v.role } else { &u.role } {
                    Role::Clock(c) => *c,
                    _ => unreachable!(),
                };
                let worker = if v_clock { &mut u } else { &mut v };
                let flags = match &mut worker.role {
                    Role::Worker(w) => worker_clock_interaction(w, &core, p),
                    _ => unreachable!(),
                };
                apply_fallback_flags(worker, flags);
            }
            (false, false) => worker_pair(&mut u, &mut v, p),
        }
        for node in [&mut u, &mut v] {
            if let Some(c) = node.visible_color() {
                node.last = c;
            }
        }
        (u, v)
    }

    fn is_stable(&self, states: &[ThreeHalvesState]) -> bool {
        two_family_stable(states.iter().map(|s| (s.done, s.fail)), || {
            states.iter().map(|s| s.amb)
        })
    }

    fn output(&self, s: &ThreeHalvesState) -> Color {
        if s.fail {
            s.amb.opinion
        } else if let Some(c) = s.done {
            c
        } else {
            s.visible_color().unwrap_or(s.last)
        }
    }

    fn usage(&self, states: &[ThreeHalvesState]) -> UsageFlags {
        UsageFlags {
            used_fallback: states
                .iter()
                .any(|s| matches!(s.role, Role::Worker(WorkerMode::Fallback(..)))),
            used_ambassador: states.iter().any(|s| s.fail),
        }
    }

    fn observer(&self) -> ThreeHalvesObserver {
        ThreeHalvesObserver::new(self.n, self.params)
    }

    fn encode_abstract(&self, s: &ThreeHalvesState) -> u64 {
        let body = match s.role {
            Role::Fresh { color } => pack_opt_color(Some(color)),
            Role::Clock(c) => {
                (1 << 36)
                    | ((c.side == Side::Left) as u64)
                    | ((c.gamma as u64) << 1)
                    | ((c.gate as u64) << 33)
            }
            Role::Worker(WorkerMode::Warmup(core)) => (2 << 36) | pack_core(&core),
            Role::Worker(WorkerMode::Wait { color }) => (3 << 36) | pack_opt_color(color),
            // The epoch count is deliberately omitted: the abstract state is
            // the within-epoch machine.
            Role::Worker(WorkerMode::Main(m)) => {
                (4 << 36)
                    | m.slot as u64
                    | (pack_opt_color(m.color) << 6)
                    | ((m.sync as u64) << 8)
                    | ((m.phi as u64) << 9)
                    | ((m.split_used as u64) << 17)
                    | (pack_opt_color(m.backup1) << 18)
                    | (pack_opt_color(m.backup2) << 20)
                    | (pack_opt_color(m.backup3) << 22)
            }
            Role::Worker(WorkerMode::Fallback(f, gen)) => {
                (5 << 36)
                    | f.slot as u64
                    | (pack_opt_color(f.color) << 6)
                    | ((f.split_used as u64) << 8)
                    | ((f.phases as u64) << 9)
                    | ((gen as u64) << 28)
            }
        };
        body | (pack_opt_color(s.done) << 40) | ((s.fail as u64) << 42) | (pack_amb(&s.amb) << 43)
    }
}

fn apply_done(node: &mut ThreeHalvesState, done: Option<Color>, conflict: bool) {
    if let Some(c) = done {
        if node.done.is_none() {
            match &mut node.role {
                Role::Fresh { color } => *color = c,
                Role::Clock(_) => {}
                Role::Worker(WorkerMode::Warmup(core)) => core.color = Some(c),
                Role::Worker(WorkerMode::Wait { color }) => *color = Some(c),
                Role::Worker(WorkerMode::Main(m)) => m.color = Some(c),
                Role::Worker(WorkerMode::Fallback(f, _)) => f.color = Some(c),
            }
            node.last = c;
        }
        node.done = Some(c);
    }
    node.fail |= conflict;
}

/// Worker-worker interaction dispatch (no fresh, done, or failed agents).
fn worker_pair(u: &mut ThreeHalvesState, v: &mut ThreeHalvesState, p: &ThreeHalvesParams) {
    use WorkerMode::*;
    let u_fb = match u.role {
        Role::Worker(Fallback(f, g)) => Some((f.slot, g)),
        _ => None,
    };
    let v_fb = match v.role {
        Role::Worker(Fallback(f, g)) => Some((f.slot, g)),
        _ => None,
    };

    // Restart contagion: a fallback worker flips its partner on contact. The
    // convert adopts the infector's schedule position; both track the same
    // clocks, so any error is within the chase rule's reach.
    if u_fb.is_some() != v_fb.is_some() {
        let ((slot, gen), target) = if let Some(fb) = u_fb {
            (fb, &mut v.role)
        } else {
            (v_fb.unwrap(), &mut u.role)
        };
        if let Role::Worker(mode) = target {
            let seed = fallback_seed(mode, gen);
            *mode = Fallback(FallbackCore::new(seed, slot), gen);
        }
        return;
    }
    if u_fb.is_some() && v_fb.is_some() {
        if let (Role::Worker(Fallback(fu, _)), Role::Worker(Fallback(fv, _))) =
            (&mut u.role, &mut v.role)
        {
            fallback_pair(fu, fv, p);
        }
        return;
    }

    let u_warm = matches!(u.role, Role::Worker(Warmup(_)));
    let v_warm = matches!(v.role, Role::Worker(Warmup(_)));
    if u_warm && v_warm {
        let (fu, fv) = match (&mut u.role, &mut v.role) {
            (Role::Worker(Warmup(cu)), Role::Worker(Warmup(cv))) => {
                classic_step(cu, cv, &p.warmup)
            }
            _ => unreachable!(),
        };
        apply_warmup_flags(u, fu);
        apply_warmup_flags(v, fv);
        return;
    }
    if u_warm || v_warm {
        // A warm-up worker keeps counting against any worker partner; the
        // partner's own machine is untouched (its schedule is clock-driven).
        let node = if u_warm { u } else { v };
        let flags = match &mut node.role {
            Role::Worker(Warmup(core)) => warmup_solo_step(core, &p.warmup),
            _ => unreachable!(),
        };
        apply_warmup_flags(node, flags);
        return;
    }

    if let (Role::Worker(Main(mu)), Role::Worker(Main(mv))) = (&mut u.role, &mut v.role) {
        main_pair(mu, mv, p);
    }
}

/// Cancel/split/catch-up rules between two main-mode workers. Only pairs at
/// the same schedule position interact; all predicates read the
/// pre-interaction states.
fn main_pair(u: &mut MainCore, v: &mut MainCore, p: &ThreeHalvesParams) {
    let (pu, pv) = (*u, *v);
    if pu.epoch != pv.epoch || pu.slot != pv.slot {
        return;
    }
    if !pu.sync && !pv.sync {
        return;
    }
    if pu.slot == 2 * p.k as u8 {
        // Catch-up: an owing worker passes half its value to an empty
        // synchronized one.
        if !pu.sync && pu.phi < p.k && pv.sync && pv.color.is_none() {
            u.phi = pu.phi + 1;
            v.color = pu.color;
            v.phi = pu.phi + 1;
            v.sync = false;
        } else if !pv.sync && pv.phi < p.k && pu.sync && pu.color.is_none() {
            v.phi = pv.phi + 1;
            u.color = pv.color;
            u.phi = pv.phi + 1;
            u.sync = false;
        }
        return;
    }
    if !pu.sync || !pv.sync {
        return;
    }
    if pu.slot % 2 == 0 {
        // Cancellation.
        if matches!(
            (pu.color, pv.color),
            (Some(Color::Black), Some(Color::White)) | (Some(Color::White), Some(Color::Black))
        ) {
            u.color = None;
            v.color = None;
        }
    } else {
        // Splitting.
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
}

/// Cancel/split rules between two restarted workers, read off their slots
/// like the main dynamics but without the owed-split machinery: a restart
/// cleared all values to ±1, so catch-up stages are plain buffers.
fn fallback_pair(u: &mut FallbackCore, v: &mut FallbackCore, p: &ThreeHalvesParams) {
    let (pu, pv) = (*u, *v);
    if pu.slot != pv.slot || pu.slot == 2 * p.k as u8 {
        return;
    }
    if pu.slot % 2 == 0 {
        if matches!(
            (pu.color, pv.color),
            (Some(Color::Black), Some(Color::White)) | (Some(Color::White), Some(Color::Black))
        ) {
            u.color = None;
            v.color = None;
        }
    } else if pu.color.is_none() && pv.color.is_some() && !pv.split_used {
        u.color = pv.color;
        u.split_used = true;
        v.split_used = true;
    } else if pu.color.is_some() && pv.color.is_none() && !pu.split_used {
        v.color = pu.color;
        v.split_used = true;
        u.split_used = true;
    }
}

// ---------------------------------------------------------------------------
// Observer: roles, clock concentration, main-dynamics phase metrics
// ---------------------------------------------------------------------------

/// Tracks role composition, unwrapped clock spread, and the main dynamics'
/// per-phase records (worker-relative quorums and denominators).
pub struct ThreeHalvesObserver {
    n: usize,
    params: ThreeHalvesParams,
    next_rank: u32,
    majority: Option<Color>,
    max_out_of_sync: u32,
    clock_gap_max: Option<f64>,
    /// Per-agent (last gamma, wrap count) for unwrapped concentration.
    wraps: Vec<Option<(u32, u32)>>,
}

impl ThreeHalvesObserver {
    fn new(n: usize, params: ThreeHalvesParams) -> ThreeHalvesObserver {
        ThreeHalvesObserver {
            n,
            params,
            next_rank: 0,
            majority: None,
            max_out_of_sync: 0,
            clock_gap_max: None,
            wraps: vec![None; n],
        }
    }

    fn rank_of(&self, s: &ThreeHalvesState) -> Option<u32> {
        // Ranks order main-dynamics progress; finished/failed/restarted
        // agents count as past everything, pre-main workers as before
        // everything, and clocks do not participate.
        if s.done.is_some() || s.fail {
            return Some(u32::MAX);
        }
        match s.role {
            Role::Clock(_) => None,
            Role::Fresh { .. } => Some(0),
            Role::Worker(WorkerMode::Warmup(_)) | Role::Worker(WorkerMode::Wait { .. }) => Some(0),
            Role::Worker(WorkerMode::Fallback(..)) => Some(u32::MAX),
            Role::Worker(WorkerMode::Main(m)) => {
                Some(m.epoch * (2 * self.params.k + 1) + m.slot as u32)
            }
        }
    }

    fn update_clock_gap(&mut self, states: &[ThreeHalvesState], log: &mut TrialLog) {
        let mut fresh = 0usize;
        for s in states {
            if matches!(s.role, Role::Fresh { .. }) {
                fresh += 1;
            }
        }
        let mut unwrapped: Vec<f64> = Vec::new();
        for (i, s) in states.iter().enumerate() {
            if let Role::Clock(c) = s.role {
                let entry = self.wraps[i].get_or_insert((c.gamma, 0));
                if c.gamma < entry.0 {
                    entry.1 += 1;
                }
                *entry = (c.gamma, entry.1);
                let (gamma, wraps) = *entry;
                let total = if wraps == 0 {
                    gamma as f64
                } else {
                    (self.params.t_warm + 1) as f64
                        + (wraps - 1) as f64 * self.params.t_epoch() as f64
                        + gamma as f64
                };
                unwrapped.push(total);
            }
        }
        // Spread is only meaningful once the clock population is complete.
        if fresh == 0 && unwrapped.len() >= 2 {
            let mean = unwrapped.iter().sum::<f64>() / unwrapped.len() as f64;
            let max = unwrapped.iter().cloned().fold(f64::MIN, f64::max);
            let gap = max - mean;
            log.clock_gap_max = Some(log.clock_gap_max.unwrap_or(f64::MIN).max(gap));
            self.clock_gap_max = log.clock_gap_max;
        }
    }
}

impl StateObserver<ThreeHalvesState> for ThreeHalvesObserver {
    fn checkpoint(&mut self, states: &[ThreeHalvesState], interactions: u64, log: &mut TrialLog) {
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

        self.update_clock_gap(states, log);

        // Off-cadence checkpoints are the explicitly requested probe points:
        // record the role composition there (and nowhere else, to keep logs
        // small).
        if interactions % self.n as u64 != 0 {
            log.roles.push(role_snapshot(states, interactions));
        }

        let oos_now = states
            .iter()
            .filter(
                |s| matches!(s.role, Role::Worker(WorkerMode::Main(m)) if !m.sync),
            )
            .count() as u32;
        self.max_out_of_sync = self.max_out_of_sync.max(oos_now);

        let k = self.params.k;
        let per_epoch = 2 * k + 1;
        // Workers cycle epochs until a trigger; keep a generous recording
        // horizon so the log stays bounded.
        let rank_cap = (2 * ceil_log2(self.n.max(2)) + 4) * per_epoch;
        while self.next_rank < rank_cap {
            let mut workers = 0usize;
            let mut reached = 0usize;
            let mut mains = 0usize;
            let mut main_empty = 0usize;
            let mut maj_count = 0i64;
            let mut min_count = 0i64;
            for s in states {
                let rank = match self.rank_of(s) {
                    Some(r) => r,
                    None => continue, // clock
                };
                workers += 1;
                if rank >= self.next_rank {
                    reached += 1;
                }
                if let Role::Worker(WorkerMode::Main(m)) = s.role {
                    mains += 1;
                    if m.color.is_none() {
                        main_empty += 1;
                    }
                }
                match s.visible_color() {
                    Some(c) if c == maj => maj_count += 1,
                    Some(_) => min_count += 1,
                    None => {}
                }
            }
            if workers == 0 || reached < (0.9 * workers as f64).ceil() as usize {
                return;
            }
            let epoch = self.next_rank / per_epoch;
            let idx = self.next_rank % per_epoch;
            let newly_oos = |phase: u32| -> u32 {
                states
                    .iter()
                    .filter(|s| {
                        matches!(s.role, Role::Worker(WorkerMode::Main(m))
                            if !m.sync && m.phi == phase && m.epoch == epoch)
                    })
                    .count() as u32
            };

            if idx < 2 * k && idx % 2 == 0 {
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
                let q = idx / 2;
                if let Some(rec) = log
                    .phases
                    .iter_mut()
                    .find(|r| r.phase_index == epoch * k + q)
                {
                    rec.empty_fraction_after_cancel =
                        Some(main_empty as f64 / mains.max(1) as f64);
                }
            } else {
                if let Some(rec) = log
                    .phases
                    .iter_mut()
                    .find(|r| r.phase_index == epoch * k + k - 1)
                {
                    rec.out_of_sync_count = newly_oos(k - 1);
                }
                let owed: u64 = states
                    .iter()
                    .filter_map(|s| match s.role {
                        Role::Worker(WorkerMode::Main(m)) if !m.sync => Some(val(m.phi, k)),
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
                let residue = states
                    .iter()
                    .filter(|s| match s.role {
                        Role::Worker(WorkerMode::Main(m)) => !m.sync && m.phi < k,
                        Role::Worker(WorkerMode::Fallback(..)) => true,
                        _ => false,
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

    fn finish(&mut self, states: &[ThreeHalvesState], interactions: u64, log: &mut TrialLog) {
        log.roles.push(role_snapshot(states, interactions));
        log.max_out_of_sync = Some(self.max_out_of_sync);
    }
}

fn role_snapshot(states: &[ThreeHalvesState], interactions: u64) -> RoleSnapshot {
    let mut snap = RoleSnapshot {
        interactions,
        left_clocks: 0,
        right_clocks: 0,
        workers: 0,
        unassigned: 0,
    };
    for s in states {
        match s.role {
            Role::Fresh { .. } => snap.unassigned += 1,
            Role::Clock(c) => {
                if c.side == Side::Left {
                    snap.left_clocks += 1;
                } else {
                    snap.right_clocks += 1;
                }
            }
            Role::Worker(_) => snap.workers += 1,
        }
    }
    snap
}
