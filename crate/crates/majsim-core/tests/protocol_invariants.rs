//! Cross-protocol invariants: conservation laws, structural state bounds,
//! role accounting, and end-to-end correctness smoke runs at small sizes.

use proptest::prelude::*;

use majsim_core::epoch::{EpochProtocol, EpochState};
use majsim_core::experiment::{run_experiment, ExperimentConfig, ProtocolKind, ALL_PROTOCOLS};
use majsim_core::primitives::{ambassador_init, ambassador_step, AmbassadorState};
use majsim_core::sim::{inputs, majority, run, sample_pair, Color, Protocol, RunConfig};
use majsim_core::three_halves::{Role, Side, ThreeHalvesProtocol, WorkerMode};
use majsim_core::two::{TwoProtocol, TwoState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Every protocol reaches the correct unanimous answer on tiny populations
/// across margins from razor-thin to nearly unanimous.
#[test]
fn all_protocols_correct_at_small_sizes() {
    // (n, black): strict majorities of both colors, margins 1, 2, >n/3, n-2.
    let cases = [(255usize, 128usize), (256, 129), (255, 42), (256, 255)];
    for kind in ALL_PROTOCOLS {
        for (n, black) in cases {
            let mut cfg = ExperimentConfig::new(kind, n, black);
            cfg.trials = 5;
            cfg.base_seed = 1000;
            cfg.observe = false;
            let out = run_experiment(&cfg).expect("valid config");
            assert_eq!(
                out.summary.timed_out, 0,
                "{kind} timed out at n={n} black={black}"
            );
            assert!(
                out.summary.all_correct,
                "{kind} wrong answer at n={n} black={black}: {:?}",
                out.results
            );
        }
    }
}

// The ambassador rules conserve the signed strong-opinion difference and
// never create strength.
proptest! {
    #[test]
    fn ambassador_conserves_strong_difference(
        seed in any::<u64>(),
        n in 2usize..40,
        black in 0usize..40,
    ) {
        let black = black.min(n);
        let mut states: Vec<AmbassadorState> =
            inputs(n, black).into_iter().map(ambassador_init).collect();
        let diff = |ss: &[AmbassadorState]| -> i64 {
            ss.iter()
                .map(|s| match (s.opinion, s.strong) {
                    (Color::Black, true) => 1,
                    (Color::White, true) => -1,
                    _ => 0,
                })
                .sum()
        };
        let d0 = diff(&states);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..500 {
            let (i, j) = sample_pair(&mut rng, n, majsim_core::PairMode::Unordered);
            let strongs_before =
                states.iter().filter(|s| s.strong).count();
            let (a, b) = ambassador_step(states[i], states[j]);
            states[i] = a;
            states[j] = b;
            prop_assert_eq!(diff(&states), d0);
            prop_assert!(states.iter().filter(|s| s.strong).count() <= strongs_before);
        }
    }
}

/// Colored-population dynamics of the phased protocol: one interaction can
/// remove one black and one white (cancellation), add a single copy of an
/// existing color (split or broadcast adoption), or change nothing. An agent
/// announcing Done always holds a color.
#[test]
fn two_protocol_colored_count_transitions() {
    let n = 64;
    let proto = TwoProtocol::new(n, 4.0);
    for seed in 0..8u64 {
        let mut states: Vec<TwoState> = inputs(n, 36)
            .into_iter()
            .map(|c| proto.init_state(c))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let census = |ss: &[TwoState]| -> (i64, i64) {
            let b = ss.iter().filter(|s| s.core.color == Some(Color::Black)).count() as i64;
            let w = ss.iter().filter(|s| s.core.color == Some(Color::White)).count() as i64;
            (b, w)
        };
        for step in 0..200_000 {
            let (pb, pw) = census(&states);
            let any_fail_before = states.iter().any(|s| s.fail);
            let (i, j) = sample_pair(&mut rng, n, proto.pair_mode());
            let (a, b) = proto.transition(states[i], states[j]);
            states[i] = a;
            states[j] = b;
            for s in [&states[i], &states[j]] {
                if s.done.is_some() {
                    assert!(s.core.color.is_some(), "done without a color");
                }
            }
            if !any_fail_before && !states[i].fail && !states[j].fail {
                let (nb, nw) = census(&states);
                let delta = (nb - pb, nw - pw);
                assert!(
                    matches!(delta, (0, 0) | (-1, -1) | (1, 0) | (0, 1)),
                    "seed {seed} step {step}: colored census jumped by {delta:?}"
                );
            }
            if proto.is_stable(&states) {
                break;
            }
        }
    }
}

/// Epoch-protocol structural bounds along a full run: phase counters stay
/// within the owed-value domain and counters respect the schedule horizon.
#[test]
fn epoch_state_bounds_hold_throughout() {
    use majsim_core::epoch::{CounterStrategy, EpochMode};
    for strategy in [CounterStrategy::BothIncrement, CounterStrategy::MinIncrement] {
        let n = 128;
        let a = match strategy {
            CounterStrategy::BothIncrement => 1.0 / 3.0,
            CounterStrategy::MinIncrement => 0.5,
        };
        let proto = EpochProtocol::new(n, a, strategy);
        let k = proto.params.k;
        let horizon = (proto.params.epochs as u64 + 2) * proto.params.epoch_len();
        let mut states: Vec<EpochState> = inputs(n, 70)
            .into_iter()
            .map(|c| proto.init_state(c))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..400_000 {
            let (i, j) = sample_pair(&mut rng, n, proto.pair_mode());
            let (sa, sb) = proto.transition(states[i], states[j]);
            states[i] = sa;
            states[j] = sb;
            for s in [&states[i], &states[j]] {
                if let EpochMode::Counting(core) = &s.mode {
                    assert!(core.phi <= k);
                    assert!(core.counter <= horizon);
                    if s.done.is_some() {
                        assert!(core.color.is_some(), "done without a color");
                    }
                }
            }
            if proto.is_stable(&states) {
                break;
            }
        }
    }
}

/// Role accounting for the worker/clock protocol: clock sides stay exactly
/// balanced, assigned roles never revert to fresh, and main-mode schedule
/// fields stay in range.
#[test]
fn three_halves_role_accounting() {
    let n = 256;
    let proto = ThreeHalvesProtocol::new(n);
    let k = proto.params.k;
    for seed in 0..6u64 {
        let mut states: Vec<_> = inputs(n, 140)
            .into_iter()
            .map(|c| proto.init_state(c))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev_fresh = n;
        for step in 0..4_000_000u64 {
            let (i, j) = sample_pair(&mut rng, n, proto.pair_mode());
            let (a, b) = proto.transition(states[i], states[j]);
            states[i] = a;
            states[j] = b;
            if step % 64 == 0 {
                let mut left = 0usize;
                let mut right = 0usize;
                let mut fresh = 0usize;
                for s in &states {
                    match s.role {
                        Role::Clock(c) => {
                            if c.side == Side::Left {
                                left += 1;
                            } else {
                                right += 1;
                            }
                            assert!(
                                (c.gamma as u64)
                                    <= proto.params.t_warm.max(proto.params.t_epoch()) as u64
                            );
                        }
                        Role::Fresh { .. } => fresh += 1,
                        Role::Worker(WorkerMode::Main(m)) => {
                            assert!(m.slot <= 2 * k as u8);
                            assert!(m.phi <= k);
                        }
                        Role::Worker(_) => {}
                    }
                }
                assert_eq!(left, right, "clock sides diverged at step {step}");
                assert!(fresh <= prev_fresh, "a fresh agent reappeared");
                prev_fresh = fresh;
            }
            if step % 256 == 0 && proto.is_stable(&states) {
                break;
            }
        }
        assert!(proto.is_stable(&states), "seed {seed} did not stabilize");
        let maj = majority(n, 140).unwrap();
        assert!(states.iter().all(|s| proto.output(s) == maj));
    }
}

/// Protocol failures (ambassador arbitration) stay rare at moderate size:
/// the phased machinery itself should almost always finish the job.
#[test]
fn arbitration_is_rare_at_moderate_size() {
    for kind in [ProtocolKind::Two, ProtocolKind::Epoch, ProtocolKind::ThreeHalves] {
        let mut cfg = ExperimentConfig::new(kind, 1023, 512);
        cfg.trials = 100;
        cfg.base_seed = 7_000;
        cfg.observe = false;
        let out = run_experiment(&cfg).expect("valid config");
        assert!(out.summary.all_correct, "{kind}: {:?}", out.summary);
        assert!(
            out.summary.used_ambassador <= 1,
            "{kind} used arbitration in {}/100 trials",
            out.summary.used_ambassador
        );
    }
}

/// The two-protocol run loop is deterministic in (seed, config).
#[test]
fn runs_are_reproducible() {
    let n = 128;
    let proto = TwoProtocol::new(n, 4.0);
    let cfg = RunConfig::new(n, 10_000_000);
    let ins = inputs(n, 70);
    let (o1, s1) = run(&proto, &ins, 99, &cfg);
    let (o2, s2) = run(&proto, &ins, 99, &cfg);
    assert_eq!(o1.interactions, o2.interactions);
    assert_eq!(s1.len(), s2.len());
    for (a, b) in s1.iter().zip(&s2) {
        assert_eq!(proto.encode_abstract(a), proto.encode_abstract(b));
    }
}
