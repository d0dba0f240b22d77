//! Validates simulated ambassador stabilization times against an exact
//! absorbing-Markov-chain solution computed independently of the simulator.
//! Both execution paths are checked: the count-level runner with geometric
//! interaction skipping, and the generic per-agent runner.

mod common;

use common::ambassador_expected_detected;
use majsim_core::primitives::{run_ambassador_counts, AmbassadorProtocol};
use majsim_core::sim::{inputs, run, RunConfig};

/// Tiny closed form: at n=2 with one agent per color, the single possible
/// interaction cancels both strongs at t=1, detected at the t=2 checkpoint.
#[test]
fn oracle_matches_hand_computation() {
    assert_eq!(ambassador_expected_detected(2, 1, 2), 2.0);
    // Unanimous input is stable before any interaction happens.
    assert_eq!(ambassador_expected_detected(2, 2, 2), 0.0);
    assert_eq!(ambassador_expected_detected(5, 5, 5), 0.0);
}

/// Checkpoint quantization: a coarser stability cadence can only round the
/// detected time up, and never by more than one period.
#[test]
fn oracle_cadence_quantization_is_monotone() {
    for (n, black) in [(3u32, 2u32), (4, 3), (5, 3)] {
        let fine = ambassador_expected_detected(n, black, 1);
        let cadence = ambassador_expected_detected(n, black, n as u64);
        assert!(cadence >= fine, "rounding up cannot shrink the mean");
        assert!(cadence <= fine + n as f64, "at most one extra period");
    }
}

fn simulated_mean_counts(n: usize, black: usize, seeds: u64) -> f64 {
    let cfg = RunConfig::new(n, 1_000_000);
    let mut total = 0u64;
    for seed in 0..seeds {
        let (outcome, counts) = run_ambassador_counts(n, black, seed, &cfg);
        assert!(!outcome.timed_out);
        assert!(counts.stable());
        total += outcome.interactions;
    }
    total as f64 / seeds as f64
}

/// Count-level runner means match the exact chain within 2% at populations
/// small enough to solve exactly.
#[test]
fn count_runner_mean_matches_exact_chain() {
    const SEEDS: u64 = 20_000;
    for (n, black) in [(3usize, 2usize), (4, 3), (5, 3), (5, 4)] {
        let expected = ambassador_expected_detected(n as u32, black as u32, n as u64);
        let simulated = simulated_mean_counts(n, black, SEEDS);
        let rel = (simulated - expected).abs() / expected;
        assert!(
            rel < 0.02,
            "n={n} black={black}: simulated {simulated:.4} vs exact {expected:.4} ({:.2}%)",
            rel * 100.0
        );
    }
}

/// The per-agent runner is a different execution path (explicit pair draws,
/// no skipping); its mean must agree with the same exact chain.
#[test]
fn agent_runner_mean_matches_exact_chain() {
    const SEEDS: u64 = 20_000;
    for (n, black) in [(3usize, 2usize), (4, 3)] {
        let expected = ambassador_expected_detected(n as u32, black as u32, n as u64);
        let proto = AmbassadorProtocol { n };
        let ins = inputs(n, black);
        let cfg = RunConfig::new(n, 1_000_000);
        let mut total = 0u64;
        for seed in 0..SEEDS {
            let (outcome, _) = run(&proto, &ins, seed, &cfg);
            assert!(!outcome.timed_out);
            total += outcome.interactions;
        }
        let simulated = total as f64 / SEEDS as f64;
        let rel = (simulated - expected).abs() / expected;
        assert!(
            rel < 0.02,
            "n={n} black={black}: simulated {simulated:.4} vs exact {expected:.4} ({:.2}%)",
            rel * 100.0
        );
    }
}

/// The two runners implement one protocol: their outputs agree with the
/// input majority on every seed (correctness of arbitration itself).
#[test]
fn both_runners_always_decide_the_majority() {
    use majsim_core::sim::{majority, Protocol};
    for (n, black) in [(5usize, 3usize), (6, 2), (7, 4)] {
        let maj = majority(n, black).unwrap();
        let cfg = RunConfig::new(n, 1_000_000);
        let proto = AmbassadorProtocol { n };
        let ins = inputs(n, black);
        for seed in 0..2_000u64 {
            let (out_c, counts) = run_ambassador_counts(n, black, seed, &cfg);
            assert!(!out_c.timed_out);
            assert_eq!(counts.output(), maj, "count runner seed {seed}");
            let (out_a, states) = run(&proto, &ins, seed, &cfg);
            assert!(!out_a.timed_out);
            for s in &states {
                assert_eq!(proto.output(s), maj, "agent runner seed {seed}");
            }
        }
    }
}
