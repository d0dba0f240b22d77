//! `majsim` — seeded experiment harness for the majority protocols.
//!
//! Subcommands: `run` (trial batches of one protocol, CSV/JSON rows plus a
//! summary), `bins` (the balls-into-bins allocation process, per-trial batch
//! statistics), and `census` (distinct abstract states over a doubling range
//! of population sizes).
//!
//! Every value flag can instead come from a `--config` file of `key=value`
//! lines; explicit flags win. `MAJSIM_THREADS` caps trial concurrency.
//!
//! Exit codes: 0 — every trial stabilized on the correct answer; 1 — some
//! trial was incorrect or timed out; 2 — usage, config, or I/O error.

use std::collections::BTreeMap;
use std::env;
use std::fmt::Display;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use majsim_core::bins::{
    check_invariant1, BinsState, DEFAULT_INV1_C1, DEFAULT_INV1_C2, DEFAULT_INV1_SLACK,
};
use majsim_core::census::CensusPoint;
use majsim_core::experiment::{
    census_for, run_experiment, write_csv, write_json, write_phase_log, Constants,
    ExperimentConfig, ProtocolKind,
};

#[derive(Parser)]
#[command(name = "majsim", version, about = "Exact-majority population-protocol simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run seeded trials of one protocol and write per-trial result rows.
    Run(RunArgs),
    /// Run the two-choice balls-into-bins process and check hole ceilings.
    Bins(BinsArgs),
    /// Count distinct abstract states over a doubling range of sizes.
    Census(CensusArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file of key=value lines; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Protocol: ambassador | two | epoch | epoch-min | three-halves.
    #[arg(long, value_parser = parse_protocol)]
    protocol: Option<ProtocolKind>,
    /// Population size.
    #[arg(long)]
    n: Option<usize>,
    /// Agents initially holding the black opinion (strict majority or
    /// strict minority; ties are rejected).
    #[arg(long)]
    black: Option<usize>,
    /// Number of independent trials.
    #[arg(long)]
    trials: Option<u64>,
    /// Base seed; trial i runs with seed + i.
    #[arg(long)]
    seed: Option<u64>,
    /// Schedule exponent for the epoch protocols.
    #[arg(long)]
    a: Option<f64>,
    /// Stage-length constant override.
    #[arg(long)]
    c_len: Option<f64>,
    /// Catch-up window constant override.
    #[arg(long)]
    c_catch: Option<f64>,
    /// Clock warm-up constant override.
    #[arg(long)]
    c_t: Option<f64>,
    /// Interaction cap in parallel-time units (default: generous
    /// per-protocol budget).
    #[arg(long)]
    max_parallel_time: Option<f64>,
    /// Skip per-phase observation (faster; use for timing runs).
    #[arg(long)]
    no_observe: bool,
    /// Result rows go here; a `.json` extension selects JSON, else CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-trial phase logs as JSON lines.
    #[arg(long)]
    phase_log: Option<PathBuf>,
}

#[derive(Args)]
struct BinsArgs {
    /// Config file of key=value lines; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of bins; each batch throws one ball per bin.
    #[arg(long)]
    n: Option<usize>,
    /// Batches per trial.
    #[arg(long)]
    batches: Option<u64>,
    /// Allocation rule.
    #[arg(long, value_enum)]
    strategy: Option<BinsStrategy>,
    /// Number of independent trials.
    #[arg(long)]
    trials: Option<u64>,
    /// Base seed; trial i runs with seed + i.
    #[arg(long)]
    seed: Option<u64>,
    /// Relative slack on the hole-fraction ceiling.
    #[arg(long)]
    slack: Option<f64>,
    /// CSV output path; omitted means stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CensusArgs {
    /// Config file of key=value lines; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Protocol: ambassador | two | epoch | epoch-min | three-halves.
    #[arg(long, value_parser = parse_protocol)]
    protocol: Option<ProtocolKind>,
    /// Smallest population size.
    #[arg(long)]
    n_min: Option<usize>,
    /// Largest population size; sizes double from n-min up to this.
    #[arg(long)]
    n_max: Option<usize>,
    /// Trials pooled into each census count.
    #[arg(long)]
    trials: Option<u64>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Schedule exponent for the epoch protocols.
    #[arg(long)]
    a: Option<f64>,
    /// Stage-length constant override.
    #[arg(long)]
    c_len: Option<f64>,
    /// Catch-up window constant override.
    #[arg(long)]
    c_catch: Option<f64>,
    /// Clock warm-up constant override.
    #[arg(long)]
    c_t: Option<f64>,
    /// CSV output path; omitted means stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BinsStrategy {
    /// Two uniform choices, place in the emptier bin, ties to the left.
    Left,
    /// One uniform choice (baseline).
    OneChoice,
}

impl BinsStrategy {
    fn label(self) -> &'static str {
        match self {
            BinsStrategy::Left => "left",
            BinsStrategy::OneChoice => "one-choice",
        }
    }
}

impl FromStr for BinsStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "left" => Ok(BinsStrategy::Left),
            "one-choice" => Ok(BinsStrategy::OneChoice),
            _ => Err(format!("unknown strategy `{s}` (expected left | one-choice)")),
        }
    }
}

fn parse_protocol(s: &str) -> Result<ProtocolKind, String> {
    ProtocolKind::from_str(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, String> {
    init_threads()?;
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Bins(args) => cmd_bins(args),
        Command::Census(args) => cmd_census(args),
    }
}

/// Applies `MAJSIM_THREADS` to the global worker pool before any trial runs.
fn init_threads() -> Result<(), String> {
    if let Ok(v) = env::var("MAJSIM_THREADS") {
        let threads: usize = v
            .trim()
            .parse()
            .map_err(|_| format!("MAJSIM_THREADS must be a positive integer, got `{v}`"))?;
        if threads == 0 {
            return Err("MAJSIM_THREADS must be positive".into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Config-file merging
// ---------------------------------------------------------------------------

/// Reads `key=value` lines (`#` comments, blank lines ignored). Keys are
/// normalized to the flag spelling, so `c_len` and `c-len` both work.
fn load_config(path: Option<&Path>) -> Result<BTreeMap<String, String>, String> {
    let Some(path) = path else {
        return Ok(BTreeMap::new());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            format!("{}:{}: expected key=value, got `{line}`", path.display(), idx + 1)
        })?;
        map.insert(key.trim().replace('_', "-"), value.trim().to_string());
    }
    Ok(map)
}

/// Removes and parses one config key; absent keys are `None`.
fn take<T: FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>, String>
where
    T::Err: Display,
{
    match map.remove(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|e| format!("config key `{key}`: {e}")),
    }
}

fn reject_unknown(map: &BTreeMap<String, String>) -> Result<(), String> {
    match map.keys().next() {
        None => Ok(()),
        Some(key) => Err(format!("unknown config key `{key}`")),
    }
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T, String> {
    value.ok_or_else(|| format!("missing required value `{flag}` (flag or config key)"))
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn cmd_run(args: RunArgs) -> Result<ExitCode, String> {
    let mut file = load_config(args.config.as_deref())?;
    let protocol = require(args.protocol.or(take(&mut file, "protocol")?), "--protocol")?;
    let n = require(args.n.or(take(&mut file, "n")?), "--n")?;
    let black = require(args.black.or(take(&mut file, "black")?), "--black")?;
    let mut cfg = ExperimentConfig::new(protocol, n, black);
    cfg.trials = args.trials.or(take(&mut file, "trials")?).unwrap_or(1);
    cfg.base_seed = args.seed.or(take(&mut file, "seed")?).unwrap_or(0);
    cfg.a = args.a.or(take(&mut file, "a")?);
    cfg.constants = Constants {
        c_len: args.c_len.or(take(&mut file, "c-len")?),
        c_catch: args.c_catch.or(take(&mut file, "c-catch")?),
        c_t: args.c_t.or(take(&mut file, "c-t")?),
        slack: None,
    };
    cfg.max_parallel_time = args
        .max_parallel_time
        .or(take(&mut file, "max-parallel-time")?);
    cfg.observe = !args.no_observe && take(&mut file, "observe")?.unwrap_or(true);
    let out: Option<PathBuf> = args.out.or(take(&mut file, "out")?);
    let phase_log: Option<PathBuf> = args.phase_log.or(take(&mut file, "phase-log")?);
    reject_unknown(&file)?;

    let output = run_experiment(&cfg).map_err(|e| e.to_string())?;
    if let Some(path) = &out {
        if path.extension().is_some_and(|e| e == "json") {
            write_json(&output.results, &output.summary, path)
        } else {
            write_csv(&output.results, path)
        }
        .map_err(|e| e.to_string())?;
    }
    if let Some(path) = &phase_log {
        write_phase_log(&output.results, &output.logs, path).map_err(|e| e.to_string())?;
    }

    let s = &output.summary;
    println!(
        "{protocol} n={n} black={black}: {}/{} correct, {} incorrect, {} timed out",
        s.correct, s.trials, s.incorrect, s.timed_out
    );
    println!(
        "fallback {}  ambassador {}  parallel time median {:.2} mean {:.2}",
        s.used_fallback, s.used_ambassador, s.median_parallel_time, s.mean_parallel_time
    );
    for path in out.iter().chain(phase_log.iter()) {
        println!("wrote {}", path.display());
    }
    Ok(if s.all_correct && s.timed_out == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

// ---------------------------------------------------------------------------
// bins
// ---------------------------------------------------------------------------

/// One trial of the allocation process. Column order is stable.
#[derive(Serialize)]
struct BinsRow {
    strategy: &'static str,
    n: usize,
    batches: u64,
    seed: u64,
    max_gap: i64,
    max_hole_depth: u32,
    alpha_violations: usize,
}

fn cmd_bins(args: BinsArgs) -> Result<ExitCode, String> {
    let mut file = load_config(args.config.as_deref())?;
    let n = require(args.n.or(take(&mut file, "n")?), "--n")?;
    let batches = args.batches.or(take(&mut file, "batches")?).unwrap_or(1);
    let strategy = args
        .strategy
        .or(take(&mut file, "strategy")?)
        .unwrap_or(BinsStrategy::Left);
    let trials = args.trials.or(take(&mut file, "trials")?).unwrap_or(1);
    let seed = args.seed.or(take(&mut file, "seed")?).unwrap_or(0);
    let slack = args
        .slack
        .or(take(&mut file, "slack")?)
        .unwrap_or(DEFAULT_INV1_SLACK);
    let out: Option<PathBuf> = args.out.or(take(&mut file, "out")?);
    reject_unknown(&file)?;
    if n < 2 {
        return Err(format!("need at least 2 bins, got {n}"));
    }
    if batches == 0 || trials == 0 {
        return Err("batches and trials must be positive".into());
    }

    let rows: Vec<BinsRow> = (0..trials)
        .into_par_iter()
        .map(|i| bins_trial(n, batches, strategy, seed + i, slack))
        .collect();
    write_bins_rows(&rows, out.as_deref()).map_err(|e| e.to_string())?;
    if let Some(path) = &out {
        let worst = rows.iter().map(|r| r.max_gap).max().unwrap_or(0);
        let violations: usize = rows.iter().map(|r| r.alpha_violations).sum();
        println!(
            "{} n={n} batches={batches}: {trials} trials, max gap {worst}, {violations} ceiling violations",
            strategy.label()
        );
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn bins_trial(n: usize, batches: u64, strategy: BinsStrategy, seed: u64, slack: f64) -> BinsRow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bins = BinsState::new(n);
    let mut max_hole_depth = 0;
    let mut alpha_violations = 0;
    for _ in 0..batches {
        for _ in 0..n {
            match strategy {
                BinsStrategy::Left => bins.allocate_ball_left(&mut rng),
                BinsStrategy::OneChoice => bins.allocate_ball_onechoice(&mut rng),
            }
        }
        let profile = bins.holes_profile();
        max_hole_depth = max_hole_depth.max(profile.max_holes);
        alpha_violations +=
            check_invariant1(&profile, n, slack, DEFAULT_INV1_C1, DEFAULT_INV1_C2).len();
    }
    BinsRow {
        strategy: strategy.label(),
        n,
        batches,
        seed,
        max_gap: bins.max_gap(),
        max_hole_depth,
        alpha_violations,
    }
}

fn write_bins_rows(rows: &[BinsRow], out: Option<&Path>) -> Result<(), csv::Error> {
    match out {
        Some(path) => {
            let mut w = csv::Writer::from_path(path)?;
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
            Ok(())
        }
        None => {
            let mut w = csv::Writer::from_writer(io::stdout());
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// census
// ---------------------------------------------------------------------------

fn cmd_census(args: CensusArgs) -> Result<ExitCode, String> {
    let mut file = load_config(args.config.as_deref())?;
    let protocol = require(args.protocol.or(take(&mut file, "protocol")?), "--protocol")?;
    let n_min = require(args.n_min.or(take(&mut file, "n-min")?), "--n-min")?;
    let n_max = args.n_max.or(take(&mut file, "n-max")?).unwrap_or(n_min);
    let trials = args.trials.or(take(&mut file, "trials")?).unwrap_or(2);
    let seed = args.seed.or(take(&mut file, "seed")?).unwrap_or(0);
    let a = args.a.or(take(&mut file, "a")?);
    let constants = Constants {
        c_len: args.c_len.or(take(&mut file, "c-len")?),
        c_catch: args.c_catch.or(take(&mut file, "c-catch")?),
        c_t: args.c_t.or(take(&mut file, "c-t")?),
        slack: None,
    };
    let out: Option<PathBuf> = args.out.or(take(&mut file, "out")?);
    reject_unknown(&file)?;
    if n_min < 2 || n_min > n_max {
        return Err(format!("need 2 <= n-min <= n-max, got {n_min}..{n_max}"));
    }

    let mut sizes = Vec::new();
    let mut n = n_min;
    while n <= n_max {
        sizes.push(n);
        match n.checked_mul(2) {
            Some(next) => n = next,
            None => break,
        }
    }
    let points: Vec<CensusPoint> = sizes
        .par_iter()
        .map(|&n| {
            let mut cfg = ExperimentConfig::new(protocol, n, n / 2 + 1);
            cfg.trials = trials;
            cfg.base_seed = seed;
            cfg.a = a;
            cfg.constants = constants;
            cfg.observe = false;
            census_for(&cfg).map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;

    let mut text = String::from("protocol,n,distinct_abstract_states\n");
    for p in &points {
        text += &format!("{},{},{}\n", p.protocol, p.n, p.distinct_abstract_states);
    }
    match &out {
        Some(path) => {
            fs::write(path, &text).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}
