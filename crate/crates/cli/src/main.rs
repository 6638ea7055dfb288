//! `cct` — batch command-line front end for the controlled concurrency
//! testing toolkit. All result lines on stdout are machine-parseable
//! `key=value` pairs; see docs/cli.md.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cct_core::algos::{StrategyConfig, StrategyKind};
use cct_core::bench::planted_targets;
use cct_core::fuzz::{fuzz_campaign, CampaignConfig};
use cct_core::model::{
    instantiate_input, parse_call_sequence, parse_program, parse_target_spec, Program,
};
use cct_core::oracles::BugReport;
use cct_core::sched::{replay, run_controlled, Outcome, ReplayError, SchedParams, Trace};
use cct_core::stats::{
    chi_square_uniform, km_csv, km_curve, km_median, logrank, trials_to_bug, TtbObservation,
};
use cct_core::util::derive_seed;

const USAGE_EXIT: u8 = 2;
const DIVERGENCE_EXIT: u8 = 13;

#[derive(Parser)]
#[command(name = "cct", version, about = "Controlled concurrency testing toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute a program once under a scheduling strategy.
    Run {
        /// Program file (.ccp), or a target spec (.cct) with --seq.
        program: PathBuf,
        /// Call sequence file, required when PROGRAM is a .cct target spec.
        #[arg(long)]
        seq: Option<PathBuf>,
        /// Write the trace as JSONL to this path.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Run repeated trials until the first bug; print trials-to-bug.
    Explore {
        program: PathBuf,
        #[arg(long)]
        seq: Option<PathBuf>,
        /// Write per-trial records as CSV (trial,seed,outcome,found).
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Run the two-phase fuzzing campaign against a target spec.
    Fuzz {
        /// Target spec file (.cct).
        spec: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Re-execute a recorded trace and reproduce its outcome.
    Replay {
        program: PathBuf,
        trace: PathBuf,
        #[arg(long)]
        seq: Option<PathBuf>,
    },
    /// Run the planted-bug catalog under every strategy; emit KM CSVs.
    Bench {
        /// Only run the benchmark with this catalog name.
        #[arg(long)]
        name: Option<String>,
        /// Survival-curve repetitions (meta-seeds) per benchmark/strategy.
        #[arg(long, default_value_t = 10)]
        repeats: u64,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Survival statistics over observation/count CSV files.
    Stats {
        #[command(subcommand)]
        test: StatsCmd,
    },
}

#[derive(Subcommand)]
enum StatsCmd {
    /// Kaplan-Meier curve from an observation CSV (value,censored rows).
    Km {
        file: PathBuf,
        /// Output CSV path (default: km_<input-stem>.csv next to the input).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-group log-rank test between two observation CSVs.
    Logrank { a: PathBuf, b: PathBuf },
    /// Chi-square test against a uniform distribution over count rows.
    Chisq { file: PathBuf },
}

/// Shared tuning flags. Every value is optional here; the effective value is
/// resolved as flags > config file > built-in default.
#[derive(Args, Clone, Default)]
struct CommonOpts {
    /// Scheduling strategy: rw|rp|pos|pct|oslike [default: rw]
    #[arg(long)]
    algo: Option<String>,
    /// Strategy RNG seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Meta seed for multi-trial commands [default: 0]
    #[arg(long)]
    meta_seed: Option<u64>,
    /// Bernoulli rate for sampled scheduling points, in [0,1] [default: 0.1]
    #[arg(long)]
    sample_rate: Option<f64>,
    /// Event-unit budget before a forced safe preemption [default: 20]
    #[arg(long)]
    slice: Option<u32>,
    /// PCT depth d (priority change points = d-1), d >= 1 [default: 3]
    #[arg(long)]
    pct_depth: Option<u32>,
    /// Trial cap for explore/bench [default: 100]
    #[arg(long)]
    trials: Option<u64>,
    /// Per-run executed-event cap (livelock verdict beyond) [default: 1000000]
    #[arg(long)]
    max_steps: Option<u64>,
    /// Starvation bound for the fairness override; 0 disables [default: 100000]
    #[arg(long)]
    fairness_bound: Option<u64>,
    /// Consecutive silent steps before a spinner is demoted [default: 64]
    #[arg(long)]
    spin_window: Option<u32>,
    /// Fuzzing worker threads [default: 1]
    #[arg(long)]
    workers: Option<usize>,
    /// Phase-1 (sequential) execution budget [default: 200]
    #[arg(long)]
    phase1_budget: Option<u64>,
    /// Phase-2 (concurrency) execution budget [default: 200]
    #[arg(long)]
    phase2_budget: Option<u64>,
    /// N: max calls duplicated as async per concurrency mutation [default: 2]
    #[arg(long)]
    par_calls: Option<usize>,
    /// Output directory (fuzz artifacts, bench CSVs)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config file with `key = value` lines (same keys as the long flags)
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Fully resolved settings.
struct Settings {
    algo: StrategyKind,
    seed: u64,
    meta_seed: u64,
    sample_rate: f64,
    slice: u32,
    pct_depth: u32,
    trials: u64,
    max_steps: u64,
    fairness_bound: Option<u64>,
    spin_window: u32,
    workers: usize,
    phase1_budget: u64,
    phase2_budget: u64,
    par_calls: usize,
    out: Option<PathBuf>,
}

const CONFIG_KEYS: &[&str] = &[
    "algo",
    "seed",
    "meta-seed",
    "sample-rate",
    "slice",
    "pct-depth",
    "trials",
    "max-steps",
    "fairness-bound",
    "spin-window",
    "workers",
    "phase1-budget",
    "phase2-budget",
    "par-calls",
    "out",
];

fn parse_config_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected `key = value`", path.display(), lineno + 1);
        };
        let key = key.trim().to_string();
        if !CONFIG_KEYS.contains(&key.as_str()) {
            bail!("{}:{}: unknown config key `{}`", path.display(), lineno + 1, key);
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

fn resolve(opts: &CommonOpts) -> Result<Settings> {
    let file = match &opts.config {
        Some(p) => parse_config_file(p)?,
        None => HashMap::new(),
    };
    fn pick<T: Clone + std::str::FromStr>(
        flag: &Option<T>,
        file: &HashMap<String, String>,
        key: &str,
        default: T,
    ) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v.clone());
        }
        match file.get(key) {
            Some(s) => s
                .parse()
                .map_err(|e| anyhow::anyhow!("config key `{}`: {}", key, e)),
            None => Ok(default),
        }
    }

    let algo_str = pick(&opts.algo, &file, "algo", "rw".to_string())?;
    let Some(algo) = StrategyKind::parse(&algo_str) else {
        bail!("unknown strategy `{}` (expected rw|rp|pos|pct|oslike)", algo_str);
    };
    let settings = Settings {
        algo,
        seed: pick(&opts.seed, &file, "seed", 0)?,
        meta_seed: pick(&opts.meta_seed, &file, "meta-seed", 0)?,
        sample_rate: pick(&opts.sample_rate, &file, "sample-rate", 0.1)?,
        slice: pick(&opts.slice, &file, "slice", 20)?,
        pct_depth: pick(&opts.pct_depth, &file, "pct-depth", 3)?,
        trials: pick(&opts.trials, &file, "trials", 100)?,
        max_steps: pick(&opts.max_steps, &file, "max-steps", 1_000_000)?,
        fairness_bound: match pick(&opts.fairness_bound, &file, "fairness-bound", 100_000)? {
            0 => None,
            n => Some(n),
        },
        spin_window: pick(&opts.spin_window, &file, "spin-window", 64)?,
        workers: pick(&opts.workers, &file, "workers", 1)?,
        phase1_budget: pick(&opts.phase1_budget, &file, "phase1-budget", 200)?,
        phase2_budget: pick(&opts.phase2_budget, &file, "phase2-budget", 200)?,
        par_calls: pick(&opts.par_calls, &file, "par-calls", 2)?,
        out: opts
            .out
            .clone()
            .or_else(|| file.get("out").map(PathBuf::from)),
    };
    if !(0.0..=1.0).contains(&settings.sample_rate) {
        bail!("--sample-rate must be in [0,1]");
    }
    if settings.algo == StrategyKind::Pct && settings.pct_depth == 0 {
        bail!("--pct-depth must be >= 1");
    }
    if settings.trials == 0 {
        bail!("--trials must be >= 1");
    }
    if settings.par_calls == 0 {
        bail!("--par-calls must be >= 1");
    }
    if settings.slice == 0 {
        bail!("--slice must be >= 1");
    }
    Ok(settings)
}

impl Settings {
    fn strategy_config(&self) -> StrategyConfig {
        StrategyConfig {
            kind: self.algo,
            pct_depth: self.pct_depth,
            rng_seed: self.seed,
        }
    }

    fn sched_params(&self) -> SchedParams {
        SchedParams {
            sample_rate: self.sample_rate,
            slice_events: self.slice,
            max_steps: self.max_steps,
            fairness_bound: self.fairness_bound,
            spin_window: self.spin_window,
        }
    }
}

/// Loads a .ccp program, or instantiates a .cct spec with a .seq file.
fn load_program(path: &Path, seq: &Option<PathBuf>) -> Result<Program> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "cct") {
        let Some(seq_path) = seq else {
            bail!("{} is a target spec; pass a call sequence with --seq", path.display());
        };
        let spec = parse_target_spec(&text)?;
        let seq_text = fs::read_to_string(seq_path)
            .with_context(|| format!("reading {}", seq_path.display()))?;
        let seq = parse_call_sequence(&seq_text)?;
        Ok(instantiate_input(&spec, &seq)?)
    } else {
        Ok(parse_program(&text)?)
    }
}

fn describe_bug(report: &BugReport) -> String {
    format!("kind={}", report.kind.as_str())
}

fn print_outcome(outcome: &Outcome) {
    match outcome {
        Outcome::Completed { .. } => println!("outcome=completed"),
        Outcome::Bug(report) => println!("outcome=bug {}", describe_bug(report)),
        Outcome::Deadlock(report) => {
            let cycle = report
                .cycle
                .as_ref()
                .map(|c| {
                    c.iter()
                        .map(|t| t.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .unwrap_or_else(|| "none".to_string());
            println!("outcome=deadlock cycle={}", cycle);
        }
        Outcome::Livelock { steps } => println!("outcome=livelock steps={}", steps),
    }
}

fn cmd_run(
    program: &Path,
    seq: &Option<PathBuf>,
    trace_out: &Option<PathBuf>,
    opts: &CommonOpts,
) -> Result<u8> {
    let settings = resolve(opts)?;
    let program = load_program(program, seq)?;
    let (trace, outcome) =
        run_controlled(&program, &settings.strategy_config(), &settings.sched_params());
    if let Some(path) = trace_out {
        fs::write(path, trace.to_jsonl())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "algo={} seed={} events={} decisions={}",
        settings.algo.as_str(),
        settings.seed,
        trace.events().count(),
        trace.decisions().count()
    );
    print_outcome(&outcome);
    Ok(outcome.exit_code() as u8)
}

fn cmd_explore(
    program: &Path,
    seq: &Option<PathBuf>,
    csv: &Option<PathBuf>,
    opts: &CommonOpts,
) -> Result<u8> {
    let settings = resolve(opts)?;
    let program = load_program(program, seq)?;
    let (obs, records) = trials_to_bug(
        &program,
        &settings.strategy_config(),
        &settings.sched_params(),
        settings.trials,
        settings.meta_seed,
    );
    if let Some(path) = csv {
        let mut text = String::from("trial,seed,outcome,found\n");
        for r in &records {
            text.push_str(&format!("{},{},{},{}\n", r.trial, r.seed, r.outcome, r.found));
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    if obs.censored {
        println!("censored={}", obs.value);
    } else {
        println!("trials={}", obs.value);
    }
    Ok(0)
}

fn cmd_fuzz(spec_path: &Path, opts: &CommonOpts) -> Result<u8> {
    let settings = resolve(opts)?;
    let text = fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))?;
    let spec = parse_target_spec(&text)?;
    let cfg = CampaignConfig {
        spec,
        phase1_budget: settings.phase1_budget,
        phase2_budget: settings.phase2_budget,
        par_calls: settings.par_calls,
        strategy: settings.strategy_config(),
        params: settings.sched_params(),
        workers: settings.workers,
        out_dir: settings.out.clone(),
        max_seq_len: 4,
        campaign_seed: settings.seed,
    };
    let report = fuzz_campaign(&cfg)?;
    println!(
        "executions={} phase1={} phase2={} bugs={} coverage={}",
        report.executions,
        report.phase1_executions,
        report.phase2_executions,
        report.bugs.len(),
        report.coverage.len()
    );
    for bug in &report.bugs {
        println!("bug={:04} phase={} kind={}", bug.id, bug.phase, bug.report.kind.as_str());
    }
    Ok(0)
}

fn cmd_replay(program: &Path, trace_path: &Path, seq: &Option<PathBuf>) -> Result<u8> {
    let program = load_program(program, seq)?;
    let text = fs::read_to_string(trace_path)
        .with_context(|| format!("reading {}", trace_path.display()))?;
    let trace = Trace::from_jsonl(&text)?;
    match replay(&program, &trace) {
        Ok(outcome) => {
            print_outcome(&outcome);
            Ok(outcome.exit_code() as u8)
        }
        Err(err) => {
            let detail = match &err {
                ReplayError::HashMismatch { .. } => "hash_mismatch",
                ReplayError::Divergence { .. } => "divergence",
            };
            println!("outcome=divergence detail={}", detail);
            eprintln!("replay failed: {}", err);
            Ok(DIVERGENCE_EXIT)
        }
    }
}

fn cmd_bench(name: &Option<String>, repeats: u64, opts: &CommonOpts) -> Result<u8> {
    let settings = resolve(opts)?;
    let out_dir = settings
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("bench-out"));
    fs::create_dir_all(&out_dir)?;
    let algos = [
        StrategyKind::Rw,
        StrategyKind::Rp,
        StrategyKind::Pos,
        StrategyKind::Pct,
        StrategyKind::OsLike,
    ];
    let mut matched = false;
    for target in planted_targets() {
        if let Some(filter) = name {
            if &target.entry.name != filter {
                continue;
            }
        }
        matched = true;
        for algo in algos {
            let cfg = StrategyConfig {
                kind: algo,
                pct_depth: settings.pct_depth,
                rng_seed: 0,
            };
            let mut obs: Vec<TtbObservation> = Vec::with_capacity(repeats as usize);
            for r in 0..repeats {
                let meta = derive_seed(settings.meta_seed, r);
                let (o, _) = trials_to_bug(
                    &target.program,
                    &cfg,
                    &settings.sched_params(),
                    settings.trials,
                    meta,
                );
                obs.push(o);
            }
            let stem = format!("{}_{}", target.entry.name, algo.as_str());
            let mut raw = String::from("value,censored\n");
            for o in &obs {
                raw.push_str(&format!("{},{}\n", o.value, o.censored as u8));
            }
            fs::write(out_dir.join(format!("ttb_{}.csv", stem)), raw)?;
            let curve = km_curve(&obs);
            fs::write(out_dir.join(format!("km_{}.csv", stem)), km_csv(&curve))?;
            let median = km_median(&curve)
                .map(|m| m.to_string())
                .unwrap_or_else(|| "none".to_string());
            let censored = obs.iter().filter(|o| o.censored).count();
            println!(
                "bench={} algo={} repeats={} median={} censored={}/{}",
                target.entry.name,
                algo.as_str(),
                repeats,
                median,
                censored,
                obs.len()
            );
        }
    }
    if !matched {
        bail!("no benchmark named `{}` in the catalog", name.as_deref().unwrap_or(""));
    }
    println!("out={}", out_dir.display());
    Ok(0)
}

/// Observation CSV: optional `value,censored` header, then `<u64>,<0|1>` rows
/// (`true`/`false` also accepted in the censored column).
fn parse_obs_csv(path: &Path) -> Result<Vec<TtbObservation>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut obs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with("value") {
            continue;
        }
        let mut cols = line.split(',').map(str::trim);
        let (Some(v), Some(c)) = (cols.next(), cols.next()) else {
            bail!("{}:{}: expected `value,censored`", path.display(), lineno + 1);
        };
        let value: u64 = v
            .parse()
            .with_context(|| format!("{}:{}: bad value", path.display(), lineno + 1))?;
        let censored = match c {
            "0" | "false" => false,
            "1" | "true" => true,
            other => bail!("{}:{}: bad censored flag `{}`", path.display(), lineno + 1, other),
        };
        obs.push(TtbObservation { value, censored });
    }
    if obs.is_empty() {
        bail!("{}: no observations", path.display());
    }
    Ok(obs)
}

fn cmd_stats(test: &StatsCmd) -> Result<u8> {
    match test {
        StatsCmd::Km { file, out } => {
            let obs = parse_obs_csv(file)?;
            let curve = km_curve(&obs);
            let out_path = out.clone().unwrap_or_else(|| {
                let stem = file.file_stem().unwrap_or_default().to_string_lossy();
                file.with_file_name(format!("km_{}.csv", stem))
            });
            fs::write(&out_path, km_csv(&curve))
                .with_context(|| format!("writing {}", out_path.display()))?;
            let median = km_median(&curve)
                .map(|m| m.to_string())
                .unwrap_or_else(|| "none".to_string());
            println!("out={} median={}", out_path.display(), median);
        }
        StatsCmd::Logrank { a, b } => {
            let (oa, ob) = (parse_obs_csv(a)?, parse_obs_csv(b)?);
            let r = logrank(&oa, &ob);
            println!("stat={} dof={} p={}", r.statistic, r.dof, r.p_value);
        }
        StatsCmd::Chisq { file } => {
            let text =
                fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
            let counts: Vec<u64> = text
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<u64>().with_context(|| format!("bad count `{}`", s)))
                .collect::<Result<_>>()?;
            if counts.len() < 2 {
                bail!("need at least two counts");
            }
            let r = chi_square_uniform(&counts);
            println!("stat={} dof={} p={}", r.statistic, r.dof, r.p_value);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run { program, seq, trace, opts } => cmd_run(program, seq, trace, opts),
        Cmd::Explore { program, seq, csv, opts } => cmd_explore(program, seq, csv, opts),
        Cmd::Fuzz { spec, opts } => cmd_fuzz(spec, opts),
        Cmd::Replay { program, trace, seq } => cmd_replay(program, trace, seq),
        Cmd::Bench { name, repeats, opts } => cmd_bench(name, *repeats, opts),
        Cmd::Stats { test } => cmd_stats(test),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {:#}", err);
            ExitCode::from(USAGE_EXIT)
        }
    }
}
