mod live;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use chaselev::deque::{Fault, Reclamation};
use chaselev::explorer::{self, Limits, Mutation, Program};
use chaselev::lincheck::render_history;
use chaselev::reclamation::DEFAULT_SCAN_THRESHOLD;
use chaselev::state_oracle::{parse_trace, render_trace, validate_trace, TransitionKind};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use live::LiveConfig;

const PASS: u8 = 0;
const VIOLATION: u8 = 1;
const INPUT_ERROR: u8 = 2;
const LIMIT: u8 = 3;

/// Stress, explore and validate a Chase-Lev work-stealing deque.
///
/// Results go to stdout as one JSON object per line; a human summary goes to
/// stderr. Exit codes: 0 pass, 1 property violation, 2 input error,
/// 3 resource or limit exceeded.
#[derive(Parser)]
#[command(name = "chaselev", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one owner and several stealers on a live deque and check the results.
    Stress(StressArgs),
    /// Explore every interleaving of a small program on the step model.
    Explore(ExploreArgs),
    /// Check a trace file against the deque-state rules.
    Validate { trace: PathBuf },
    /// Measure throughput of owner-only and steal-heavy workloads.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Keepall,
    Hazard,
}

impl From<Mode> for Reclamation {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Keepall => Reclamation::KeepAll,
            Mode::Hazard => Reclamation::HazardPointers,
        }
    }
}

impl From<Mode> for explorer::Mode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Keepall => explorer::Mode::KeepAll,
            Mode::Hazard => explorer::Mode::Hazard,
        }
    }
}

fn mode_name(r: Reclamation) -> &'static str {
    match r {
        Reclamation::KeepAll => "keepall",
        Reclamation::HazardPointers => "hazard",
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    PopReadsTopFirst,
    StealReadsAfterCas,
    PopSkipsCas,
    RetireBeforePublish,
    SkipBottomRestore,
}

impl From<FaultArg> for Fault {
    fn from(f: FaultArg) -> Self {
        match f {
            FaultArg::PopReadsTopFirst => Fault::PopReadsTopFirst,
            FaultArg::StealReadsAfterCas => Fault::StealReadsAfterCas,
            FaultArg::PopSkipsCas => Fault::PopSkipsCas,
            FaultArg::RetireBeforePublish => Fault::RetireBeforePublish,
            FaultArg::SkipBottomRestore => Fault::SkipBottomRestore,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MutationArg {
    PopReadsTopFirst,
    StealReadsAfterCas,
    PopSkipsCas,
    RetireBeforePublish,
}

impl From<MutationArg> for Mutation {
    fn from(m: MutationArg) -> Self {
        match m {
            MutationArg::PopReadsTopFirst => Mutation::PopReadsTopFirst,
            MutationArg::StealReadsAfterCas => Mutation::StealReadsAfterCas,
            MutationArg::PopSkipsCas => Mutation::PopSkipsCas,
            MutationArg::RetireBeforePublish => Mutation::RetireBeforePublish,
        }
    }
}

#[derive(clap::Args)]
struct StressArgs {
    /// Threads including the owner; 1 runs the owner alone.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..=1024))]
    threads: u64,
    /// Values the owner pushes.
    #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(1..))]
    ops: u64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..=1 << 32))]
    capacity: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Keepall)]
    mode: Mode,
    /// Chance that the owner pops after each push.
    #[arg(long, default_value_t = 0.3, value_parser = parse_ratio)]
    pop_ratio: f64,
    /// Retired buffers that trigger a hazard-pointer scan.
    #[arg(long, env = "CHASELEV_SCAN_THRESHOLD", default_value_t = DEFAULT_SCAN_THRESHOLD)]
    scan_threshold: usize,
    /// Run with a seeded bug.
    #[arg(long, value_enum)]
    inject_fault: Option<FaultArg>,
    /// Where the history goes when a check fails.
    #[arg(long, default_value = "stress-history.jsonl")]
    history_out: PathBuf,
    /// Record every shared-memory step and write the trace here. Slow.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(r) if (0.0..=1.0).contains(&r) => Ok(r),
        _ => Err(format!("{s} is not a number between 0 and 1")),
    }
}

#[derive(clap::Args)]
struct ExploreArgs {
    /// Program file: {"threads": {"owner": ["push:1", "pop"], "s1": ["steal"]}, "capacity": 1}.
    program: PathBuf,
    #[arg(long, default_value_t = Limits::default().max_states)]
    max_states: usize,
    #[arg(long, default_value_t = Limits::default().max_depth)]
    max_depth: usize,
    /// Overrides the program's mode.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Overrides the program's mutation.
    #[arg(long, value_enum)]
    mutation: Option<MutationArg>,
    /// Replay one comma-separated schedule of thread names instead of exploring.
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<String>>,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Threads including the owner; 1 runs only the owner-only workload.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..=1024))]
    threads: u64,
    #[arg(long, default_value_t = 1_000_000, value_parser = clap::value_parser!(u64).range(1..))]
    ops: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..=1 << 32))]
    capacity: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Benchmark one mode only; both by default.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, env = "CHASELEV_SCAN_THRESHOLD", default_value_t = DEFAULT_SCAN_THRESHOLD)]
    scan_threshold: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Stress(args) => cmd_stress(args),
        Command::Explore(args) => cmd_explore(args),
        Command::Validate { trace } => cmd_validate(trace),
        Command::Bench(args) => cmd_bench(args),
    };
    ExitCode::from(code)
}

fn input_error(msg: impl std::fmt::Display) -> u8 {
    eprintln!("error: {msg}");
    INPUT_ERROR
}

fn cmd_stress(args: StressArgs) -> u8 {
    let cfg = LiveConfig {
        threads: args.threads as usize,
        pushes: args.ops,
        capacity: args.capacity as usize,
        seed: args.seed,
        reclamation: args.mode.into(),
        scan_threshold: args.scan_threshold,
        pop_ratio: args.pop_ratio,
        fault: args.inject_fault.map(Fault::from),
        record: true,
        trace: args.trace_out.is_some(),
    };
    let mut run = match live::run(&cfg) {
        Ok(run) => run,
        Err(e) => return input_error(e),
    };

    let mut trace_summary = None;
    if let (Some(path), Some(trace)) = (&args.trace_out, &run.trace) {
        let report = validate_trace(trace);
        if let Some(f) = &report.failure {
            run.violations.push(format!("trace state {}: {}", f.index, f.violation));
        }
        match render_trace(trace) {
            Ok(text) => {
                if let Err(e) = fs::write(path, text) {
                    return input_error(format!("{}: {e}", path.display()));
                }
            }
            Err(e) => run.violations.push(format!("trace could not be written: {e}")),
        }
        trace_summary = Some(json!({ "file": path, "states": trace.len(), "valid": report.passed() }));
    }

    let pass = run.violations.is_empty();
    let mut history_file = None;
    if !pass {
        if let Some(h) = &run.history {
            match fs::write(&args.history_out, render_history(h)) {
                Ok(()) => history_file = Some(args.history_out.clone()),
                Err(e) => eprintln!("could not write {}: {e}", args.history_out.display()),
            }
        }
    }
    let line = json!({
        "cmd": "stress",
        "pass": pass,
        "threads": cfg.threads,
        "ops": cfg.pushes,
        "capacity": cfg.capacity,
        "mode": mode_name(cfg.reclamation),
        "seed": cfg.seed,
        "pushes": run.pushes,
        "pops": run.pops + run.drained.len() as u64,
        "steals": run.steals,
        "failed_steals": run.failed_steals,
        "grows": run.stats.grows,
        "reclaimed": run.stats.freed,
        "live_arrays": run.stats.live_arrays,
        "seconds": run.elapsed.as_secs_f64(),
        "violations": run.violations,
        "history_file": history_file,
        "trace": trace_summary,
    });
    println!("{line}");
    eprintln!(
        "stress {}: {} pushes, {} pops, {} steals, {} grows, {} reclaimed, {} live arrays",
        if pass { "passed" } else { "FAILED" },
        run.pushes,
        run.pops + run.drained.len() as u64,
        run.steals,
        run.stats.grows,
        run.stats.freed,
        run.stats.live_arrays,
    );
    for v in &run.violations {
        eprintln!("  {v}");
    }
    if let Some(path) = history_file {
        eprintln!("history written to {}", path.display());
    }
    if pass {
        PASS
    } else {
        VIOLATION
    }
}

fn cmd_explore(args: ExploreArgs) -> u8 {
    let text = match fs::read_to_string(&args.program) {
        Ok(t) => t,
        Err(e) => return input_error(format!("{}: {e}", args.program.display())),
    };
    let mut program = match Program::from_json(&text) {
        Ok(p) => p,
        Err(e) => return input_error(e),
    };
    if let Some(m) = args.mode {
        program.mode = m.into();
    }
    if let Some(m) = args.mutation {
        program.mutation = Some(m.into());
    }
    if let Some(schedule) = args.schedule {
        return replay(&program, &schedule);
    }
    let limits = Limits { max_states: args.max_states, max_depth: args.max_depth };
    let report = explorer::explore(&program, limits);
    let mut line = report.to_json();
    line["cmd"] = json!("explore");
    println!("{line}");
    eprintln!(
        "explored {} interleavings over {} distinct states{}",
        report.interleavings,
        report.distinct_states,
        if report.complete { "" } else { " (incomplete: limit reached)" }
    );
    for (outcome, n) in &report.outcomes {
        eprintln!("  {n:>6}  {outcome}");
    }
    if let Some(c) = &report.counterexample {
        eprintln!("counterexample: {}", c.failure);
        eprintln!("replay with --schedule {}", c.schedule.join(","));
        VIOLATION
    } else if !report.complete {
        LIMIT
    } else {
        PASS
    }
}

fn replay(program: &Program, schedule: &[String]) -> u8 {
    let r = match explorer::replay(program, schedule) {
        Ok(r) => r,
        Err(e) => return input_error(e),
    };
    let failure = r.failure.as_ref().map(|f| f.to_string());
    println!(
        "{}",
        json!({
            "cmd": "replay",
            "steps": schedule.len(),
            "terminal": r.terminal,
            "trace_states": r.trace.len(),
            "failure": failure,
        })
    );
    print!("{}", render_history(&r.history));
    match failure {
        Some(f) => {
            eprintln!("schedule fails: {f}");
            VIOLATION
        }
        None => {
            eprintln!("schedule passes{}", if r.terminal { "" } else { " so far (not every thread finished)" });
            PASS
        }
    }
}

fn cmd_validate(path: PathBuf) -> u8 {
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => return input_error(format!("{}: {e}", path.display())),
    };
    let states = match parse_trace(&text) {
        Ok(s) => s,
        Err(e) => return input_error(e),
    };
    let report = validate_trace(&states);
    let kinds = [
        TransitionKind::WriteArray,
        TransitionKind::Push,
        TransitionKind::Pop,
        TransitionKind::CasTop,
        TransitionKind::Archive,
    ];
    let counts: BTreeMap<&str, usize> = kinds.iter().map(|k| (k.name(), report.count(*k))).collect();
    let failure = report
        .failure
        .as_ref()
        .map(|f| json!({ "index": f.index, "rule": f.violation.rule(), "message": f.violation.to_string() }));
    println!(
        "{}",
        json!({ "cmd": "validate", "pass": report.passed(), "states": states.len(), "transitions": counts, "failure": failure })
    );
    match &report.failure {
        None => {
            eprintln!("trace of {} states is valid", states.len());
            PASS
        }
        Some(f) => {
            eprintln!("state {}: [{}] {}", f.index, f.violation.rule(), f.violation);
            VIOLATION
        }
    }
}

fn cmd_bench(args: BenchArgs) -> u8 {
    let modes: Vec<Reclamation> = match args.mode {
        Some(m) => vec![m.into()],
        None => vec![Reclamation::KeepAll, Reclamation::HazardPointers],
    };
    let mut workloads = vec![("push_pop", 1usize, 0.5)];
    if args.threads > 1 {
        workloads.push(("steal_heavy", args.threads as usize, 0.0));
    }
    for (name, threads, pop_ratio) in workloads {
        for &reclamation in &modes {
            let cfg = LiveConfig {
                threads,
                pushes: args.ops,
                capacity: args.capacity as usize,
                seed: args.seed,
                reclamation,
                scan_threshold: args.scan_threshold,
                pop_ratio,
                fault: None,
                record: false,
                trace: false,
            };
            let run = match live::run(&cfg) {
                Ok(run) => run,
                Err(e) => return input_error(e),
            };
            let ops = run.pushes + run.pops + run.drained.len() as u64 + run.steals;
            let secs = run.elapsed.as_secs_f64();
            let rate = ops as f64 / secs.max(f64::MIN_POSITIVE);
            println!(
                "{}",
                json!({
                    "cmd": "bench",
                    "workload": name,
                    "mode": mode_name(reclamation),
                    "threads": threads,
                    "pushes": run.pushes,
                    "pops": run.pops + run.drained.len() as u64,
                    "steals": run.steals,
                    "seconds": secs,
                    "ops_per_sec": rate,
                })
            );
            eprintln!("{name:<12} {:<8} {threads:>3} threads  {rate:>14.0} ops/s", mode_name(reclamation));
        }
    }
    PASS
}
