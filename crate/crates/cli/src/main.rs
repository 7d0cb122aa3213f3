use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hdarray::frontend::{emit_metadata, parse_decls};
use hdarray::runtime::Scheduler;
use hdarray::scenario::{diff_stats, format_stats_lines, format_stats_table, parse_scenario, run_scenario, RunOptions};
use hdarray::Error;

#[derive(Parser)]
#[command(name = "hdarray", version, about = "Simulate coherent distributed arrays across virtual devices")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sched {
    Seq,
    Par,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsFormat {
    Table,
    Lines,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute a scenario file and print communication statistics.
    Run {
        scenario: PathBuf,
        /// Number of simulated processes (overrides the scenario's `procs`).
        #[arg(long)]
        procs: Option<usize>,
        /// Recompute every message plan instead of consulting the plan cache.
        #[arg(long)]
        no_cache: bool,
        /// Check every operation against the brute-force oracle.
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_enum, default_value = "seq")]
        scheduler: Sched,
        /// Write one line per message to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        stats: StatsFormat,
    },
    /// Compare two stats files written with `--stats lines`.
    Diff { a: PathBuf, b: PathBuf },
    /// Parse annotated kernel source and print the metadata file.
    Frontend { source: PathBuf },
}

fn read(path: &Path) -> Result<String, ExitCode> {
    fs::read_to_string(path).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(2)
    })
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Scenario { .. } | Error::Parse(_) | Error::Section(_) | Error::Io(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run(cli: Cli) -> Result<(), ExitCode> {
    match cli.cmd {
        Cmd::Run {
            scenario,
            procs,
            no_cache,
            oracle,
            scheduler,
            trace,
            stats,
        } => {
            let text = read(&scenario)?;
            let sc = parse_scenario(&text).map_err(|e| fail(&e))?;
            let opts = RunOptions {
                procs,
                cache: !no_cache,
                oracle,
                scheduler: match scheduler {
                    Sched::Seq => Scheduler::Sequential,
                    Sched::Par => Scheduler::Parallel,
                },
                record: trace.is_some(),
                check_replicas: false,
            };
            let out = run_scenario(&sc, &opts).map_err(|e| fail(&e))?;
            for line in &out.outputs {
                println!("{line}");
            }
            let st = out.runtime.stats();
            match stats {
                StatsFormat::Table => print!("{}", format_stats_table(&st)),
                StatsFormat::Lines => print!("{}", format_stats_lines(&st)),
            }
            if let Some(path) = trace {
                let mut body = out.runtime.trace_lines().join("\n");
                if !body.is_empty() {
                    body.push('\n');
                }
                fs::write(&path, body).map_err(|e| {
                    eprintln!("error: {}: {e}", path.display());
                    ExitCode::from(1)
                })?;
            }
            if let Some(rep) = out.runtime.oracle_report() {
                println!(
                    "oracle ops={} reads_checked={} read_mismatches={} exactness_failures={} replica_failures={} reduce_mismatches={} races={} {}",
                    rep.ops,
                    rep.reads_checked,
                    rep.read_mismatches,
                    rep.exactness_failures,
                    rep.replica_failures,
                    rep.reduce_mismatches,
                    rep.races,
                    if rep.is_clean() { "clean" } else { "FAILED" }
                );
                for n in &rep.notes {
                    eprintln!("oracle: {n}");
                }
                if !rep.is_clean() {
                    return Err(ExitCode::from(1));
                }
            }
            Ok(())
        }
        Cmd::Diff { a, b } => {
            let (ta, tb) = (read(&a)?, read(&b)?);
            let d = diff_stats(&ta, &tb).map_err(|e| fail(&e))?;
            print!("{d}");
            Ok(())
        }
        Cmd::Frontend { source } => {
            let text = read(&source)?;
            let decls = parse_decls(&text).map_err(|e| fail(&Error::Parse(e)))?;
            print!("{}", emit_metadata(&decls));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}
