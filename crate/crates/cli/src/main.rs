use std::path::PathBuf;
use std::process::ExitCode;

use ampere_cli::runner::with_seed;
use ampere_cli::{emit_report, parse_scenario, render, run, Format, ReportRecord, Status};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "ampere", version, about = "Run transport and Itô-calculus check scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenario files and report every check.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario files, run and reported in the order given.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Also write one report file per scenario here.
    #[arg(long)]
    report_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::TabularText)]
    format: Format,
    /// Run scenarios concurrently; output order is unchanged.
    #[arg(long)]
    parallel: bool,
    /// Use this seed for every scenario.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Add wall-clock times to the report, which then varies between runs.
    #[arg(long)]
    timings: bool,
}

fn main() -> ExitCode {
    let Command::Run(args) = Cli::parse().command;

    let mut scenarios = Vec::new();
    let mut invalid = false;
    for path in &args.files {
        match parse_scenario(path) {
            Ok(s) => scenarios.push(with_seed(&s, args.seed_override)),
            Err(errors) => {
                invalid = true;
                for e in errors {
                    eprintln!("{}: {e}", path.display());
                }
            }
        }
    }
    if invalid {
        return ExitCode::from(2);
    }

    let results: Vec<Vec<ReportRecord>> = if args.parallel {
        scenarios.par_iter().map(run).collect()
    } else {
        scenarios.iter().map(run).collect()
    };

    if let Some(dir) = &args.report_dir {
        for (s, records) in scenarios.iter().zip(&results) {
            if let Err(e) = emit_report(dir, &s.name, records, args.format, args.timings) {
                eprintln!("cannot write report for {} to {}: {e}", s.name, dir.display());
                return ExitCode::from(2);
            }
        }
    }
    let all: Vec<ReportRecord> = results.into_iter().flatten().collect();
    print!("{}", render(&all, args.format, args.timings));

    if all.iter().any(|r| r.status == Status::Fail) {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}
