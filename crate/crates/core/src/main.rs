use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sdcsim::analytics::{
    build_report, emit_report, summarize_sweep, sweep_json, sweep_markdown, to_canonical_json, CoverageReport,
    ReportFormat,
};
use sdcsim::config::{load_config, write_effective_config};
use sdcsim::par::Exec;
use sdcsim::selfcheck::{run_selfcheck, DEFAULT_ITERATIONS_PER_FAMILY};
use sdcsim::sim::{run, RunOptions};
use sdcsim::{Error, Result};

/// Overrides `--out` for every verb that writes files.
const OUT_DIR_ENV: &str = "SDCSIM_OUT_DIR";

/// Exit code when the self-check sees the host compute a wrong result.
const EXIT_HOST_ALARM: u8 = 3;

#[derive(Parser)]
#[command(name = "sdcsim", version, about = "Silent data corruption fleet testing simulator")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write the event log, tax ledger and report.
    Run {
        config: PathBuf,
        /// Overrides `global_seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Skip the event log and tax ledger.
        #[arg(long)]
        no_log: bool,
    },
    /// Re-render the report of a finished run.
    Report {
        dir: PathBuf,
        #[arg(long, default_value = "md")]
        format: String,
    },
    /// Replicate a scenario over a seed range, e.g. `1..20` (inclusive).
    Sweep {
        config: PathBuf,
        #[arg(long)]
        seeds: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run every pattern family on this host against its golden references.
    Selfcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_ITERATIONS_PER_FAMILY)]
        iterations_per_family: u64,
    },
}

fn out_dir(flag: PathBuf) -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or(flag)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::validation("seeds", format!("expected `a..b`, got `{s}`"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let a: u64 = a.trim().parse().map_err(|_| bad())?;
    let b: u64 = b.trim().parse().map_err(|_| bad())?;
    if a > b {
        return Err(bad());
    }
    Ok((a..=b).collect())
}

fn write_reports(dir: &Path, report: &CoverageReport) -> Result<()> {
    fs::write(dir.join("report.json"), emit_report(report, ReportFormat::Json)?)?;
    fs::write(dir.join("report.md"), emit_report(report, ReportFormat::Markdown)?)?;
    fs::write(dir.join("report.csv"), emit_report(report, ReportFormat::Csv)?)?;
    Ok(())
}

fn execute(cli: Cli) -> Result<ExitCode> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            no_log,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.global_seed = seed;
            }
            let dir = out_dir(out);
            fs::create_dir_all(&dir)?;
            write_effective_config(&cfg, &dir)?;
            let opts = RunOptions {
                exec,
                record_log: !no_log,
                record_tax: !no_log,
            };
            let output = run(&cfg, opts)?;
            if !no_log {
                output.write_log(&mut BufWriter::new(fs::File::create(dir.join("events.jsonl"))?))?;
                output.write_tax_ledger(&mut BufWriter::new(fs::File::create(dir.join("tax_ledger.jsonl"))?))?;
            }
            if let Some(ab) = &output.ab {
                fs::write(dir.join("ab_report.json"), to_canonical_json(ab)?)?;
            }
            let report = build_report(&output)?;
            write_reports(&dir, &report)?;
            print!("{}", emit_report(&report, ReportFormat::Markdown)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { dir, format } => {
            let format: ReportFormat = format.parse()?;
            let path = dir.join("report.json");
            let text = fs::read_to_string(&path)?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            let report = sdcsim::analytics::report_from_json(&value)?;
            print!("{}", emit_report(&report, format)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, seeds, out } => {
            let base = load_config(&config)?;
            let seeds = parse_seeds(&seeds)?;
            let reports = exec
                .map(seeds, |seed| {
                    let mut cfg = base.clone();
                    cfg.global_seed = seed;
                    run(&cfg, RunOptions { exec, ..RunOptions::lean() }).and_then(|o| build_report(&o))
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let summary = summarize_sweep(&reports);
            let dir = out_dir(out);
            fs::create_dir_all(&dir)?;
            write_effective_config(&base, &dir)?;
            fs::write(dir.join("sweep.json"), sweep_json(&summary, &reports)?)?;
            let md = sweep_markdown(&summary);
            fs::write(dir.join("sweep.md"), &md)?;
            print!("{md}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Selfcheck {
            seed,
            iterations_per_family,
        } => {
            let report = run_selfcheck(seed, iterations_per_family, exec)?;
            print!("{}", to_canonical_json(&report)?);
            if report.passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("host SDC alarm: this machine produced results that disagree with the golden references");
                Ok(ExitCode::from(EXIT_HOST_ALARM))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
