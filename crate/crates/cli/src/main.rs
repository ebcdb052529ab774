//! Command-line front end: run scenarios, verify balance identities, replay
//! stored jump logs and list the shipped corpus.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use qbalance::kernel::TiePolicy;
use qbalance::runner::{emit_plotdata, run_scenario, RunOverrides};
use qbalance::scenario::{resolve_scenario, CORPUS};
use qbalance::state::JumpLogFile;
use qbalance::testfns;

#[derive(Parser)]
#[command(
    name = "qbalance",
    about = "Queue-length balance verification for multiclass queueing networks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// Scenario id from the shipped corpus or a path to a TOML file.
    scenario: String,
    /// Override the simulated time horizon.
    #[arg(long)]
    horizon: Option<f64>,
    /// Stop each replication after this many jump marks.
    #[arg(long)]
    events: Option<u64>,
    /// Override the root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the replication count.
    #[arg(long)]
    replications: Option<usize>,
    /// What to do when an arrival collides with another epoch.
    #[arg(long, value_parser = ["reject", "jitter"])]
    tie_policy: Option<String>,
    /// Worker threads for replications (results do not depend on this).
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Keep only checks whose name contains one of these fragments.
    #[arg(long, value_delimiter = ',')]
    checks: Option<Vec<String>>,
}

impl RunFlags {
    fn overrides(&self) -> RunOverrides {
        RunOverrides {
            horizon: self.horizon,
            seed: self.seed,
            replications: self.replications,
            tie_policy: self.tie_policy.as_deref().map(|p| match p {
                "jitter" => TiePolicy::Jitter,
                _ => TiePolicy::Reject,
            }),
            max_events: self.events,
            threads: self.threads,
            check_filter: self.checks.clone(),
            jump_log_out: None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario, grade its checks and write the report.
    Run {
        #[command(flatten)]
        flags: RunFlags,
        /// Output directory for the report (and plot data).
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write one CSV of grid-point residuals per identity.
        #[arg(long)]
        plot_data: bool,
        /// Also write replication 0's jump log (scenario must set
        /// run.jump_log = full).
        #[arg(long)]
        dump_log: bool,
    },
    /// Simulate a scenario and print the check summary; exit nonzero on any
    /// failing applicable check.
    Verify {
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Re-verify the pathwise identity from a stored jump log.
    Replay {
        /// Path to a jump-log file written by `run`.
        log: PathBuf,
    },
    /// List the shipped scenario corpus.
    ListScenarios,
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(pass) => {
            if pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            flags,
            out,
            plot_data,
            dump_log,
        } => {
            let sc = resolve_scenario(&flags.scenario)?;
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let mut overrides = flags.overrides();
            if dump_log {
                overrides.jump_log_out = Some(out.join(format!("{}.jumplog", sc.id)));
            }
            let report = run_scenario(&sc, &overrides)?;
            let path = out.join(format!("{}.report.json", report.scenario));
            std::fs::write(&path, report.to_json())
                .with_context(|| format!("writing {}", path.display()))?;
            if plot_data {
                let mut files = emit_plotdata(&report, &out)?;
                files.extend(qbalance::runner::emit_estimate_tables(&report, &out)?);
                eprintln!("wrote {} plot files", files.len());
            }
            print!("{}", report.summary());
            println!("report: {}", path.display());
            Ok(report.pass)
        }
        Command::Verify { flags } => {
            let sc = resolve_scenario(&flags.scenario)?;
            let report = run_scenario(&sc, &flags.overrides())?;
            print!("{}", report.summary());
            Ok(report.pass)
        }
        Command::Replay { log } => {
            let file = std::fs::File::open(&log)
                .with_context(|| format!("opening {}", log.display()))?;
            let parsed = JumpLogFile::read_from(std::io::BufReader::new(file))?;
            let fns = testfns::library(parsed.m);
            let accs = qbalance::estimators::replay_transients(&parsed.log, &parsed.x0, &fns)?;
            let x_end = qbalance::estimators::replay_final_state(&parsed.log, &parsed.x0)?;
            let t = if parsed.end_time > 0.0 {
                parsed.end_time
            } else {
                *parsed.log.times.last().unwrap_or(&1.0)
            };
            let mut pass = true;
            println!(
                "replayed {} epochs over {} queues to t = {t}",
                parsed.log.len(),
                parsed.m
            );
            for acc in &accs {
                let r = acc.telescoping_residual(t, &parsed.x0, &x_end);
                let ok = r.abs() <= qbalance::verifier::EXACT_ATOL;
                pass &= ok;
                println!(
                    "{} f={:24} residual={r:.3e}",
                    if ok { "PASS" } else { "FAIL" },
                    acc.f.name()
                );
            }
            Ok(pass)
        }
        Command::ListScenarios => {
            for (id, text) in CORPUS {
                let sc = qbalance::scenario::ScenarioFile::from_toml_str(text)?;
                println!("{id:26} {}", sc.description);
            }
            Ok(true)
        }
    }
}
