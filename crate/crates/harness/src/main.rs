use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use psd_harness::ablate::{ablate, MatrixConfig};
use psd_harness::config::RunConfig;
use psd_harness::gradcheck::{gradcheck, Fault, GradcheckOptions};
use psd_harness::report::{report, ReportOptions};
use psd_harness::run::execute;
use psd_harness::sample::{sample, write_samples, SampleOptions, SAMPLES_FILE};
use psd_harness::{exit, exit_code};

#[derive(Parser)]
#[command(name = "psdlab", version, about = "Preference-guided score distillation on analytic mixture models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured output directory.
        #[arg(long, env = "PSDLAB_OUT")]
        out: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every cell and seed of an experiment matrix.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "PSDLAB_OUT")]
        out: Option<PathBuf>,
        /// Worker threads (all cores by default).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5)]
        rel_tol: f64,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Aggregate finished runs into curves, end points and paired statistics.
    Report {
        /// Run directories.
        runs: Vec<PathBuf>,
        /// Baseline run directories, paired by seed.
        #[arg(long, num_args = 1..)]
        against: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Aggregate runs whose model or schedule hashes differ.
        #[arg(long)]
        force: bool,
        /// Moving-average window of the smoothed curves.
        #[arg(long, default_value_t = 10)]
        window: usize,
    },
    /// Draw DDIM samples from the configured model.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, env = "PSDLAB_OUT")]
        out: Option<PathBuf>,
    },
    /// Print the standard task configuration.
    Template {
        #[arg(long, default_value = "standard")]
        run_id: String,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn load_config(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut c = RunConfig::load(path)?;
    if let Some(out) = out {
        c.output_dir = out;
    }
    if let Some(seed) = seed {
        c.distill.seed = seed;
    }
    Ok(c)
}

fn main_inner(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let c = load_config(&config, out, seed)?;
            let s = execute(&c)?;
            println!(
                "{}: {} iterations, reward {:.6} -> {:.6}",
                s.run_dir.display(),
                s.iterations,
                s.initial_reward_target,
                s.final_reward_target
            );
            Ok(exit::OK)
        }
        Command::Ablate { config, out, jobs } => {
            let mut m = MatrixConfig::load(&config)?;
            if let Some(out) = out {
                m.base.output_dir = out;
            }
            let o = ablate(&m, jobs)?;
            for c in &o.cells {
                println!("{}: {} runs, {} failed, mean final reward {:.6}", c.name, c.runs.len(), c.failed, c.mean_final_target());
            }
            for f in &o.failures {
                eprintln!("{} seed {}: {}", f.cell, f.seed, describe(&f.error));
            }
            println!("summary written to {}", o.root.display());
            Ok(match o.failures.first() {
                None => exit::OK,
                Some(f) => exit_code(&f.error),
            })
        }
        Command::Gradcheck { instances, rel_tol, step, seed, inject_fault, json } => {
            anyhow::ensure!(instances > 0, "instances must be positive");
            let mut opts = GradcheckOptions { instances, seed, fault: inject_fault, ..Default::default() };
            opts.spec.rel_tol = rel_tol;
            opts.spec.step = step;
            let r = gradcheck(&opts)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                print!("{}", r.table());
                println!("elapsed {:.2}s", r.elapsed.as_secs_f64());
            }
            Ok(if r.passed() { exit::OK } else { exit::CHECK_FAILED })
        }
        Command::Report { runs, against, out, force, window } => {
            let mut opts = ReportOptions::new(runs, out);
            opts.against = against;
            opts.force = force;
            opts.window = window.max(1);
            let o = report(&opts)?;
            if let Some(c) = &o.curve {
                println!("{} runs, smoothed trend fraction {:.3}", c.runs, c.smoothed_trend);
            }
            if let Some(p) = &o.paired {
                println!(
                    "{} pairs, mean difference {:.6} [{:.6}, {:.6}], wins {}/{}",
                    p.pairs, p.ci.mean, p.ci.lo, p.ci.hi, p.wins, p.pairs
                );
            }
            for p in &o.problems {
                eprintln!("skipped: {p}");
            }
            Ok(if o.problems.is_empty() { exit::OK } else { exit::USAGE })
        }
        Command::Sample { config, count, steps, gamma, out } => {
            let c = load_config(&config, out, None)?;
            let o = sample(&c, &SampleOptions { count, steps, gamma })?;
            let path = c.run_dir().join(SAMPLES_FILE);
            write_samples(&path, &o.samples)?;
            println!("sample mean {:?}", o.sample_mean.as_slice());
            println!("model mean  {:?}", o.model_mean.as_slice());
            println!("samples written to {}", path.display());
            Ok(exit::OK)
        }
        Command::Template { run_id, out } => {
            println!("{}", RunConfig::standard(&run_id, out).to_json());
            Ok(exit::OK)
        }
    }
}

/// The error chain, leaving out causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out += ": ";
            }
            out += &text;
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
