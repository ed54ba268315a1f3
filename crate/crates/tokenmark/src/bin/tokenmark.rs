//! Thin command-line front end over the harness library.
//!
//! Exit codes: 0 success, 1 assertion/tolerance failure, 2 usage/config
//! error. All state flows through flags and the config file; see the
//! `examples/` directory for library-level walkthroughs of each capability.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tokenmark::attacks::AttackConfig;
use tokenmark::harness::{self, ExperimentConfig, HarnessError, Scheme};

#[derive(Parser)]
#[command(name = "tokenmark", about = "Permutation-equivariance watermarking lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy backbone on the synthetic task and write the model file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Embed a watermark into a trained model.
    Embed {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        model: PathBuf,
        /// Override the configured scheme: b, s or trigger_baseline.
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long, default_value = "runs/embed")]
        out: PathBuf,
    },
    /// Measure the watermark rate of a model against a bundle.
    Extract {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        /// Unwatermarked reference model for a false-positive measurement.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        set_size: Option<usize>,
        #[arg(long, default_value = "runs/extract")]
        out: PathBuf,
    },
    /// Run one attack from the config's attack list (by index).
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        /// Index into the config's [[attack]] entries.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "runs/attack")]
        out: PathBuf,
    },
    /// Verify forward/backward/train-step equivariance plus the negative control.
    VerifyEquivariance {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, embed all three schemes, and run the configured attack matrix.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_path(p).map_err(HarnessError::Config)?,
        None => ExperimentConfig::toy(0),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_scheme(s: &str) -> Result<Scheme, HarnessError> {
    match s.to_ascii_lowercase().as_str() {
        "b" => Ok(Scheme::B),
        "s" => Ok(Scheme::S),
        "trigger_baseline" | "trigger" | "t" => Ok(Scheme::TriggerBaseline),
        other => Err(HarnessError::Config(format!("unknown scheme '{other}'"))),
    }
}

fn run() -> Result<(), HarnessError> {
    match Cli::parse().command {
        Command::Train { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let result = harness::cmd_train(&cfg, &out)?;
            println!(
                "trained {} steps: train acc {:.3}, eval acc {:.3} → {}",
                result.report.steps,
                result.report.train_acc,
                result.report.eval_acc,
                result.model_path.display()
            );
        }
        Command::Embed { config, seed, model, scheme, out } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(s) = scheme {
                cfg.watermark.scheme = parse_scheme(&s)?;
            }
            let result = harness::cmd_embed(&cfg, &model, &out)?;
            println!(
                "embedded scheme {} in {} ms (fidelity: acc gap {:+.2} points, loss gap {:.4}) → {}",
                result.report.scheme,
                result.wall_ms,
                result.report.fidelity.acc_gap_points,
                result.report.fidelity.loss_gap,
                result.bundle_path.display()
            );
        }
        Command::Extract { config, seed, model, bundle, reference, scheme, set_size, out } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(s) = scheme {
                cfg.watermark.scheme = parse_scheme(&s)?;
            }
            if let Some(n) = set_size {
                cfg.extraction.set_size = n;
                cfg.validate().map_err(HarnessError::Config)?;
            }
            let result = harness::cmd_extract(&cfg, &model, &bundle, reference.as_deref(), &out)?;
            let r = &result.out.report;
            println!("scheme {} | n = {} | WR = {:.4}", r.scheme, r.n, r.wr);
            if let Some(fp) = &result.out.false_positive_reference {
                println!("reference (unwatermarked) | WR = {:.4}", fp.wr);
            }
            println!("per-sample scores → {}", result.scores_path.display());
        }
        Command::Attack { config, seed, model, bundle, index, out } => {
            let cfg = load_config(&Some(config), seed)?;
            let attack: &AttackConfig = cfg.attacks.get(index).ok_or_else(|| {
                HarnessError::Config(format!(
                    "attack index {index} out of range ({} configured)",
                    cfg.attacks.len()
                ))
            })?;
            let result = harness::cmd_attack(&cfg, &model, &bundle, attack, &out)?;
            println!(
                "attack complete: WR before {:.4}; {} point(s) → {}",
                result.report.wr_before,
                result.report.points.len(),
                result.report_path.display()
            );
            for p in &result.report.points {
                println!("  strength {:>6.2}: WR {:.4}, downstream acc {:.3}", p.strength, p.wr, p.downstream_acc);
            }
        }
        Command::VerifyEquivariance { seed, trials, out } => {
            if trials == 0 {
                println!("warning: trials = 0, vacuous pass");
            }
            let report = harness::cmd_verify_equivariance(seed, trials, out.as_deref())?;
            println!(
                "equivariance over {} trials: forward {:.2e} (< {:.0e}), backward {:.2e} (< {:.0e}), train-step {:.2e} (< {:.0e}), cross-head control {:.2e} (≥ {:.0e})",
                report.trials,
                report.max_forward,
                report.forward_tol,
                report.max_backward,
                report.backward_tol,
                report.max_train_step,
                report.train_step_tol,
                report.negative_control_deviation,
                report.negative_control_min,
            );
        }
        Command::Sweep { config, seed, out } => {
            let cfg = load_config(&Some(config), seed)?;
            let result = harness::cmd_sweep(&cfg, &out)?;
            println!("sweep complete; CSVs:");
            for p in &result.csv_paths {
                println!("  {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
