use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use turncredit::config::RunConfig;
use turncredit::credit::RewardMode;
use turncredit::pipeline::{self, Split};
use turncredit::theory::verify_suite;
use turncredit::Error;

/// Turn-level credit assignment for memory agents reading chunked documents.
#[derive(Parser)]
#[command(name = "turncredit", version)]
struct Cli {
    /// TOML run config; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-key override, e.g. `train.beta=0.001`. Repeatable.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the vocabulary and the train/eval task files to `io.data_dir`.
    GenData,
    /// Train a policy, writing metrics and checkpoints to `io.out_dir`.
    Train {
        /// Reward mode; overrides `reward.mode`.
        #[arg(long)]
        mode: Option<RewardMode>,
    },
    /// Average@k exact match and sub_em on the eval split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Check the objective decomposition on random discrete instances.
    VerifyTheorem {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-run one episode and dump it decoded, with teacher scores.
    Trace {
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
        split: SplitArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Mode { .. } => 2,
        Error::Numeric { .. } => 3,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = base
        .with_overrides(&cli.overrides)?
        .with_env(|k| std::env::var(k).ok())
        .resolved()?;
    match &cli.command {
        Command::Train { mode: Some(mode) } => cfg.reward.mode = *mode,
        Command::Eval { checkpoint: Some(c) } | Command::Trace { checkpoint: Some(c), .. } => {
            cfg.io.checkpoint = Some(c.clone())
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Command::VerifyTheorem { trials, tolerance, seed } = cli.command {
        let report = verify_suite(&mut ChaCha8Rng::seed_from_u64(seed), trials, tolerance)?;
        println!(
            "trials={} max_residual={:.3e} max_chain_residual={:.3e} tolerance={:.1e}",
            report.trials, report.max_residual, report.max_chain_residual, report.tolerance
        );
        if !report.passed {
            return Err(Error::Numeric {
                component: "theorem identity residual".into(),
            });
        }
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData => {
            let paths = pipeline::gen_data(&cfg)?;
            println!("wrote {}, {}, {}", paths.vocab.display(), paths.train.display(), paths.eval.display());
        }
        Command::Train { .. } => {
            let stop = Arc::new(AtomicBool::new(false));
            let flag = stop.clone();
            // Failing to install the handler only loses graceful shutdown.
            let _ = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst));
            let outcome = pipeline::train(&cfg, &stop, |m| {
                eprintln!(
                    "step {:>5} em={:.3} reward={:.3} kl={:.4} surv={:.2} rounds={} updated={}",
                    m.step, m.em, m.mean_reward, m.kl, m.surviving_fraction, m.rounds, m.updated
                );
            })?;
            if outcome.interrupted {
                eprintln!("interrupted after {} steps", outcome.steps_completed);
            }
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Eval { .. } => {
            let out = pipeline::eval(&cfg)?;
            println!(
                "em={:.4} sub_em={:.4} k={} tasks={}",
                out.report.em, out.report.sub_em, out.report.k, out.report.num_tasks
            );
        }
        Command::Trace { index, split, .. } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Eval => Split::Eval,
            };
            let (path, trace) = pipeline::trace(&cfg, split, index)?;
            println!("{}", serde_json::to_string_pretty(&trace)?);
            eprintln!("wrote {}", path.display());
        }
        Command::VerifyTheorem { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
