use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use flowback::flow::Geometry;
use flowback::harness::bench::{bench_reverse, BenchConfig};
use flowback::harness::commands::{
    open_checkpoint, roundtrip_check, run_classify, run_sample, run_train,
};
use flowback::harness::config::RunConfig;
use flowback::harness::sample::SampleSpec;

#[derive(Parser)]
#[command(
    name = "flowback",
    version,
    about = "Autoregressive flows with representation alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set align.strategy=detach`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
        /// Metrics file (JSON lines); stdout when absent.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from this checkpoint up to `train.steps`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output archive directory.
        #[arg(long)]
        out: PathBuf,
        /// Samples per class.
        #[arg(long, default_value_t = 4096)]
        n: usize,
        /// Class to sample; every class when absent.
        #[arg(long)]
        label: Option<usize>,
        /// Guidance scale; defaults to `sample.cfg_scale`.
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use raw instead of EMA weights.
        #[arg(long)]
        raw: bool,
    },
    /// Classify the test split with the single-step, brute-force and
    /// multi-step classifiers.
    Classify {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Multi-step learning rates to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 1.0, 10.0])]
        multistep_lr: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        multistep_steps: usize,
        #[arg(long)]
        raw: bool,
        /// Report file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Throughput of the alignment strategies on one thread.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 64)]
        tokens: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite against a checkpoint.
    RoundtripCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn emit(path: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    let mut w = writer(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            cfg,
            out,
            metrics,
            resume,
        } => {
            let config = RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?;
            let mut w = writer(metrics.as_deref())?;
            let state = run_train(config, &out, resume.as_deref(), &mut w)?;
            eprintln!(
                "trained to step {}; checkpoint at {}",
                state.step,
                out.display()
            );
            Ok(true)
        }
        Command::Sample {
            cfg,
            checkpoint,
            out,
            n,
            label,
            cfg_scale,
            seed,
            raw,
        } => {
            let (exp, state) = open_checkpoint(&checkpoint, &cfg.overrides)?;
            let k = exp.cfg.data_classes;
            let labels: Vec<usize> = match label {
                Some(l) if l >= k => bail!("label {l} out of range for {k} classes"),
                Some(l) => vec![l],
                None => (0..k).collect(),
            };
            let spec = SampleSpec {
                count: n,
                cfg_scale: cfg_scale.unwrap_or(exp.cfg.cfg_scale),
                seed,
                denoise: exp.cfg.denoise,
            };
            let params = if raw {
                &state.params
            } else {
                &state.ema.shadow
            };
            let (archive, report) = run_sample(&exp, params, &labels, &spec)?;
            archive.save(&out)?;
            emit(None, &report)?;
            Ok(true)
        }
        Command::Classify {
            cfg,
            checkpoint,
            n,
            multistep_lr,
            multistep_steps,
            raw,
            out,
        } => {
            let (exp, state) = open_checkpoint(&checkpoint, &cfg.overrides)?;
            let params = if raw {
                &state.params
            } else {
                &state.ema.shadow
            };
            let sweep: Vec<(usize, f64)> = multistep_lr
                .iter()
                .map(|&lr| (multistep_steps, lr))
                .collect();
            let report = run_classify(&exp, params, n, &sweep)?;
            emit(out.as_deref(), &report)?;
            Ok(true)
        }
        Command::Bench {
            cfg,
            tokens,
            width,
            layers,
            blocks,
            repeats,
            out,
        } => {
            let config = RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?;
            let bc = BenchConfig {
                geometry: Geometry {
                    tokens,
                    channels: 1,
                    width,
                    layers,
                    heads: 1,
                    ff_mult: config.ff_mult,
                    classes: config.data_classes,
                },
                blocks,
                feature_dim: config.feature_dim,
                repeats,
                min_secs: 0.3,
                seed: config.seed,
            };
            let report = bench_reverse(&bc)?;
            emit(out.as_deref(), &report)?;
            let ok =
                report.ordering_holds() && report.speedup() >= 5.0 && report.memory_ratio() >= 1.5;
            eprintln!(
                "ordering {} speedup {:.1}x peak-node ratio {:.1}x",
                if report.ordering_holds() {
                    "ok"
                } else {
                    "VIOLATED"
                },
                report.speedup(),
                report.memory_ratio()
            );
            Ok(ok)
        }
        Command::RoundtripCheck {
            cfg: _,
            checkpoint,
            out,
        } => {
            let results = roundtrip_check(&checkpoint)?;
            for r in &results {
                eprintln!(
                    "{} {}: {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
            }
            emit(out.as_deref(), &results)?;
            Ok(results.iter().all(|r| r.passed))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
