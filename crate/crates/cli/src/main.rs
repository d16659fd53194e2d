use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use incfsl::experiment::ExperimentConfig;
use incfsl::pipeline::{metrics_table, Pipeline};
use incfsl::training::MetaAlgorithm;
use incfsl::types::EpisodeMode;

/// Semi-supervised incremental few-shot experiments.
#[derive(Parser, Debug)]
#[command(name = "incfsl", version)]
struct Cli {
    /// TOML experiment config; the built-in desk-scale preset when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Evaluation episodes (overrides the config).
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// Meta-training steps (overrides the config).
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Evaluation worker threads, 0 for all cores (does not affect results).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the dataset bundle.
    Synth,
    /// Pre-train the extractor and base classifier on base classes.
    Pretrain,
    /// Episodic meta-training.
    Metatrain {
        #[arg(value_enum)]
        algorithm: Algorithm,
    },
    /// Evaluate the configured methods on test episodes.
    Evaluate {
        #[arg(value_enum)]
        mode: Mode,
    },
    /// Four-row ablation on semi-supervised episodes.
    Ablate,
    /// Unlabeled base:novel ratio sweep.
    Sweep,
    /// Collect existing artifacts into report.md and plots.
    Report,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Algorithm {
    Alg1,
    Alg2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Inductive,
    Transductive,
    Semi,
}

fn build_config(cli: &Cli) -> incfsl::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(e) = cli.episodes {
        cfg.evaluation.episodes = e;
    }
    if let Some(s) = cli.steps {
        cfg.meta.steps = s;
    }
    if let Some(w) = cli.workers {
        cfg.evaluation.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> incfsl::Result<()> {
    let pipeline = Pipeline::new(build_config(cli)?)?;
    println!("output {} (config hash {})", pipeline.dir().display(), pipeline.hash());
    match cli.command {
        Command::Synth => {
            let b = pipeline.synth()?;
            println!(
                "dataset: {} base classes, {} novel classes, {} features",
                b.n_base(),
                b.novel_classes.len(),
                b.input_dim
            );
        }
        Command::Pretrain => {
            pipeline.pretrain()?;
            println!("wrote pretrained.json");
        }
        Command::Metatrain { algorithm } => {
            let alg = match algorithm {
                Algorithm::Alg1 => MetaAlgorithm::Baseline,
                Algorithm::Alg2 => MetaAlgorithm::FakeUnlabeled,
            };
            pipeline.metatrain(alg)?;
            println!("wrote {}.json", alg.name());
        }
        Command::Evaluate { mode } => {
            let mode = match mode {
                Mode::Inductive => EpisodeMode::Inductive,
                Mode::Transductive => EpisodeMode::Transductive,
                Mode::Semi => EpisodeMode::SemiSupervised,
            };
            let ev = pipeline.evaluate(mode)?;
            print!("{}", metrics_table(&ev.reports, false));
        }
        Command::Ablate => {
            let ev = pipeline.ablate()?;
            print!("{}", metrics_table(&ev.reports, true));
        }
        Command::Sweep => {
            for (m, rows) in pipeline.sweep()? {
                for r in rows {
                    println!(
                        "{:18} {}:{}  joint {:.2}  change {:+.2}",
                        m.as_str(),
                        r.ratio.0,
                        r.ratio.1,
                        100.0 * r.joint.mean,
                        100.0 * r.degradation
                    );
                }
            }
        }
        Command::Report => {
            let p = pipeline.report()?;
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
