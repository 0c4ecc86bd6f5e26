//! Command-line entry point.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::bench::{bench_fusion, format_table};
use super::config::{ExperimentConfig, Overrides, Profile};
use super::eval::{evaluate, EvalOptions};
use super::heatmap::export_heatmaps;
use super::train::Trainer;
use crate::data::{generate, load_corpus, store_corpus};
use crate::encoder::ContextMode;
use crate::error::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "crossutt", version, about = "Cross-utterance context for conformer transducers")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// paper or desk.
    #[arg(long, global = true)]
    pub profile: Option<Profile>,
    /// none, frame_concat or pooled.
    #[arg(long, global = true)]
    pub context_mode: Option<ContextMode>,
    #[arg(long, global = true)]
    pub n_prev: Option<usize>,
    /// Rows of each pooled context block.
    #[arg(long = "pool-L", global = true)]
    pub pool_l: Option<usize>,
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub streaming: Option<bool>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            profile: self.profile,
            context_mode: self.context_mode,
            n_prev: self.n_prev,
            pool_slots: self.pool_l,
            streaming: self.streaming,
        }
    }

    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dependency corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        dependency_prob: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a model; writes checkpoint.ctxc, metrics.jsonl and config.toml.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Continue from this checkpoint; its configuration is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Omit wall-clock times from the metrics log.
        #[arg(long)]
        no_wall_time: bool,
    },
    /// Greedy-decode a corpus and print a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Empty the context cache before every utterance.
        #[arg(long)]
        clear_cache: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the context fusion over a sweep of history lengths.
    BenchFusion {
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write pooling weight matrices of one clip as CSV files.
    ExportHeatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        clip: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus {
            out,
            clips,
            dependency_prob,
            noise,
        } => {
            let cfg = cli.common.load()?;
            let mut spec = cfg.corpus.clone();
            spec.clips = clips.unwrap_or(spec.clips);
            spec.dependency_prob = dependency_prob.unwrap_or(spec.dependency_prob);
            spec.noise = noise.unwrap_or(spec.noise);
            let corpus = generate(&spec, cfg.seed)?;
            store_corpus(&corpus, &out)?;
            eprintln!("wrote {} utterances to {}", corpus.utterances.len(), out.display());
        }
        Command::Train {
            corpus,
            out,
            epochs,
            max_steps,
            resume,
            no_wall_time,
        } => {
            let mut data = load_corpus(&corpus)?;
            let mut trainer = match resume {
                Some(p) => {
                    let mut t = Trainer::load(&p)?;
                    t.config.train.epochs = epochs.unwrap_or(t.config.train.epochs);
                    t.config.train.max_steps = max_steps.or(t.config.train.max_steps);
                    t
                }
                None => {
                    let mut cfg = cli.common.load()?;
                    cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
                    cfg.train.max_steps = max_steps.or(cfg.train.max_steps);
                    cfg.train.log_wall_time &= !no_wall_time;
                    Trainer::new(cfg, data.vocab.clone())?
                }
            };
            let dropped = trainer.prepare(&mut data)?;
            if dropped > 0 {
                eprintln!("warning: dropped {dropped} utterances shorter than the subsampler minimum");
            }
            create_dir(&out)?;
            write_text(&out.join("config.toml"), &trainer.config.to_toml()?)?;
            let path = out.join("metrics.jsonl");
            let file = fs::OpenOptions::new()
                .create(true)
                .append(trainer.step > 0)
                .write(true)
                .truncate(trainer.step == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let mut metrics = BufWriter::new(file);
            trainer.run(&data, &mut metrics, Some(&out.join("checkpoint.ctxc")), |r| {
                if r.step % 25 == 0 {
                    eprintln!("step {} loss {:.4} lr {:.2e}", r.step, r.loss, r.lr);
                }
            })?;
            eprintln!("finished at step {}", trainer.step);
        }
        Command::Eval {
            checkpoint,
            corpus,
            clear_cache,
            out,
        } => {
            let trainer = Trainer::load(&checkpoint)?;
            let mut data = load_corpus(&corpus)?;
            trainer.prepare(&mut data)?;
            let report = evaluate(&trainer.model, &data, EvalOptions { clear_cache })?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => write_text(&p, &json)?,
                None => println!("{json}"),
            }
        }
        Command::BenchFusion { repetitions, out } => {
            let mut common = cli.common.clone();
            // Timing is meaningful at full model size unless asked otherwise.
            common.profile = common.profile.or(Some(Profile::Paper));
            let mut cfg = common.load()?;
            cfg.bench.repetitions = repetitions.unwrap_or(cfg.bench.repetitions);
            let report = bench_fusion(&cfg)?;
            eprint!("{}", format_table(&report));
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => write_text(&p, &json)?,
                None => println!("{json}"),
            }
        }
        Command::ExportHeatmap {
            checkpoint,
            corpus,
            clip,
            out,
        } => {
            let trainer = Trainer::load(&checkpoint)?;
            let mut data = load_corpus(&corpus)?;
            trainer.prepare(&mut data)?;
            let maps = export_heatmaps(&trainer.model, &data, &clip)?;
            create_dir(&out)?;
            for m in &maps {
                write_text(&out.join(m.file_name()), &m.to_csv())?;
            }
            eprintln!("wrote {} heatmaps to {}", maps.len(), out.display());
        }
    }
    Ok(())
}

pub fn main() -> std::process::ExitCode {
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
