//! The `ossem` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::adapt::{enhance_wave, one_shot_adapt};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance};
use crate::config::RunConfig;
use crate::corpus::{export_masks, gen_corpus};
use crate::error::{Error, Result};
use crate::features::wav::{read_wav, write_wav};
use crate::features::Stft;
use crate::model::{model_grad_check, ParamSet};
use crate::pipeline::{self, Prepared};
use crate::speaker::{load_embeddings, SpeakerEmbedding};

#[derive(Debug, Parser)]
#[command(name = "ossem", version, about = "One-shot speaker-adaptive speech enhancement")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `corpus_dir` from the config.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Overrides the master `seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus into the corpus directory.
    GenCorpus,
    /// Supervised pretraining from random initialisation.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
    },
    /// Speaker-task meta-training.
    MetaTrain {
        /// Start from this checkpoint instead of random weights.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-shot adaptation on a speaker's enrollment utterance.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Speaker id in the corpus manifest.
        #[arg(long)]
        enroll: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enhance a WAV file.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Speaker whose embedding to use when the checkpoint carries none.
        #[arg(long)]
        speaker: Option<String>,
    },
    /// Unadapted versus adapted results on the test speakers.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every mask placement.
    AblatePlacement {
        /// CSV results path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every training-technique combination.
    AblateTechniques {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the mask of every corpus speaker as CSV.
    ExportMasks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the model gradients in 64-bit.
    GradCheck {
        /// Number of seeded random models.
        #[arg(long, default_value_t = 5)]
        models: u64,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        /// Elements probed per parameter tensor; 0 probes all.
        #[arg(long, default_value_t = 64)]
        per_param: usize,
    },
}

pub fn main_with(args: impl IntoIterator<Item = String>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn resolve_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &g.corpus {
        cfg.corpus_dir = dir.clone();
    }
    if let Some(seed) = g.seed {
        cfg.seed = Some(seed);
    }
    let cfg = cfg.resolve()?;
    println!("resolved config:\n{}", cfg.to_json());
    println!("seed: corpus {} pretrain {} meta {}", cfg.corpus.seed, cfg.pretrain.seed, cfg.train.seed);
    Ok(cfg)
}

fn print(line: String) {
    println!("{line}");
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    let provenance = |epoch| Provenance::new(&cfg.to_json(), cfg.train.seed, epoch);
    match &cli.command {
        Command::GenCorpus => {
            let m = gen_corpus(&cfg.corpus, &cfg.corpus_dir)?;
            println!(
                "generated {} utterances from {} speakers in {}",
                m.utterances.len(),
                m.speakers.len(),
                cfg.corpus_dir.display()
            );
        }
        Command::Pretrain { out } => {
            let prep = Prepared::open(&cfg, cfg.stft)?;
            let theta = pipeline::pretrain(&cfg, &cfg.model, &prep.train_set()?, &mut print)?;
            let ckpt = Checkpoint::new(cfg.model.clone(), cfg.stft, theta, provenance(cfg.pretrain.epochs));
            save_checkpoint(&ckpt, out)?;
            println!("wrote {}", out.display());
        }
        Command::MetaTrain { init, out } => {
            let prep = Prepared::open(&cfg, cfg.stft)?;
            let start = match init {
                Some(path) => load_checkpoint(path)?.params_for(&cfg.model)?.clone(),
                None => ParamSet::init(&cfg.model, cfg.init_seed())?,
            };
            let data = prep.train_set()?;
            let theta = pipeline::meta(&cfg, &cfg.model, cfg.train.techniques, &data, start, &mut print)?;
            let ckpt = Checkpoint::new(cfg.model.clone(), cfg.stft, theta, provenance(cfg.train.epochs));
            save_checkpoint(&ckpt, out)?;
            println!("wrote {}", out.display());
        }
        Command::Adapt { checkpoint, enroll, out } => {
            let base = load_checkpoint(checkpoint)?;
            let prep = Prepared::open(&cfg, base.stft)?;
            let set = prep.corpus.enrollment(enroll, &prep.stft, &prep.embeddings)?;
            let adapted = one_shot_adapt(&base.params, &base.model, &set, cfg.adapt_options())?;
            let ckpt = Checkpoint {
                params: adapted,
                embedding: Some(set.embedding),
                ..base
            };
            save_checkpoint(&ckpt, out)?;
            println!("adapted to {enroll}; wrote {}", out.display());
        }
        Command::Enhance {
            checkpoint,
            input,
            out,
            speaker,
        } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let emb = match (speaker, &ckpt.embedding) {
                (Some(id), _) => lookup_embedding(&cfg, id)?,
                (None, Some(e)) => e.clone(),
                (None, None) => {
                    return Err(Error::invalid(
                        "checkpoint carries no speaker embedding; pass --speaker or adapt it first",
                    ))
                }
            };
            let stft = Stft::new(ckpt.stft)?;
            let noisy = read_wav(input)?;
            let est = enhance_wave(&ckpt.params, &ckpt.model, emb.as_slice(), &stft, &noisy)?;
            write_wav(out, &est)?;
            println!("enhanced {} samples for {}; wrote {}", est.len(), emb.speaker_id, out.display());
        }
        Command::Eval { checkpoint, out } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let prep = Prepared::open(&cfg, ckpt.stft)?;
            let report = prep.evaluate(&cfg, &ckpt.model, &ckpt.params)?;
            println!("{:<10} {:>10} {:>10} {:>10} {:>10}", "speaker", "noisy", "unadapted", "adapted", "delta");
            for s in &report.speakers {
                println!(
                    "{:<10} {:>10.3} {:>10.3} {:>10.3} {:>10.3}",
                    s.speaker_id, s.noisy.si_sdr, s.unadapted.si_sdr, s.adapted.si_sdr, s.delta.si_sdr
                );
            }
            if let (Some(n), Some(u), Some(a), Some(d)) =
                (report.mean_noisy, report.mean_unadapted, report.mean_adapted, report.mean_delta)
            {
                println!("{:<10} {:>10.3} {:>10.3} {:>10.3} {:>10.3}", "mean", n.si_sdr, u.si_sdr, a.si_sdr, d.si_sdr);
            } else {
                println!("no test speakers");
            }
            if let Some(path) = out {
                write_out(path, &serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::AblatePlacement { out } => {
            let prep = Prepared::open(&cfg, cfg.stft)?;
            let table = pipeline::ablate_placement(&cfg, &prep, &mut print)?;
            println!("{}", table.to_markdown());
            if let Some(path) = out {
                write_out(path, &table.to_csv())?;
            }
        }
        Command::AblateTechniques { out } => {
            let prep = Prepared::open(&cfg, cfg.stft)?;
            let table = pipeline::ablate_techniques(&cfg, &prep, &mut print)?;
            println!("{}", table.to_markdown());
            if let Some(path) = out {
                write_out(path, &table.to_csv())?;
            }
        }
        Command::ExportMasks { checkpoint, out } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let prep = Prepared::open(&cfg, ckpt.stft)?;
            let rows: Vec<(&str, &str, &SpeakerEmbedding)> = prep
                .corpus
                .manifest
                .speakers
                .iter()
                .filter_map(|s| {
                    prep.embeddings
                        .get(&s.speaker_id)
                        .map(|e| (s.speaker_id.as_str(), s.gender.as_str(), e))
                })
                .collect();
            write_out(out, &export_masks(&ckpt.params, rows)?)?;
        }
        Command::GradCheck {
            models,
            frames,
            per_param,
        } => {
            let per = if *per_param == 0 { usize::MAX } else { *per_param };
            let mut failed = 0;
            for i in 0..*models {
                let seed = cfg.init_seed().wrapping_add(i);
                let report = model_grad_check(&cfg.model, seed, *frames, per)?;
                let status = if report.passed() { "ok" } else { "FAIL" };
                println!("model seed {seed}: max relative error {:.3e} {status}", report.max_rel_err());
                if !report.passed() {
                    print!("{report}");
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(Error::invalid(format!("{failed} of {models} gradient checks failed")));
            }
        }
    }
    Ok(())
}

fn lookup_embedding(cfg: &RunConfig, id: &str) -> Result<SpeakerEmbedding> {
    let table = match &cfg.embeddings {
        Some(path) => load_embeddings(path)?,
        None => crate::corpus::Corpus::open(&cfg.corpus_dir)?.embeddings(None)?,
    };
    table
        .get(id)
        .cloned()
        .ok_or_else(|| Error::invalid(format!("no speaker embedding for {id}")))
}
