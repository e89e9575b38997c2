//! End-to-end runs built from a [`RunConfig`]: training, evaluation and the
//! placement and technique ablations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::corpus::{eval_adaptation, Corpus, EvalReport, Metrics};
use crate::error::{Error, Result};
use crate::features::{Stft, StftConfig};
use crate::meta::{meta_train, supervised_pretrain, EpochLog, OssemLearner, Techniques, TrainSet};
use crate::model::{ModelConfig, ParamSet, Placement};
use crate::speaker::SpeakerEmbedding;

/// A corpus opened with the STFT and embeddings a config asks for.
pub struct Prepared {
    pub corpus: Corpus,
    pub stft: Stft,
    pub embeddings: BTreeMap<String, SpeakerEmbedding>,
}

impl Prepared {
    /// Opens the configured corpus, analysed with `stft`.
    pub fn open(cfg: &RunConfig, stft: StftConfig) -> Result<Self> {
        let corpus = Corpus::open(&cfg.corpus_dir)?;
        let stft = Stft::new(stft)?;
        let embeddings = corpus.embeddings(cfg.embeddings.as_deref())?;
        Ok(Self {
            corpus,
            stft,
            embeddings,
        })
    }

    pub fn train_set(&self) -> Result<TrainSet> {
        self.corpus.train_set(&self.stft, &self.embeddings)
    }

    pub fn evaluate(&self, cfg: &RunConfig, model: &ModelConfig, theta: &ParamSet<f32>) -> Result<EvalReport> {
        eval_adaptation(theta, model, &self.stft, &self.corpus, &self.embeddings, &cfg.eval_options())
    }
}

pub fn log_line(stage: &str, l: &EpochLog) -> String {
    let support = l.mean_support_loss.map_or_else(|| "-".to_string(), |s| format!("{s:.5}"));
    format!(
        "{stage} epoch {:>3}  ilr {:.3e}  support {support}  query {:.5}  {} ms",
        l.epoch, l.ilr, l.mean_query_loss, l.wall_ms
    )
}

/// Fresh parameters trained with supervised batches.
pub fn pretrain(cfg: &RunConfig, model: &ModelConfig, data: &TrainSet, log: &mut dyn FnMut(String)) -> Result<ParamSet<f32>> {
    let learner = OssemLearner::new(model.clone());
    let init = ParamSet::init(model, cfg.init_seed())?;
    Ok(supervised_pretrain(&cfg.pretrain, &learner, data, init, |l| log(log_line("pretrain", l)))?.0)
}

pub fn meta(
    cfg: &RunConfig,
    model: &ModelConfig,
    techniques: Techniques,
    data: &TrainSet,
    init: ParamSet<f32>,
    log: &mut dyn FnMut(String),
) -> Result<ParamSet<f32>> {
    let learner = OssemLearner::new(model.clone());
    let train = crate::meta::TrainConfig {
        techniques,
        ..cfg.train.clone()
    };
    Ok(meta_train(&train, &learner, data, init, |l| log(log_line("meta", l)))?.0)
}

/// Pretraining followed by meta-training with the configured techniques.
pub fn train(cfg: &RunConfig, model: &ModelConfig, data: &TrainSet, log: &mut dyn FnMut(String)) -> Result<ParamSet<f32>> {
    let theta = pretrain(cfg, model, data, log)?;
    meta(cfg, model, cfg.train.techniques, data, theta, log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub noisy: Metrics,
    pub unadapted: Metrics,
    pub adapted: Metrics,
}

/// Mean test-speaker results, one row per variant.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

const COLUMNS: [&str; 8] = [
    "variant",
    "noisy_si_sdr",
    "unadapted_si_sdr",
    "adapted_si_sdr",
    "delta_si_sdr",
    "adapted_seg_snr",
    "unadapted_spectral_l1",
    "adapted_spectral_l1",
];

impl AblationRow {
    fn from_report(label: &str, r: &EvalReport) -> Result<Self> {
        match (r.mean_noisy, r.mean_unadapted, r.mean_adapted) {
            (Some(noisy), Some(unadapted), Some(adapted)) => Ok(Self {
                label: label.to_string(),
                noisy,
                unadapted,
                adapted,
            }),
            _ => Err(Error::invalid("ablation needs at least one test speaker")),
        }
    }

    fn values(&self) -> [f64; 7] {
        [
            self.noisy.si_sdr,
            self.unadapted.si_sdr,
            self.adapted.si_sdr,
            self.adapted.si_sdr - self.unadapted.si_sdr,
            self.adapted.seg_snr,
            self.unadapted.spectral_l1,
            self.adapted.spectral_l1,
        ]
    }
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.label);
            for v in r.values() {
                write!(out, ",{v}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`AblationTable::to_csv`] output into `(variant, values)`.
    pub fn parse_csv(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
        let mut lines = text.lines();
        if lines.next() != Some(COLUMNS.join(",").as_str()) {
            return Err(Error::invalid("ablation table has an unexpected header"));
        }
        lines
            .map(|line| {
                let mut fields = line.split(',');
                let label = fields.next().unwrap_or_default().to_string();
                let values = fields
                    .map(|f| f.parse::<f64>().map_err(|e| Error::invalid(format!("{label}: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                if values.len() != COLUMNS.len() - 1 {
                    return Err(Error::invalid(format!("{label}: expected {} values", COLUMNS.len() - 1)));
                }
                Ok((label, values))
            })
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| {} |\n|{}\n", COLUMNS.join(" | "), "---|".repeat(COLUMNS.len()));
        for r in &self.rows {
            write!(out, "| {} |", r.label).expect("write to string");
            for v in r.values() {
                write!(out, " {v:.3} |").expect("write to string");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains and evaluates one model per mask placement.
pub fn ablate_placement(cfg: &RunConfig, prep: &Prepared, log: &mut dyn FnMut(String)) -> Result<AblationTable> {
    let data = prep.train_set()?;
    let mut table = AblationTable::default();
    for placement in Placement::ALL {
        log(format!("== placement {placement}"));
        let model = ModelConfig {
            placement,
            ..cfg.model.clone()
        };
        let theta = train(cfg, &model, &data, log)?;
        let report = prep.evaluate(cfg, &model, &theta)?;
        table.rows.push(AblationRow::from_report(placement.as_str(), &report)?);
    }
    Ok(table)
}

/// The technique combinations compared by [`ablate_techniques`].
pub fn technique_rows() -> [(&'static str, Techniques); 4] {
    let t = |speaker_inner_loop, ilr_schedule, feature_rescale| Techniques {
        speaker_inner_loop,
        ilr_schedule,
        feature_rescale,
    };
    [
        ("baseline", t(false, false, false)),
        ("technique_1", t(true, false, false)),
        ("technique_1_2", t(true, true, false)),
        ("technique_1_2_3", t(true, true, true)),
    ]
}

/// Meta-trains one shared pretrained model under each technique combination.
pub fn ablate_techniques(cfg: &RunConfig, prep: &Prepared, log: &mut dyn FnMut(String)) -> Result<AblationTable> {
    let data = prep.train_set()?;
    let base = pretrain(cfg, &cfg.model, &data, log)?;
    let mut table = AblationTable::default();
    for (label, techniques) in technique_rows() {
        log(format!("== {label}"));
        let theta = meta(cfg, &cfg.model, techniques, &data, base.clone(), log)?;
        let report = prep.evaluate(cfg, &cfg.model, &theta)?;
        table.rows.push(AblationRow::from_report(label, &report)?);
    }
    Ok(table)
}
