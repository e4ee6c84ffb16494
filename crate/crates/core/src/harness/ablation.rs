//! Ablation studies at desk scale, averaged over several seeds.
//!
//! Each study is a set of rows; a row fixes a training configuration and
//! the mode it is evaluated with. Identical (data, training) configurations
//! are trained once per runner and shared between rows and studies.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoders::AttnMode;
use crate::error::{Error, Result};
use crate::index::SearchMode;
use crate::losses::LossKind;

use super::metrics::Metrics;
use super::synth::{gen_synth, SynthConfig};
use super::train::{train_toy, TrainConfig, TrainReport, TrainSimilarity};

pub const DEFAULT_SEEDS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Interaction,
    Loss,
    QueryAug,
    Frames,
    Depth,
}

impl Study {
    pub const ALL: [Study; 5] = [Self::Interaction, Self::Loss, Self::QueryAug, Self::Frames, Self::Depth];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Interaction => "interaction",
            Self::Loss => "loss",
            Self::QueryAug => "query_aug",
            Self::Frames => "frames",
            Self::Depth => "depth",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Self::Interaction => "Effect of interaction type",
            Self::Loss => "Effect of loss type and loss function",
            Self::QueryAug => "Effect of including pad tokens",
            Self::Frames => "Effect of number of sampled video frames",
            Self::Depth => "Effect of number of temporal transformer layers",
        }
    }

    /// Rows of the study applied to `base`.
    pub fn rows(self, base: &TrainConfig) -> Vec<RowSpec> {
        let row = |label: &str, mode: SearchMode, cfg: TrainConfig| RowSpec {
            label: label.to_string(),
            eval_mode: mode,
            train: cfg,
        };
        let with_sim = |sim: TrainSimilarity| TrainConfig {
            similarity: sim,
            ..base.clone()
        };
        match self {
            Self::Interaction => vec![
                row("MP-frame", SearchMode::Mp, with_sim(TrainSimilarity::MpFrame)),
                row("MP-video", SearchMode::MpVideo, with_sim(TrainSimilarity::MpVideo)),
                row("MMS_F", SearchMode::MmsF, with_sim(TrainSimilarity::MmsF)),
                row("MMS_V", SearchMode::MmsV, with_sim(TrainSimilarity::MmsV)),
                row("MMS_FV", SearchMode::MmsFv, with_sim(TrainSimilarity::MmsFv)),
                row("RRF", SearchMode::RrfFv, with_sim(TrainSimilarity::MmsFv)),
            ],
            Self::Loss => LossKind::ALL
                .into_iter()
                .map(|k| {
                    let label = match k {
                        LossKind::SigmoidCombined => "combined / sigmoid",
                        LossKind::SigmoidDual => "dual / sigmoid",
                        LossKind::InfonceCombined => "combined / InfoNCE",
                        LossKind::InfonceDual => "dual / InfoNCE",
                    };
                    row(label, SearchMode::MmsFv, TrainConfig {
                        loss: k,
                        similarity: TrainSimilarity::MmsFv,
                        ..base.clone()
                    })
                })
                .collect(),
            Self::QueryAug => [
                ("causal / pad tokens", AttnMode::Causal, true),
                ("causal / no pad tokens", AttnMode::Causal, false),
                ("bidirectional / pad tokens", AttnMode::Bidirectional, true),
                ("bidirectional / no pad tokens", AttnMode::Bidirectional, false),
            ]
            .into_iter()
            .map(|(label, attn, augment)| {
                row(label, SearchMode::MmsFv, TrainConfig {
                    attn,
                    augment,
                    ..base.clone()
                })
            })
            .collect(),
            Self::Frames => [4, 12, 20]
                .into_iter()
                .map(|n| {
                    row(&format!("N={n}"), SearchMode::MmsFv, TrainConfig {
                        num_frames: n,
                        ..base.clone()
                    })
                })
                .collect(),
            Self::Depth => [2, 4, 8]
                .into_iter()
                .map(|d| {
                    let mut cfg = base.clone();
                    cfg.encoder.temporal_layers = d;
                    row(&format!("{d} layers"), SearchMode::MmsFv, cfg)
                })
                .collect(),
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == norm)
            .ok_or_else(|| Error::Unknown {
                kind: "study",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowSpec {
    pub label: String,
    pub eval_mode: SearchMode,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub eval_mode: SearchMode,
    pub mean: Metrics,
    pub per_seed: Vec<Metrics>,
    pub final_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTiming {
    pub total_secs: f64,
    pub trainings: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub study: Study,
    pub title: String,
    pub seeds: Vec<u64>,
    pub synth: SynthConfig,
    pub rows: Vec<AblationRow>,
    pub notes: Vec<String>,
    pub timing: AblationTiming,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "{} (mean over {} seeds)", self.title, self.seeds.len());
        let _ = writeln!(
            out,
            "{:width$}  {:>8}  {:>6}  {:>6}  {:>6}  {:>7}  {:>6}",
            "row", "mode", "R@1", "R@5", "R@10", "nDCG@10", "MdR"
        );
        for r in &self.rows {
            let m = &r.mean;
            let _ = writeln!(
                out,
                "{:width$}  {:>8}  {:>6.3}  {:>6.3}  {:>6.3}  {:>7.3}  {:>6.1}",
                r.label,
                r.eval_mode.as_str(),
                m.r1,
                m.r5,
                m.r10,
                m.ndcg10,
                m.mdr
            );
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

/// Runs studies, reusing trained models whose configuration repeats.
pub struct AblationRunner {
    pub synth: SynthConfig,
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    cache: HashMap<String, TrainReport>,
    trainings: usize,
}

impl AblationRunner {
    /// `num_seeds` consecutive seeds starting at `base.seed`.
    pub fn new(synth: SynthConfig, base: TrainConfig, num_seeds: usize) -> Self {
        let seeds = (0..num_seeds as u64).map(|i| base.seed + i).collect();
        Self {
            synth,
            base,
            seeds,
            cache: HashMap::new(),
            trainings: 0,
        }
    }

    /// Trains (or recalls) `cfg` on data generated with `seed`; the
    /// training seed is also `seed`.
    pub fn train(&mut self, cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
        let synth = SynthConfig {
            seed,
            ..self.synth.clone()
        };
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let key = serde_json::to_string(&(&synth, &cfg))?;
        if let Some(r) = self.cache.get(&key) {
            return Ok(r.clone());
        }
        let data = gen_synth(&synth)?;
        let report = train_toy(&cfg, &data)?.report;
        self.trainings += 1;
        self.cache.insert(key, report.clone());
        Ok(report)
    }

    /// Runs `study`; `only` restricts it to the named rows.
    pub fn run(&mut self, study: Study, only: Option<&[&str]>) -> Result<AblationReport> {
        let start = Instant::now();
        let before = self.trainings;
        let mut rows = Vec::new();
        for spec in study.rows(&self.base) {
            if only.is_some_and(|o| !o.contains(&spec.label.as_str())) {
                continue;
            }
            let mut per_seed = Vec::new();
            let mut final_loss = Vec::new();
            for seed in self.seeds.clone() {
                let report = self.train(&spec.train, seed)?;
                let m = report.test.get(spec.eval_mode.as_str()).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("mode {} was not evaluated", spec.eval_mode))
                })?;
                per_seed.push(m);
                final_loss.push(report.final_loss);
            }
            rows.push(AblationRow {
                label: spec.label,
                eval_mode: spec.eval_mode,
                mean: Metrics::mean(&per_seed),
                per_seed,
                final_loss,
            });
        }
        if rows.is_empty() {
            return Err(Error::InvalidArgument(format!("no rows of study {study} selected")));
        }
        Ok(AblationReport {
            study,
            title: study.title().to_string(),
            seeds: self.seeds.clone(),
            synth: self.synth.clone(),
            rows,
            notes: vec![
                format!("metrics are means over {} seeds; each seed regenerates the data and retrains", self.seeds.len()),
                "nDCG@10 uses binary relevance (one relevant video per query)".to_string(),
                "synthetic data and toy encoders trained from scratch; only directions are comparable to published tables"
                    .to_string(),
            ],
            timing: AblationTiming {
                total_secs: start.elapsed().as_secs_f64(),
                trainings: self.trainings - before,
            },
        })
    }
}

/// Runs one study from scratch.
pub fn run_ablation(study: Study, synth: &SynthConfig, base: &TrainConfig, num_seeds: usize) -> Result<AblationReport> {
    AblationRunner::new(synth.clone(), base.clone(), num_seeds).run(study, None)
}
