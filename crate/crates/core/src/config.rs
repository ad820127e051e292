//! Declarative experiment configuration (TOML).
//!
//! Every key is optional; omitted keys take the defaults shown in
//! `configs/default.toml`, which doubles as the reference for `--help`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{Method, Reduction, IG_STEPS, SG_ITERATIONS, SG_SIGMA_GRID};
use crate::classifier::{ModelConfig, ScoreTarget, TrainConfig};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::text::{CorpusFormat, SyntheticSpec};

pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// CSV/TSV corpus with `text,label` columns; unset uses the synthetic
    /// generator.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<CorpusFormat>,
    pub train_ratio: f64,
    pub val_fraction: f64,
    pub min_freq: usize,
    pub max_vocab: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            format: None,
            train_ratio: 0.8,
            val_fraction: 0.1,
            min_freq: 2,
            max_vocab: 20_000,
            synthetic: SyntheticSpec::default(),
        }
    }
}

/// Explicit seed overrides. Unset seeds are derived from the global seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_head: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub second_head: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rand_head: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    pub methods: Vec<Method>,
    /// The first entry is the headline reduction; others get extra rows.
    pub reductions: Vec<Reduction>,
    pub target: ScoreTarget,
    pub sg_iterations: usize,
    pub sg_sigma_grid: Vec<f64>,
    pub ig_steps: usize,
    /// Unset uses `2L + 2048` per document.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shap_coalitions: Option<usize>,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            reductions: vec![Reduction::L2],
            target: ScoreTarget::Logit,
            sg_iterations: SG_ITERATIONS,
            sg_sigma_grid: SG_SIGMA_GRID.to_vec(),
            ig_steps: IG_STEPS,
            shap_coalitions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub eval_subsample: usize,
    pub k_percent: Vec<f64>,
    pub within_units: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            eval_subsample: 200,
            k_percent: vec![10.0, 25.0],
            within_units: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub replicates: usize,
    /// Forces SecondInit to reuse FirstInit's head seed.
    pub debug_force_same_head_seed: bool,
    /// Gives SecondInit its own shuffle order.
    pub distinct_shuffle_seeds: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: SeedConfig,
    pub attribution: AttributionConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            replicates: 1,
            debug_force_same_head_seed: false,
            distinct_shuffle_seeds: false,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seeds: SeedConfig::default(),
            attribution: AttributionConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

/// Every seed one replicate uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedSeeds {
    pub data: u64,
    pub split: u64,
    pub subsample: u64,
    pub encoder: u64,
    pub pretrain_head: u64,
    pub first_head: u64,
    pub second_head: u64,
    pub rand_head: u64,
    pub shuffle: u64,
    pub second_shuffle: u64,
    pub smoothgrad: u64,
    pub kernel_shap: u64,
    pub random: u64,
}

fn config_error(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| config_error("<root>", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(path.display().to_string(), format!("cannot read config file: {e}")))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::contract(format!("config serialization: {e}")))
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(config_error("replicates", "must be >= 1"));
        }
        let d = &self.data;
        if !(d.train_ratio > 0.0 && d.train_ratio < 1.0) {
            return Err(config_error("data.train_ratio", "must lie in (0, 1)"));
        }
        if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return Err(config_error("data.val_fraction", "must lie in (0, 1)"));
        }
        if d.path.is_none() {
            d.synthetic
                .validate()
                .map_err(|e| config_error("data.synthetic", e.to_string()))?;
        }
        let m = &self.model;
        for (key, v) in [
            ("embed_dim", m.embed_dim),
            ("encoder_dim", m.encoder_dim),
            ("hidden_units", m.hidden_units),
            ("max_seq_len", m.max_seq_len),
        ] {
            if v == 0 {
                return Err(config_error(format!("model.{key}"), "must be positive"));
            }
        }
        self.train.validate().map_err(|e| config_error("train", e.to_string()))?;
        let a = &self.attribution;
        if a.methods.is_empty() {
            return Err(config_error("attribution.methods", "at least one method required"));
        }
        for (i, m) in a.methods.iter().enumerate() {
            if a.methods[..i].contains(m) {
                return Err(config_error(format!("attribution.methods[{i}]"), format!("duplicate method {m}")));
            }
        }
        if a.reductions.is_empty() {
            return Err(config_error("attribution.reductions", "at least one reduction required"));
        }
        for (i, r) in a.reductions.iter().enumerate() {
            if *r == Reduction::None {
                return Err(config_error(format!("attribution.reductions[{i}]"), "expected l2 or input_dot_grad"));
            }
            if a.reductions[..i].contains(r) {
                return Err(config_error(format!("attribution.reductions[{i}]"), "duplicate reduction"));
            }
        }
        if a.sg_iterations == 0 {
            return Err(config_error("attribution.sg_iterations", "must be >= 1"));
        }
        if a.ig_steps == 0 {
            return Err(config_error("attribution.ig_steps", "must be >= 1"));
        }
        if a.sg_sigma_grid.is_empty() {
            return Err(config_error("attribution.sg_sigma_grid", "grid must be non-empty"));
        }
        if let Some(i) = a.sg_sigma_grid.iter().position(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(config_error(format!("attribution.sg_sigma_grid[{i}]"), "sigma must be >= 0"));
        }
        let e = &self.evaluation;
        if e.eval_subsample == 0 {
            return Err(config_error("evaluation.eval_subsample", "must be >= 1"));
        }
        if e.k_percent.is_empty() {
            return Err(config_error("evaluation.k_percent", "at least one K required"));
        }
        if let Some(i) = e.k_percent.iter().position(|k| !(*k > 0.0 && *k <= 100.0)) {
            return Err(config_error(format!("evaluation.k_percent[{i}]"), "must lie in (0, 100]"));
        }
        if !(e.within_units >= 0.0) {
            return Err(config_error("evaluation.within_units", "must be >= 0"));
        }
        if !self.debug_force_same_head_seed {
            for r in 0..self.replicates {
                let s = self.resolved_seeds(r);
                if s.first_head == s.second_head {
                    return Err(config_error(
                        "seeds.second_head",
                        "FirstInit and SecondInit head seeds must differ (debug_force_same_head_seed overrides)",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Seeds for replicate `r`. Data, split, subsample and encoder seeds
    /// are shared by all replicates.
    pub fn resolved_seeds(&self, r: usize) -> ResolvedSeeds {
        let g = self.seed;
        let r = r as u64;
        let first_head = match self.seeds.first_head {
            Some(s) => s.wrapping_add(r),
            None => seed::derive(g, Stream::FirstHead, r),
        };
        let second_head = if self.debug_force_same_head_seed {
            first_head
        } else {
            match self.seeds.second_head {
                Some(s) => s.wrapping_add(r),
                None => seed::derive(g, Stream::SecondHead, r),
            }
        };
        let rand_head = match self.seeds.rand_head {
            Some(s) => s.wrapping_add(r),
            None => seed::derive(g, Stream::RandHead, r),
        };
        let shuffle = seed::derive(g, Stream::Train, self.train.seed);
        ResolvedSeeds {
            data: self.seeds.data.unwrap_or_else(|| seed::derive(g, Stream::Data, 0)),
            split: seed::derive(g, Stream::Split, 0),
            subsample: seed::derive(g, Stream::Subsample, 0),
            encoder: seed::derive(g, Stream::Encoder, 0),
            pretrain_head: seed::derive(g, Stream::PretrainHead, 0),
            first_head,
            second_head,
            rand_head,
            shuffle,
            second_shuffle: if self.distinct_shuffle_seeds {
                seed::derive(shuffle, Stream::SecondHead, r)
            } else {
                shuffle
            },
            smoothgrad: seed::derive(g, Stream::SmoothGrad, r),
            kernel_shap: seed::derive(g, Stream::KernelShap, r),
            random: seed::derive(g, Stream::Random, r),
        }
    }
}
