//! Experiment configuration and named presets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crp::{CrpParams, NewClassCount};
use crate::encoder::PretrainConfig;
use crate::error::{FlowrError, Result};
use crate::gaussian::NoiseModel;
use crate::meta::{EpisodeConfig, MetaLossConfig, MetaTrainConfig, Setting};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub setting: Setting,
    /// Embedding width.
    pub dim: usize,
    /// CRP discount.
    pub a: f64,
    /// Initial CRP concentration.
    pub b_init: f64,
    /// CRP numerator of a class that has not been observed yet.
    pub empty_class_mass: f64,
    pub new_class_count: NewClassCount,
    pub noise_variance: f64,
    /// Trace-regularizer weight in pre-training.
    pub beta: f64,
    /// Adaptation-loss weight in meta-training.
    pub lambda_w: f64,
    pub pretrain_step_size: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub meta_step_size: f64,
    pub meta_steps: usize,
    pub meta_batch_size: usize,
    /// Teacher-forced sequential query loss instead of the frozen one.
    pub sequential_meta: bool,
    pub train_episode: EpisodeConfig,
    pub eval_episode: EpisodeConfig,
    pub eval_episodes: usize,
    /// Large context: dataset classes `1..=n_known_classes` are known-known.
    pub n_known_classes: usize,
    pub fine_tune_steps: usize,
    pub fine_tune_step_size: f64,
    pub seed: u64,
    /// Unknown-unknown detection TPR of the reported operating point.
    pub tpr: f64,
}

impl ExperimentConfig {
    /// Published small-context settings: 40 support and 10 novel
    /// classes per training task, 10 + 5 classes with 10 queries each at test.
    pub fn sc_paper() -> Self {
        Self {
            setting: Setting::SmallContext,
            dim: 64,
            a: 0.5,
            b_init: 1.0,
            empty_class_mass: 1e-3,
            new_class_count: NewClassCount::AppendThenIncrement,
            noise_variance: 0.5,
            beta: 0.1,
            lambda_w: 0.1,
            pretrain_step_size: 1e-3,
            pretrain_epochs: 10,
            pretrain_batch_size: 64,
            meta_step_size: 1e-3,
            meta_steps: 1000,
            meta_batch_size: 1,
            sequential_meta: false,
            train_episode: EpisodeConfig {
                n_support_classes: 40,
                shots_min: 1,
                shots_max: 10,
                n_novel_classes: 10,
                queries_per_class: 10,
            },
            eval_episode: EpisodeConfig {
                n_support_classes: 10,
                shots_min: 1,
                shots_max: 10,
                n_novel_classes: 5,
                queries_per_class: 10,
            },
            eval_episodes: 1000,
            n_known_classes: 0,
            fine_tune_steps: 0,
            fine_tune_step_size: 1e-3,
            seed: 0,
            tpr: 0.15,
        }
    }

    /// Large-context settings: 64 known-known classes carried forward plus
    /// 5 novel classes, 10 queries per class.
    pub fn lc_paper() -> Self {
        let episode = EpisodeConfig {
            n_support_classes: 0,
            shots_min: 1,
            shots_max: 1,
            n_novel_classes: 5,
            queries_per_class: 10,
        };
        Self {
            setting: Setting::LargeContext,
            train_episode: episode,
            eval_episode: episode,
            n_known_classes: 64,
            tpr: 0.6,
            ..Self::sc_paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "sc-paper" => Ok(Self::sc_paper()),
            "lc-paper" => Ok(Self::lc_paper()),
            other => Err(FlowrError::Config(format!(
                "unknown preset '{other}' (expected sc-paper or lc-paper)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim as f64),
            ("noise_variance", self.noise_variance),
            ("meta_batch_size", self.meta_batch_size as f64),
            ("pretrain_batch_size", self.pretrain_batch_size as f64),
        ];
        for (name, v) in positive {
            if v.is_nan() || v <= 0.0 {
                return Err(FlowrError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.tpr > 0.0 && self.tpr <= 1.0) {
            return Err(FlowrError::Config(format!("tpr must be in (0, 1], got {}", self.tpr)));
        }
        if self.empty_class_mass < 0.0 || self.beta < 0.0 || self.lambda_w < 0.0 {
            return Err(FlowrError::Config(
                "empty_class_mass, beta and lambda_w must be non-negative".into(),
            ));
        }
        self.crp()?;
        self.train_episode.validate()?;
        self.eval_episode.validate()?;
        if self.setting == Setting::LargeContext && self.n_known_classes == 0 {
            return Err(FlowrError::Config("large context needs n_known_classes >= 1".into()));
        }
        Ok(())
    }

    pub fn crp(&self) -> Result<CrpParams> {
        Ok(CrpParams::with_b(self.a, self.b_init)?
            .with_empty_class_mass(self.empty_class_mass)
            .with_new_class_count(self.new_class_count))
    }

    pub fn noise(&self) -> Result<NoiseModel> {
        NoiseModel::new(self.noise_variance)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            embed_dim: self.dim,
            beta: self.beta,
            step_size: self.pretrain_step_size,
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            seed: self.seed,
        }
    }

    pub fn meta_train_config(&self) -> MetaTrainConfig {
        MetaTrainConfig {
            setting: self.setting,
            episode: self.train_episode,
            steps: self.meta_steps,
            batch_size: self.meta_batch_size,
            step_size: self.meta_step_size,
            loss: MetaLossConfig {
                lambda_w: self.lambda_w,
                sequential: self.sequential_meta,
            },
            seed: self.seed,
            known_classes: self.known_classes(),
        }
    }

    /// Dataset labels of the known-known classes (empty in the small context).
    pub fn known_classes(&self) -> Vec<usize> {
        match self.setting {
            Setting::SmallContext => Vec::new(),
            Setting::LargeContext => (1..=self.n_known_classes).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| FlowrError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }
}
