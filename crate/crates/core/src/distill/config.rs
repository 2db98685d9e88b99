use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LossWeights;
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TauPlacement};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

/// Training settings read from a TOML file. Unset keys keep their
/// defaults; `lr` and `batch_size` default per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub time_steps: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    pub tau: f64,
    pub tau_placement: TauPlacement,
    pub thr_general: f64,
    pub thr_ssa: f64,
    pub decay: f64,
    pub alpha: f64,

    pub sigma1: f64,
    pub sigma2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub squared_norm: bool,
    pub skip_align_first_k: usize,
    pub reinit_align: bool,

    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub batch_size: Option<usize>,
    pub steps: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub seed: u64,

    pub teacher_layers: usize,
    pub teacher_dim: usize,
    pub augment_copies: usize,
    pub p_mask: f64,
    pub p_pos: f64,
    pub p_ng: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let w = LossWeights::default();
        let a = AugmentConfig::default();
        Self {
            depth: m.depth,
            hidden_dim: m.hidden_dim,
            heads: m.heads,
            time_steps: m.time_steps,
            max_len: m.max_len,
            ffn_mult: m.ffn_mult,
            tau: m.tau,
            tau_placement: m.tau_placement,
            thr_general: m.thr_general,
            thr_ssa: m.thr_ssa,
            decay: m.decay,
            alpha: m.surrogate_alpha,
            sigma1: w.sigma1,
            sigma2: w.sigma2,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            lambda4: w.lambda4,
            squared_norm: false,
            skip_align_first_k: 0,
            reinit_align: false,
            lr: None,
            weight_decay: 5e-3,
            batch_size: None,
            steps: 1000,
            grad_clip: 0.0,
            seed: 0,
            teacher_layers: 12,
            teacher_dim: 768,
            augment_copies: 0,
            p_mask: a.p_mask,
            p_pos: a.p_pos,
            p_ng: a.p_ng,
        }
    }
}

impl TrainConfig {
    /// Settings sized for a laptop run on the synthetic task.
    pub fn desk() -> Self {
        Self {
            depth: 2,
            hidden_dim: 32,
            heads: 2,
            max_len: 16,
            teacher_layers: 4,
            teacher_dim: 48,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        self.augment().validate()?;
        if self.lr.is_some_and(|lr| !(lr > 0.0)) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("weight_decay and grad_clip must be >= 0".into()));
        }
        if self.teacher_layers == 0 || self.teacher_dim == 0 {
            return Err(Error::Config("teacher_layers and teacher_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_for(&self, stage: Stage) -> f64 {
        self.lr.unwrap_or(match stage {
            Stage::One => 5e-4,
            Stage::Two => 5e-5,
        })
    }

    pub fn batch_size_for(&self, stage: Stage) -> usize {
        self.batch_size.unwrap_or(match stage {
            Stage::One => 128,
            Stage::Two => 32,
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            sigma1: self.sigma1,
            sigma2: self.sigma2,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            lambda4: self.lambda4,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            p_mask: self.p_mask,
            p_pos: self.p_pos,
            p_ng: self.p_ng,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, vocab_size: usize, num_classes: usize, pad_id: u32) -> Result<ModelConfig> {
        let m = ModelConfig {
            depth: self.depth,
            hidden_dim: self.hidden_dim,
            heads: self.heads,
            time_steps: self.time_steps,
            max_len: self.max_len,
            vocab_size,
            num_classes,
            tau: self.tau,
            tau_placement: self.tau_placement,
            thr_general: self.thr_general,
            thr_ssa: self.thr_ssa,
            decay: self.decay,
            surrogate_alpha: self.alpha,
            ffn_mult: self.ffn_mult,
            pad_id,
        };
        m.validate()?;
        Ok(m)
    }
}
