use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snn::LifParams;

/// Where the attention scaling factor is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauPlacement {
    /// `Linear((Q K^T V) * tau)`.
    #[default]
    Product,
    /// `Linear(Q K^T V) * tau`.
    AfterLinear,
}

impl TauPlacement {
    pub fn as_str(self) -> &'static str {
        match self {
            TauPlacement::Product => "product",
            TauPlacement::AfterLinear => "after_linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "product" => Some(TauPlacement::Product),
            "after_linear" => Some(TauPlacement::AfterLinear),
            _ => None,
        }
    }
}

/// Architecture and neuron hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of spike transformer blocks.
    pub depth: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub time_steps: usize,
    /// Padded sequence length.
    pub max_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Attention scaling factor.
    pub tau: f64,
    pub tau_placement: TauPlacement,
    /// Threshold for neurons outside the attention block.
    pub thr_general: f64,
    /// Threshold for neurons inside the attention block.
    pub thr_ssa: f64,
    pub decay: f64,
    pub surrogate_alpha: f64,
    pub ffn_mult: usize,
    pub pad_id: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 12,
            hidden_dim: 768,
            heads: 8,
            time_steps: 4,
            max_len: 256,
            vocab_size: 28996,
            num_classes: 2,
            tau: 0.125,
            tau_placement: TauPlacement::Product,
            thr_general: 1.0,
            thr_ssa: 0.25,
            decay: 0.9,
            surrogate_alpha: 2.0,
            ffn_mult: 4,
            pad_id: 0,
        }
    }
}

impl ModelConfig {
    /// Small geometry that trains in minutes on one core.
    pub fn desk(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            depth: 2,
            hidden_dim: 32,
            heads: 2,
            time_steps: 4,
            max_len: 16,
            vocab_size,
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth < 1 {
            return fail("depth must be >= 1".into());
        }
        if self.time_steps < 1 {
            return fail("time_steps must be >= 1".into());
        }
        if self.hidden_dim == 0 || self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.max_len == 0 || self.vocab_size == 0 || self.num_classes == 0 || self.ffn_mult == 0 {
            return fail("max_len, vocab_size, num_classes and ffn_mult must be positive".into());
        }
        if (self.pad_id as usize) >= self.vocab_size {
            return fail(format!("pad_id {} outside vocabulary", self.pad_id));
        }
        if !(self.thr_general > 0.0 && self.thr_ssa > 0.0) {
            return fail("thresholds must be > 0".into());
        }
        self.general_lif().validate()?;
        self.ssa_lif().validate()?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden_dim * self.ffn_mult
    }

    pub fn general_lif(&self) -> LifParams {
        LifParams {
            threshold: self.thr_general,
            decay: self.decay,
            surrogate_alpha: self.surrogate_alpha,
            ..LifParams::default()
        }
    }

    pub fn ssa_lif(&self) -> LifParams {
        LifParams {
            threshold: self.thr_ssa,
            ..self.general_lif()
        }
    }

    /// `key value` pairs in a fixed order, used by the checkpoint header.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("depth", self.depth.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("time_steps", self.time_steps.to_string()),
            ("max_len", self.max_len.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("tau", format!("{:?}", self.tau)),
            ("tau_placement", self.tau_placement.as_str().to_string()),
            ("thr_general", format!("{:?}", self.thr_general)),
            ("thr_ssa", format!("{:?}", self.thr_ssa)),
            ("decay", format!("{:?}", self.decay)),
            ("surrogate_alpha", format!("{:?}", self.surrogate_alpha)),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("pad_id", self.pad_id.to_string()),
        ]
    }

    pub fn set_pair(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {k}")))
        }
        match key {
            "depth" => self.depth = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "time_steps" => self.time_steps = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "tau_placement" => {
                self.tau_placement = TauPlacement::parse(value)
                    .ok_or_else(|| Error::Config(format!("unknown tau_placement {value:?}")))?
            }
            "thr_general" => self.thr_general = num(key, value)?,
            "thr_ssa" => self.thr_ssa = num(key, value)?,
            "decay" => self.decay = num(key, value)?,
            "surrogate_alpha" => self.surrogate_alpha = num(key, value)?,
            "ffn_mult" => self.ffn_mult = num(key, value)?,
            "pad_id" => self.pad_id = num(key, value)?,
            other => return Err(Error::Config(format!("unknown model key {other:?}"))),
        }
        Ok(())
    }
}
