//! Theoretical energy estimate: dense multiply-accumulates for the
//! embedding, firing-rate-scaled accumulates for everything spiking.
//!
//! FLOPs count one multiply-accumulate as one operation, per sample of
//! `N = max_len` tokens:
//!
//! | layer          | kind          | FLOPs     | input rate from |
//! |----------------|---------------|-----------|-----------------|
//! | embedding      | embedding_mac | N·D       | (dense)         |
//! | attn.q/k/v     | spiking_fc    | N·D·D     | block input     |
//! | attn.qk        | ssa           | N·N·D     | Q spikes        |
//! | attn.av        | ssa           | N·N·D     | V spikes        |
//! | attn.proj      | spiking_fc    | N·D·D     | V spikes        |
//! | ffn.fc1        | spiking_fc    | N·D·F     | residual sum    |
//! | ffn.fc2        | spiking_fc    | N·F·D     | FFN hidden      |
//! | head           | spiking_fc    | N·D·C     | last block      |
//!
//! Token lookups are free. For the residual sum, whose entries may be 2,
//! the rate is the fraction of nonzero entries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SpikeBert, TokenBatch};

/// Picojoules per multiply-accumulate.
pub const E_MAC_PJ: f64 = 4.6;
/// Picojoules per accumulate.
pub const E_AC_PJ: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    EmbeddingMac,
    SpikingFc,
    Ssa,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::EmbeddingMac => "embedding_mac",
            LayerKind::SpikingFc => "spiking_fc",
            LayerKind::Ssa => "ssa",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfile {
    pub name: String,
    pub kind: LayerKind,
    pub flops: u64,
    pub firing_rate: f64,
    pub time_steps: usize,
}

impl LayerProfile {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.firing_rate) {
            return Err(Error::contract(format!(
                "{}: firing rate {} outside [0, 1]",
                self.name, self.firing_rate
            )));
        }
        Ok(())
    }
}

/// `T * rate * FLOPs`, rounded to the nearest integer.
pub fn sops(profile: &LayerProfile) -> Result<u64> {
    if profile.kind == LayerKind::EmbeddingMac {
        return Err(Error::contract(format!(
            "{} is a dense embedding layer and has no synaptic operations",
            profile.name
        )));
    }
    profile.validate()?;
    Ok((profile.time_steps as f64 * profile.firing_rate * profile.flops as f64).round() as u64)
}

/// Energy of a dense network performing `flops` multiply-accumulates, in mJ.
pub fn ann_energy_mj(flops: f64) -> f64 {
    flops * E_MAC_PJ * 1e-9
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEnergy {
    pub name: String,
    pub kind: LayerKind,
    pub flops: u64,
    pub firing_rate: f64,
    /// `None` for the dense embedding layer.
    pub sops: Option<u64>,
    pub energy_pj: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub layers: Vec<LayerEnergy>,
    pub embedding_flops: u64,
    pub total_sops: u64,
    pub total_flops: u64,
    pub mac_mj: f64,
    pub ac_mj: f64,
    pub total_mj: f64,
}

pub fn snn_energy(profiles: &[LayerProfile]) -> Result<EnergyReport> {
    let n_emb = profiles.iter().filter(|p| p.kind == LayerKind::EmbeddingMac).count();
    if n_emb != 1 {
        return Err(Error::contract(format!(
            "expected exactly one embedding_mac profile, found {n_emb}"
        )));
    }
    let mut layers = Vec::with_capacity(profiles.len());
    let (mut emb, mut total_sops, mut total_flops) = (0u64, 0u64, 0u64);
    for p in profiles {
        p.validate()?;
        total_flops += p.flops;
        let (s, pj) = if p.kind == LayerKind::EmbeddingMac {
            emb = p.flops;
            (None, p.flops as f64 * E_MAC_PJ)
        } else {
            let s = sops(p)?;
            total_sops += s;
            (Some(s), s as f64 * E_AC_PJ)
        };
        layers.push(LayerEnergy {
            name: p.name.clone(),
            kind: p.kind,
            flops: p.flops,
            firing_rate: p.firing_rate,
            sops: s,
            energy_pj: pj,
        });
    }
    let mac_mj = emb as f64 * E_MAC_PJ * 1e-9;
    let ac_mj = total_sops as f64 * E_AC_PJ * 1e-9;
    Ok(EnergyReport {
        layers,
        embedding_flops: emb,
        total_sops,
        total_flops,
        mac_mj,
        ac_mj,
        total_mj: mac_mj + ac_mj,
    })
}

/// Mean of a binary tensor; for non-binary tensors, the fraction of
/// nonzero entries.
pub fn firing_rate(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v != 0.0).count() as f64 / values.len() as f64
}

/// Rate of every traced activation in a hard forward pass over `batch`,
/// keyed by trace name (`embed.spikes`, `blocks.{i}.q`, ...).
pub fn measure_firing_rates(model: &SpikeBert, batch: &TokenBatch) -> Result<BTreeMap<String, f64>> {
    let inf = model.forward(batch)?;
    Ok(inf
        .trace
        .iter()
        .map(|(name, t)| (name.clone(), firing_rate(&t.data)))
        .collect())
}

/// One profile per layer of `config`, with rates looked up in `rates`.
pub fn model_profiles(config: &ModelConfig, rates: &BTreeMap<String, f64>) -> Result<Vec<LayerProfile>> {
    let (n, d, f, c) = (
        config.max_len as u64,
        config.hidden_dim as u64,
        config.ffn_dim() as u64,
        config.num_classes as u64,
    );
    let t = config.time_steps;
    let rate = |key: &str| {
        rates
            .get(key)
            .copied()
            .ok_or_else(|| Error::contract(format!("no firing rate measured for {key}")))
    };
    let mut out = vec![LayerProfile {
        name: "embedding".into(),
        kind: LayerKind::EmbeddingMac,
        flops: n * d,
        firing_rate: 1.0,
        time_steps: 1,
    }];
    let mut push = |name: String, kind, flops, firing_rate| {
        out.push(LayerProfile {
            name,
            kind,
            flops,
            firing_rate,
            time_steps: t,
        })
    };
    for i in 0..config.depth {
        let b = format!("blocks.{i}");
        let input = rate(&format!("{b}.input"))?;
        for m in ["q", "k", "v"] {
            push(format!("{b}.attn.{m}"), LayerKind::SpikingFc, n * d * d, input);
        }
        let v = rate(&format!("{b}.v"))?;
        push(format!("{b}.attn.qk"), LayerKind::Ssa, n * n * d, rate(&format!("{b}.q"))?);
        push(format!("{b}.attn.av"), LayerKind::Ssa, n * n * d, v);
        push(format!("{b}.attn.proj"), LayerKind::SpikingFc, n * d * d, v);
        push(format!("{b}.ffn.fc1"), LayerKind::SpikingFc, n * d * f, rate(&format!("{b}.residual"))?);
        push(format!("{b}.ffn.fc2"), LayerKind::SpikingFc, n * f * d, rate(&format!("{b}.hidden"))?);
    }
    let last = rate(&format!("blocks.{}.output", config.depth - 1))?;
    push("head".into(), LayerKind::SpikingFc, n * d * c, last);
    Ok(out)
}

impl EnergyReport {
    pub fn render_text(&self) -> String {
        let w = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<w$}  {:<13}  {:>14}  {:>8}  {:>14}  {:>14}",
            "layer", "kind", "flops", "rate", "sops", "energy_pj"
        );
        for l in &self.layers {
            let sops = l.sops.map_or("-".to_string(), |v| v.to_string());
            let _ = writeln!(
                s,
                "{:<w$}  {:<13}  {:>14}  {:>8.4}  {:>14}  {:>14.1}",
                l.name,
                l.kind.as_str(),
                l.flops,
                l.firing_rate,
                sops,
                l.energy_pj
            );
        }
        let ann = ann_energy_mj(self.total_flops as f64);
        let _ = writeln!(s, "total sops      {}", self.total_sops);
        let _ = writeln!(s, "embedding mac   {:.6} mJ", self.mac_mj);
        let _ = writeln!(s, "spiking ac      {:.6} mJ", self.ac_mj);
        let _ = writeln!(s, "total           {:.6} mJ", self.total_mj);
        let _ = writeln!(s, "dense reference {:.6} mJ ({} flops)", ann, self.total_flops);
        s
    }

    /// `key=value` lines.
    pub fn render_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "e_mac_pj={E_MAC_PJ}");
        let _ = writeln!(s, "e_ac_pj={E_AC_PJ}");
        let _ = writeln!(s, "total_flops={}", self.total_flops);
        let _ = writeln!(s, "total_sops={}", self.total_sops);
        let _ = writeln!(s, "embedding_flops={}", self.embedding_flops);
        let _ = writeln!(s, "mac_mj={}", self.mac_mj);
        let _ = writeln!(s, "ac_mj={}", self.ac_mj);
        let _ = writeln!(s, "total_mj={}", self.total_mj);
        let _ = writeln!(s, "ann_mj={}", ann_energy_mj(self.total_flops as f64));
        for l in &self.layers {
            let _ = writeln!(s, "layer.{}.kind={}", l.name, l.kind.as_str());
            let _ = writeln!(s, "layer.{}.flops={}", l.name, l.flops);
            let _ = writeln!(s, "layer.{}.firing_rate={}", l.name, l.firing_rate);
            if let Some(v) = l.sops {
                let _ = writeln!(s, "layer.{}.sops={v}", l.name);
            }
            let _ = writeln!(s, "layer.{}.energy_pj={}", l.name, l.energy_pj);
        }
        s
    }
}
