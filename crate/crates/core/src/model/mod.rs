//! The spiking transformer encoder.
//!
//! Token ids are embedded (token + learned position), broadcast over `T`
//! time steps and passed through a LIF layer. Each encoder block applies
//! token-by-token spiking self-attention and a two-layer spiking
//! feed-forward path, each followed by a residual sum; a final LIF layer
//! keeps the block output binary. The classification head averages the last
//! block's spikes over time and non-pad positions and applies an affine map.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use config::{ModelConfig, TauPlacement};
pub use params::{BoundParams, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{unroll_lif, SpikeMode, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) use params::normal_tensor;

pub const LN_EPS: f64 = 1e-5;

/// Binary tensor laid out as `[T, B, N, D]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeTensor {
    shape: [usize; 4],
    data: Vec<u8>,
}

impl SpikeTensor {
    /// Fails if any value is not exactly 0 or 1.
    pub fn from_values(values: &[f64], shape: &[usize]) -> Result<Self> {
        if shape.len() != 4 || shape.iter().product::<usize>() != values.len() {
            return Err(Error::contract(format!(
                "spike tensor needs a [T, B, N, D] shape matching {} values, got {shape:?}",
                values.len()
            )));
        }
        let mut data = Vec::with_capacity(values.len());
        for (i, &v) in values.iter().enumerate() {
            data.push(match v {
                0.0 => 0,
                1.0 => 1,
                _ => {
                    return Err(Error::contract(format!(
                        "spike tensor element {i} is {v}, not 0 or 1"
                    )))
                }
            });
        }
        Ok(Self {
            shape: [shape[0], shape[1], shape[2], shape[3]],
            data,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, t: usize, b: usize, n: usize, d: usize) -> u8 {
        let [_, bs, ns, ds] = self.shape;
        self.data[((t * bs + b) * ns + n) * ds + d]
    }

    /// Fraction of ones over every element and time step.
    pub fn firing_rate(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as usize).sum::<usize>() as f64 / self.data.len() as f64
    }

    /// Spike counts summed over time, shape `[B, N, D]`.
    pub fn time_sum(&self) -> Vec<u32> {
        let inner = self.shape[1] * self.shape[2] * self.shape[3];
        let mut out = vec![0u32; inner];
        for chunk in self.data.chunks(inner) {
            out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v as u32);
        }
        out
    }

    pub fn to_values(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Padded token ids, row-major `[batch, seq_len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<u32>, batch: usize, seq_len: usize) -> Result<Self> {
        if ids.len() != batch * seq_len {
            return Err(Error::input(format!(
                "{} token ids do not fill a {batch}x{seq_len} batch",
                ids.len()
            )));
        }
        Ok(Self { ids, batch, seq_len })
    }

    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [u32]>) -> Result<Self> {
        let mut ids = Vec::new();
        let mut batch = 0;
        let mut seq_len = None;
        for row in rows {
            match seq_len {
                None => seq_len = Some(row.len()),
                Some(l) if l != row.len() => {
                    return Err(Error::input("rows of a token batch differ in length"))
                }
                _ => {}
            }
            ids.extend_from_slice(row);
            batch += 1;
        }
        Self::new(ids, batch, seq_len.unwrap_or(0))
    }

    /// 1 for real tokens, 0 for padding.
    pub fn mask(&self, pad_id: u32) -> Vec<f64> {
        self.ids
            .iter()
            .map(|&id| if id == pad_id { 0.0 } else { 1.0 })
            .collect()
    }
}

/// A spike tensor recorded during the forward pass, kept for firing-rate
/// measurement and binarity checks.
#[derive(Debug, Clone)]
pub struct TracePoint {
    pub name: String,
    pub var: Var,
    /// False for residual sums, whose entries may reach 2.
    pub binary: bool,
}

/// Tape handles produced by [`SpikeBert::forward_on_tape`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub logits: Var,
    /// Output of every encoder block, `[T, B, N, D]`.
    pub layer_features: Vec<Var>,
    /// Float embedding before the first spiking layer, `[B, N, D]`.
    pub embedding: Var,
    pub mask: Vec<f64>,
    pub trace: Vec<TracePoint>,
}

/// Concrete values from a hard-spike forward pass.
#[derive(Debug, Clone)]
pub struct Inference {
    pub logits: Tensor,
    pub layer_features: Vec<SpikeTensor>,
    pub embedding: Tensor,
    pub trace: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeBert {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl SpikeBert {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.hidden_dim;
        let f = config.ffn_dim();
        let c = config.num_classes;
        let lin_std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        params.insert("embed.token", normal_tensor(&mut rng, &[config.vocab_size, d], 1.0));
        params.insert("embed.position", normal_tensor(&mut rng, &[config.max_len, d], 0.1));
        for i in 0..config.depth {
            let p = format!("blocks.{i}");
            for name in ["q", "k", "v"] {
                params.insert(
                    format!("{p}.attn.{name}.weight"),
                    normal_tensor(&mut rng, &[d, d], lin_std(d)),
                );
                insert_norm(&mut params, &format!("{p}.attn.{name}.norm"), d);
            }
            params.insert(format!("{p}.attn.proj.weight"), normal_tensor(&mut rng, &[d, d], lin_std(d)));
            params.insert(format!("{p}.attn.proj.bias"), Tensor::zeros(&[d]));
            insert_norm(&mut params, &format!("{p}.attn.proj.norm"), d);

            params.insert(format!("{p}.ffn.fc1.weight"), normal_tensor(&mut rng, &[d, f], lin_std(d)));
            params.insert(format!("{p}.ffn.fc1.bias"), Tensor::zeros(&[f]));
            insert_norm(&mut params, &format!("{p}.ffn.fc1.norm"), f);
            params.insert(format!("{p}.ffn.fc2.weight"), normal_tensor(&mut rng, &[f, d], lin_std(f)));
            params.insert(format!("{p}.ffn.fc2.bias"), Tensor::zeros(&[d]));
            insert_norm(&mut params, &format!("{p}.ffn.fc2.norm"), d);
        }
        params.insert("head.weight", normal_tensor(&mut rng, &[d, c], lin_std(d)));
        params.insert("head.bias", Tensor::zeros(&[c]));
        Ok(Self { config, params })
    }

    /// Check that every architecture parameter exists with the right shape.
    pub fn validate_params(&self) -> Result<()> {
        let c = &self.config;
        let (d, f) = (c.hidden_dim, c.ffn_dim());
        self.params.require("embed.token", &[c.vocab_size, d])?;
        self.params.require("embed.position", &[c.max_len, d])?;
        for i in 0..c.depth {
            let p = format!("blocks.{i}");
            for name in ["q", "k", "v"] {
                self.params.require(&format!("{p}.attn.{name}.weight"), &[d, d])?;
                self.require_norm(&format!("{p}.attn.{name}.norm"), d)?;
            }
            self.params.require(&format!("{p}.attn.proj.weight"), &[d, d])?;
            self.params.require(&format!("{p}.attn.proj.bias"), &[d])?;
            self.require_norm(&format!("{p}.attn.proj.norm"), d)?;
            self.params.require(&format!("{p}.ffn.fc1.weight"), &[d, f])?;
            self.params.require(&format!("{p}.ffn.fc1.bias"), &[f])?;
            self.require_norm(&format!("{p}.ffn.fc1.norm"), f)?;
            self.params.require(&format!("{p}.ffn.fc2.weight"), &[f, d])?;
            self.params.require(&format!("{p}.ffn.fc2.bias"), &[d])?;
            self.require_norm(&format!("{p}.ffn.fc2.norm"), d)?;
        }
        self.params.require("head.weight", &[d, c.num_classes])?;
        self.params.require("head.bias", &[c.num_classes])?;
        Ok(())
    }

    fn require_norm(&self, prefix: &str, d: usize) -> Result<()> {
        self.params.require(&format!("{prefix}.gain"), &[d])?;
        self.params.require(&format!("{prefix}.bias"), &[d])?;
        Ok(())
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.batch == 0 || batch.seq_len == 0 {
            return Err(Error::input("empty token batch"));
        }
        if batch.seq_len > self.config.max_len {
            return Err(Error::input(format!(
                "sequence length {} exceeds max_len {}",
                batch.seq_len, self.config.max_len
            )));
        }
        if let Some(&bad) = batch
            .ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Float embedding `[B, N, D]` and its spike train `[T, B, N, D]`.
    pub fn embed(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        batch: &TokenBatch,
        mode: SpikeMode,
    ) -> Result<(Var, Var)> {
        self.check_batch(batch)?;
        let (b, n, d) = (batch.batch, batch.seq_len, self.config.hidden_dim);
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let tok = tape.embedding(p.get("embed.token"), &ids);
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let pos = tape.embedding(p.get("embed.position"), &positions);
        let e = tape.add(tok, pos);
        let e = tape.reshape(e, vec![b, n, d]);
        let current = tape.repeat(e, self.config.time_steps);
        let spikes = unroll_lif(tape, current, &self.config.general_lif(), mode);
        Ok((e, spikes))
    }

    fn spiking_linear(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: Var,
        prefix: &str,
        bias: bool,
        ssa: bool,
        mode: SpikeMode,
    ) -> Var {
        let b = bias.then(|| p.get(&format!("{prefix}.bias")));
        let lin = tape.linear(x, p.get(&format!("{prefix}.weight")), b);
        self.norm_spike(tape, p, lin, prefix, ssa, mode)
    }

    fn norm_spike(&self, tape: &mut Tape, p: &BoundParams, x: Var, prefix: &str, ssa: bool, mode: SpikeMode) -> Var {
        let n = tape.layer_norm(
            x,
            p.get(&format!("{prefix}.norm.gain")),
            p.get(&format!("{prefix}.norm.bias")),
            LN_EPS,
        );
        let lif = if ssa {
            self.config.ssa_lif()
        } else {
            self.config.general_lif()
        };
        unroll_lif(tape, n, &lif, mode)
    }

    /// Spiking self-attention over tokens for block `index`. Returns the
    /// binary output and the `(Q, K, V)` spike tensors.
    #[allow(clippy::too_many_arguments)]
    pub fn spiking_self_attention(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        index: usize,
        x: Var,
        mask: &[f64],
        mode: SpikeMode,
    ) -> (Var, [Var; 3]) {
        let pre = format!("blocks.{index}.attn");
        let q = self.spiking_linear(tape, p, x, &format!("{pre}.q"), false, true, mode);
        let k = self.spiking_linear(tape, p, x, &format!("{pre}.k"), false, true, mode);
        let v = self.spiking_linear(tape, p, x, &format!("{pre}.v"), false, true, mode);
        let (inner, outer) = match self.config.tau_placement {
            TauPlacement::Product => (self.config.tau, 1.0),
            TauPlacement::AfterLinear => (1.0, self.config.tau),
        };
        let a = tape.attention(q, k, v, mask, self.config.heads, inner);
        let mut lin = tape.linear(
            a,
            p.get(&format!("{pre}.proj.weight")),
            Some(p.get(&format!("{pre}.proj.bias"))),
        );
        if outer != 1.0 {
            lin = tape.scale(lin, outer);
        }
        let out = self.norm_spike(tape, p, lin, &format!("{pre}.proj"), true, mode);
        (out, [q, k, v])
    }

    /// One spike transformer block.
    pub fn encoder_block(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        index: usize,
        x: Var,
        mask: &[f64],
        mode: SpikeMode,
        trace: &mut Vec<TracePoint>,
    ) -> Var {
        let pre = format!("blocks.{index}");
        let (attn, [q, k, v]) = self.spiking_self_attention(tape, p, index, x, mask, mode);
        let y1 = tape.add(x, attn);
        let h = self.spiking_linear(tape, p, y1, &format!("{pre}.ffn.fc1"), true, false, mode);
        let f = self.spiking_linear(tape, p, h, &format!("{pre}.ffn.fc2"), true, false, mode);
        let z = tape.add(y1, f);
        let out = unroll_lif(tape, z, &self.config.general_lif(), mode);

        let mut push = |name: &str, var, binary| {
            trace.push(TracePoint {
                name: format!("{pre}.{name}"),
                var,
                binary,
            })
        };
        push("input", x, true);
        push("q", q, true);
        push("k", k, true);
        push("v", v, true);
        push("attn", attn, true);
        push("residual", y1, false);
        push("hidden", h, true);
        push("ffn", f, true);
        push("output", out, true);
        out
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        batch: &TokenBatch,
        mode: SpikeMode,
    ) -> Result<ForwardVars> {
        let mask = batch.mask(self.config.pad_id);
        let (embedding, mut x) = self.embed(tape, p, batch, mode)?;
        let mut trace = vec![TracePoint {
            name: "embed.spikes".into(),
            var: x,
            binary: true,
        }];
        let mut layer_features = Vec::with_capacity(self.config.depth);
        for i in 0..self.config.depth {
            x = self.encoder_block(tape, p, i, x, &mask, mode, &mut trace);
            layer_features.push(x);
        }
        let pooled = tape.masked_mean_pool(x, &mask);
        let logits = tape.linear(pooled, p.get("head.weight"), Some(p.get("head.bias")));
        Ok(ForwardVars {
            logits,
            layer_features,
            embedding,
            mask,
            trace,
        })
    }

    /// Hard-spike forward pass returning concrete values.
    pub fn forward(&self, batch: &TokenBatch) -> Result<Inference> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let out = self.forward_on_tape(&mut tape, &p, batch, SpikeMode::Hard)?;
        let layer_features = out
            .layer_features
            .iter()
            .map(|&v| SpikeTensor::from_values(tape.value(v), tape.shape(v)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Inference {
            logits: tape.tensor(out.logits),
            layer_features,
            embedding: tape.tensor(out.embedding),
            trace: out
                .trace
                .iter()
                .map(|t| (t.name.clone(), tape.tensor(t.var)))
                .collect(),
        })
    }

    /// Argmax class per row.
    pub fn predict(&self, batch: &TokenBatch) -> Result<Vec<usize>> {
        let inf = self.forward(batch)?;
        let c = self.config.num_classes;
        Ok(inf
            .logits
            .data
            .chunks(c)
            .map(argmax)
            .collect())
    }
}

fn insert_norm(params: &mut ParamStore, prefix: &str, d: usize) {
    params.insert(format!("{prefix}.gain"), Tensor::filled(&[d], 1.0));
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]));
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
