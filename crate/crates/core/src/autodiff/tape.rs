use crate::error::{Error, Result};
use crate::snn::{heaviside_scalar, soft_spike_scalar, surrogate_grad_scalar};

use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How spike nonlinearities behave in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeMode {
    /// Heaviside forward, surrogate backward.
    #[default]
    Hard,
    /// Arctan forward, exact derivative backward. Used for gradient checks.
    Soft,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Spike {
        u: Var,
        threshold: f64,
        alpha: f64,
    },
    Select(Var, usize),
    Stack(Vec<Var>),
    Repeat(Var, usize),
    SumOuter(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Vec<f64>,
        heads: usize,
        scale: f64,
    },
    MaskedMeanPool {
        x: Var,
        mask: Vec<f64>,
    },
    SampleNorm {
        x: Var,
        squared: bool,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    KlDiv {
        logits: Var,
        target: Vec<f64>,
    },
    L2Norm(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run operation record. Nodes are appended in evaluation order,
/// so the node list is always topologically sorted.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient buffer per node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros of length `len` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let n = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, n, inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            data: n.value.clone(),
            shape: n.shape.clone(),
            grad: None,
        }
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "not a scalar");
        val[0]
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Var {
        assert_eq!(data.len(), numel(&shape), "constant shape mismatch");
        self.push(data, shape, Op::Leaf, false)
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (value, shape) = (n.value.clone(), n.shape.clone());
        self.push(value, shape, Op::Leaf, false)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(na.shape, nb.shape, "elementwise shape mismatch");
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let shape = na.shape.clone();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, shape, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| x * c).collect();
        let shape = n.shape.clone();
        let ng = self.ng(a);
        self.push(value, shape, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| x + c).collect();
        let shape = n.shape.clone();
        let ng = self.ng(a);
        self.push(value, shape, Op::AddScalar(a), ng)
    }

    /// `a [m, k] x b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul shapes {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, vec![m, n], Op::MatMul(a, b), ng)
    }

    /// Affine map over the last axis: `x [..., in] · w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let d_in = *sx.last().expect("linear input must have an axis");
        assert!(sw.len() == 2 && sw[0] == d_in, "linear weight {sw:?} vs input {sx:?}");
        let d_out = sw[1];
        let rows = numel(&sx) / d_in.max(1);
        let mut out = vec![0.0; rows * d_out];
        gemm_nn(&self.nodes[x.0].value, &self.nodes[w.0].value, &mut out, rows, d_in, d_out);
        if let Some(b) = b {
            let bias = &self.nodes[b.0].value;
            assert_eq!(bias.len(), d_out, "bias length");
            for row in out.chunks_mut(d_out) {
                row.iter_mut().zip(bias).for_each(|(o, bb)| *o += bb);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = d_out;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, shape, Op::Linear { x, w, b }, ng)
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        assert_eq!(self.value(gain).len(), d);
        assert_eq!(self.value(bias).len(), d);
        let xs = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let bb = &self.nodes[bias.0].value;
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bb[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Spike nonlinearity on membrane potential `u`.
    pub fn spike(&mut self, u: Var, threshold: f64, alpha: f64, mode: SpikeMode) -> Var {
        let n = &self.nodes[u.0];
        let value = match mode {
            SpikeMode::Hard => n.value.iter().map(|&v| heaviside_scalar(v, threshold)).collect(),
            SpikeMode::Soft => n
                .value
                .iter()
                .map(|&v| soft_spike_scalar(v - threshold, alpha))
                .collect(),
        };
        let shape = n.shape.clone();
        let ng = self.ng(u);
        self.push(value, shape, Op::Spike { u, threshold, alpha }, ng)
    }

    /// `x[index]` along the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(index < shape[0], "select index out of range");
        let inner = numel(&shape[1..]);
        let value = self.nodes[x.0].value[index * inner..(index + 1) * inner].to_vec();
        let ng = self.ng(x);
        self.push(value, shape[1..].to_vec(), Op::Select(x, index), ng)
    }

    /// Stack equally shaped values along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "stack of nothing");
        let inner_shape = self.shape(xs[0]).to_vec();
        let mut value = Vec::with_capacity(numel(&inner_shape) * xs.len());
        for &x in xs {
            assert_eq!(self.shape(x), inner_shape.as_slice(), "stack shape mismatch");
            value.extend_from_slice(self.value(x));
        }
        let mut shape = vec![xs.len()];
        shape.extend(inner_shape);
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(value, shape, Op::Stack(xs.to_vec()), ng)
    }

    /// Broadcast along a new leading axis of length `times`.
    pub fn repeat(&mut self, x: Var, times: usize) -> Var {
        let src = &self.nodes[x.0];
        let mut value = Vec::with_capacity(src.value.len() * times);
        for _ in 0..times {
            value.extend_from_slice(&src.value);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(&src.shape);
        let ng = self.ng(x);
        self.push(value, shape, Op::Repeat(x, times), ng)
    }

    /// Sum over the leading axis.
    pub fn sum_outer(&mut self, x: Var) -> Var {
        self.sum_axis_impl(x, 0, false, true)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        self.sum_axis_impl(x, axis, false, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        self.sum_axis_impl(x, axis, true, false)
    }

    fn sum_axis_impl(&mut self, x: Var, axis: usize, mean: bool, outer: bool) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(axis < shape.len(), "axis out of range");
        let (o, n, i) = split_axis(&shape, axis);
        let src = &self.nodes[x.0].value;
        let mut out = vec![0.0; o * i];
        for a in 0..o {
            for k in 0..n {
                let base = (a * n + k) * i;
                for c in 0..i {
                    out[a * i + c] += src[base + c];
                }
            }
        }
        if mean {
            let inv = 1.0 / n as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let op = if outer {
            Op::SumOuter(x)
        } else if mean {
            Op::MeanAxis(x, axis)
        } else {
            Op::SumAxis(x, axis)
        };
        let ng = self.ng(x);
        self.push(out, new_shape, op, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![s], vec![], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.ng(x);
        self.push(vec![s], vec![], Op::Mean(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        assert_eq!(numel(&shape), self.value(x).len(), "reshape changes element count");
        let value = self.value(x).to_vec();
        let ng = self.ng(x);
        self.push(value, shape, Op::Reshape(x), ng)
    }

    /// Row lookup: `table [V, D]` gathered at `ids`, result `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let shape = self.shape(table).to_vec();
        assert_eq!(shape.len(), 2);
        let (v, d) = (shape[0], shape[1]);
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding id {id} >= {v}");
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        self.push(
            out,
            vec![ids.len(), d],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Multi-head token-by-token attention without softmax.
    ///
    /// `q, k, v` have shape `[T, B, N, D]`; `mask` has `B * N` entries (1 for
    /// real tokens, 0 for padding). Scores to padded key positions are zero.
    /// Output per head is `scale * (Q K^T) V`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &[f64], heads: usize, scale: f64) -> Var {
        let shape = self.shape(q).to_vec();
        assert_eq!(shape.len(), 4, "attention expects [T, B, N, D]");
        assert_eq!(self.shape(k), shape.as_slice());
        assert_eq!(self.shape(v), shape.as_slice());
        let (b, n, d) = (shape[1], shape[2], shape[3]);
        assert_eq!(mask.len(), b * n, "mask length");
        assert!(heads > 0 && d % heads == 0, "heads must divide D");
        let dh = d / heads;
        let groups = shape[0] * b;
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let mut out = vec![0.0; qv.len()];
        let mut scores = vec![0.0; n * n];
        for g in 0..groups {
            let bi = g % b;
            let base = g * n * d;
            for h in 0..heads {
                let off = h * dh;
                head_scores(qv, kv, &mask[bi * n..(bi + 1) * n], base, n, d, off, dh, &mut scores);
                for i in 0..n {
                    let orow = base + i * d + off;
                    for m in 0..n {
                        let a = scores[i * n + m];
                        if a == 0.0 {
                            continue;
                        }
                        let vrow = base + m * d + off;
                        for j in 0..dh {
                            out[orow + j] += scale * a * vv[vrow + j];
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            shape,
            Op::Attention {
                q,
                k,
                v,
                mask: mask.to_vec(),
                heads,
                scale,
            },
            ng,
        )
    }

    /// Mean over time and unmasked positions: `[T, B, N, D] -> [B, D]`.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[f64]) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 4);
        let (t, b, n, d) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(mask.len(), b * n);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let count: f64 = mask[bi * n..(bi + 1) * n].iter().sum();
            let denom = (t as f64 * count).max(1.0);
            for ti in 0..t {
                for ni in 0..n {
                    let w = mask[bi * n + ni];
                    if w == 0.0 {
                        continue;
                    }
                    let row = ((ti * b + bi) * n + ni) * d;
                    for j in 0..d {
                        out[bi * d + j] += w * xv[row + j] / denom;
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            out,
            vec![b, d],
            Op::MaskedMeanPool {
                x,
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    /// Frobenius norm of each leading-axis slice: `[B, ...] -> [B]`.
    pub fn sample_norm(&mut self, x: Var, squared: bool) -> Var {
        let shape = self.shape(x).to_vec();
        let b = shape[0];
        let inner = numel(&shape[1..]);
        let xv = &self.nodes[x.0].value;
        let out = (0..b)
            .map(|i| {
                let sq: f64 = xv[i * inner..(i + 1) * inner].iter().map(|v| v * v).sum();
                if squared {
                    sq
                } else {
                    sq.sqrt()
                }
            })
            .collect();
        let ng = self.ng(x);
        self.push(out, vec![b], Op::SampleNorm { x, squared }, ng)
    }

    /// Frobenius norm of the whole value.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        let ng = self.ng(x);
        self.push(vec![n], vec![], Op::L2Norm(x), ng)
    }

    /// Batch-mean cross-entropy of softmax(`logits [B, C]`) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let shape = self.shape(logits).to_vec();
        assert_eq!(shape.len(), 2);
        let (b, c) = (shape[0], shape[1]);
        assert_eq!(labels.len(), b);
        let lv = &self.nodes[logits.0].value;
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < c, "label {y} >= {c}");
            let ls = log_softmax(&lv[i * c..(i + 1) * c]);
            total -= ls[y];
        }
        let ng = self.ng(logits);
        self.push(
            vec![total / b as f64],
            vec![],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            ng,
        )
    }

    /// Batch-mean `KL(target || softmax(logits))` with `target [B, C]` fixed.
    pub fn kl_div(&mut self, logits: Var, target: &[f64]) -> Var {
        let shape = self.shape(logits).to_vec();
        assert_eq!(shape.len(), 2);
        let (b, c) = (shape[0], shape[1]);
        assert_eq!(target.len(), b * c);
        let lv = &self.nodes[logits.0].value;
        let mut total = 0.0;
        for i in 0..b {
            let ls = log_softmax(&lv[i * c..(i + 1) * c]);
            for j in 0..c {
                let p = target[i * c + j];
                if p > 0.0 {
                    total += p * (p.ln() - ls[j]);
                }
            }
        }
        let ng = self.ng(logits);
        self.push(
            vec![total / b as f64],
            vec![],
            Op::KlDiv {
                logits,
                target: target.to_vec(),
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::contract("loss handle is not on this tape"))?;
        if loss_node.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.acc(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) => self.acc(grads, *a, g.to_vec()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g, self.value(*b), &mut da, m, n, k);
                    self.acc(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.value(*a), g, &mut db, m, k, n);
                    self.acc(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (d_in, d_out) = (sw[0], sw[1]);
                let rows = g.len() / d_out;
                if self.ng(*x) {
                    let mut dx = vec![0.0; rows * d_in];
                    gemm_nt(g, self.value(*w), &mut dx, rows, d_out, d_in);
                    self.acc(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; d_in * d_out];
                    gemm_tn(self.value(*x), g, &mut dw, rows, d_in, d_out);
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = vec![0.0; d_out];
                        for row in g.chunks(d_out) {
                            db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                        self.acc(grads, *b, db);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let d = gv.len();
                let rows = g.len() / d;
                if self.ng(*gain) || self.ng(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                            db[j] += g[r * d + j];
                        }
                    }
                    self.acc(grads, *gain, dg);
                    self.acc(grads, *bias, db);
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let inv_d = 1.0 / d as f64;
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            dx[r * d + j] = inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Spike { u, threshold, alpha } => {
                let uv = self.value(*u);
                let du = g
                    .iter()
                    .zip(uv)
                    .map(|(gg, &uu)| gg * surrogate_grad_scalar(uu - threshold, *alpha))
                    .collect();
                self.acc(grads, *u, du);
            }
            Op::Select(x, index) => {
                if self.ng(*x) {
                    let total = self.value(*x).len();
                    let inner = g.len();
                    let mut dx = vec![0.0; total];
                    dx[index * inner..(index + 1) * inner].copy_from_slice(g);
                    self.acc(grads, *x, dx);
                }
            }
            Op::Stack(xs) => {
                let inner = g.len() / xs.len();
                for (i, &x) in xs.iter().enumerate() {
                    self.acc(grads, x, g[i * inner..(i + 1) * inner].to_vec());
                }
            }
            Op::Repeat(x, times) => {
                let inner = g.len() / times;
                let mut dx = vec![0.0; inner];
                for chunk in g.chunks(inner) {
                    dx.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                self.acc(grads, *x, dx);
            }
            Op::SumOuter(x) | Op::SumAxis(x, _) | Op::MeanAxis(x, _) => {
                let axis = match &node.op {
                    Op::SumAxis(_, a) | Op::MeanAxis(_, a) => *a,
                    _ => 0,
                };
                let shape = self.shape(*x);
                let (o, n, i) = split_axis(shape, axis);
                let f = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let mut dx = vec![0.0; o * n * i];
                for a in 0..o {
                    for k in 0..n {
                        let base = (a * n + k) * i;
                        for c in 0..i {
                            dx[base + c] = g[a * i + c] * f;
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::Embedding { table, ids } => {
                let shape = self.shape(*table);
                let d = shape[1];
                let mut dt = vec![0.0; shape[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                self.acc(grads, *table, dt);
            }
            Op::Attention {
                q,
                k,
                v,
                mask,
                heads,
                scale,
            } => self.attention_backward(node, g, grads, (*q, *k, *v), mask, *heads, *scale),
            Op::MaskedMeanPool { x, mask } => {
                let shape = self.shape(*x);
                let (t, b, n, d) = (shape[0], shape[1], shape[2], shape[3]);
                let mut dx = vec![0.0; t * b * n * d];
                for bi in 0..b {
                    let count: f64 = mask[bi * n..(bi + 1) * n].iter().sum();
                    let denom = (t as f64 * count).max(1.0);
                    for ti in 0..t {
                        for ni in 0..n {
                            let w = mask[bi * n + ni];
                            if w == 0.0 {
                                continue;
                            }
                            let row = ((ti * b + bi) * n + ni) * d;
                            for j in 0..d {
                                dx[row + j] = w * g[bi * d + j] / denom;
                            }
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::SampleNorm { x, squared } => {
                let xv = self.value(*x);
                let b = g.len();
                let inner = xv.len() / b.max(1);
                let mut dx = vec![0.0; xv.len()];
                for i in 0..b {
                    let row = &xv[i * inner..(i + 1) * inner];
                    let factor = if *squared {
                        2.0 * g[i]
                    } else if node.value[i] > 0.0 {
                        g[i] / node.value[i]
                    } else {
                        0.0
                    };
                    for (j, &r) in row.iter().enumerate() {
                        dx[i * inner + j] = factor * r;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::L2Norm(x) => {
                let norm = node.value[0];
                let factor = if norm > 0.0 { g[0] / norm } else { 0.0 };
                let dx = self.value(*x).iter().map(|v| v * factor).collect();
                self.acc(grads, *x, dx);
            }
            Op::CrossEntropy { logits, labels } => {
                let c = self.shape(*logits)[1];
                let lv = self.value(*logits);
                let b = labels.len();
                let mut dl = vec![0.0; b * c];
                for (i, &y) in labels.iter().enumerate() {
                    let p = softmax(&lv[i * c..(i + 1) * c]);
                    for j in 0..c {
                        let one = if j == y { 1.0 } else { 0.0 };
                        dl[i * c + j] = g[0] * (p[j] - one) / b as f64;
                    }
                }
                self.acc(grads, *logits, dl);
            }
            Op::KlDiv { logits, target } => {
                let c = self.shape(*logits)[1];
                let lv = self.value(*logits);
                let b = lv.len() / c;
                let mut dl = vec![0.0; b * c];
                for i in 0..b {
                    let q = softmax(&lv[i * c..(i + 1) * c]);
                    let tp = &target[i * c..(i + 1) * c];
                    let mass: f64 = tp.iter().sum();
                    for j in 0..c {
                        dl[i * c + j] = g[0] * (q[j] * mass - tp[j]) / b as f64;
                    }
                }
                self.acc(grads, *logits, dl);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        mask: &[f64],
        heads: usize,
        scale: f64,
    ) {
        let shape = &node.shape;
        let (b, n, d) = (shape[1], shape[2], shape[3]);
        let dh = d / heads;
        let groups = shape[0] * b;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut scores = vec![0.0; n * n];
        let mut dscores = vec![0.0; n * n];
        for gi in 0..groups {
            let bi = gi % b;
            let m_row = &mask[bi * n..(bi + 1) * n];
            let base = gi * n * d;
            for h in 0..heads {
                let off = h * dh;
                head_scores(qv, kv, m_row, base, n, d, off, dh, &mut scores);
                for i in 0..n {
                    let grow = base + i * d + off;
                    for m in 0..n {
                        let vrow = base + m * d + off;
                        let mut s = 0.0;
                        for j in 0..dh {
                            s += g[grow + j] * vv[vrow + j];
                        }
                        dscores[i * n + m] = scale * s * m_row[m];
                        let a = scores[i * n + m];
                        if a != 0.0 {
                            for j in 0..dh {
                                dv[vrow + j] += scale * a * g[grow + j];
                            }
                        }
                    }
                }
                for i in 0..n {
                    let qrow = base + i * d + off;
                    for m in 0..n {
                        let ds = dscores[i * n + m];
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = base + m * d + off;
                        for j in 0..dh {
                            dq[qrow + j] += ds * kv[krow + j];
                            dk[krow + j] += ds * qv[qrow + j];
                        }
                    }
                }
            }
        }
        self.acc(grads, q, dq);
        self.acc(grads, k, dk);
        self.acc(grads, v, dv);
    }
}

/// Masked per-head score matrix `S[i, m] = mask[m] * <q_i, k_m>`.
#[allow(clippy::too_many_arguments)]
fn head_scores(
    qv: &[f64],
    kv: &[f64],
    mask: &[f64],
    base: usize,
    n: usize,
    d: usize,
    off: usize,
    dh: usize,
    scores: &mut [f64],
) {
    for i in 0..n {
        let qrow = base + i * d + off;
        for m in 0..n {
            if mask[m] == 0.0 {
                scores[i * n + m] = 0.0;
                continue;
            }
            let krow = base + m * d + off;
            let mut s = 0.0;
            for j in 0..dh {
                s += qv[qrow + j] * kv[krow + j];
            }
            scores[i * n + m] = s * mask[m];
        }
    }
}

/// Pre-scale attention scores for every `(t, b, head)`, laid out as
/// `[T, B, H, N, N]`. Inputs follow [`Tape::attention`].
pub fn attention_scores(q: &Tensor, k: &Tensor, mask: &[f64], heads: usize) -> Vec<f64> {
    let shape = &q.shape;
    let (b, n, d) = (shape[1], shape[2], shape[3]);
    let dh = d / heads;
    let groups = shape[0] * b;
    let mut out = vec![0.0; groups * heads * n * n];
    let mut scores = vec![0.0; n * n];
    for gi in 0..groups {
        let bi = gi % b;
        for h in 0..heads {
            head_scores(
                &q.data,
                &k.data,
                &mask[bi * n..(bi + 1) * n],
                gi * n * d,
                n,
                d,
                h * dh,
                dh,
                &mut scores,
            );
            let o = (gi * heads + h) * n * n;
            out[o..o + n * n].copy_from_slice(&scores);
        }
    }
    out
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    z.iter().map(|v| v - lse).collect()
}

/// `c[m, n] += a[m, k] * b[k, n]`, skipping zero entries of `a` (spikes are sparse).
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m, k] += a[m, n] * b[k, n]^T`.
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k, n] += a[m, k]^T * b[m, n]`.
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}
