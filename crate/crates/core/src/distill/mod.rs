//! Two-stage distillation: feature and embedding alignment against a
//! general teacher, then alignment plus logits and label losses against a
//! task-tuned teacher.

mod config;
mod losses;
mod optim;

pub use config::{Stage, TrainConfig};
pub use losses::{
    affine, ce_loss, embedding_alignment_loss, feature_alignment_loss, layer_norm, logits_loss, softmax_rows,
    transform_student_feature, NORMALIZATION_TOL, PROB_FLOOR,
};
pub use optim::{clip_grad_norm, AdamW};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{SpikeMode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{normal_tensor, SpikeBert, TokenBatch, LN_EPS};
use crate::teacher_io::{FeatureTarget, TaskTarget, TeacherDump};

/// Loss-term weights for both stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub sigma1: f64,
    pub sigma2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sigma1: 1.0,
            sigma2: 1.0,
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 1.0,
            lambda4: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma1, self.sigma2, self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }

    /// `(feature, embedding, logits, ce)` weights used by `stage`.
    pub fn for_stage(&self, stage: Stage) -> [f64; 4] {
        match stage {
            Stage::One => [self.sigma1, self.sigma2, 0.0, 0.0],
            Stage::Two => [self.lambda1, self.lambda2, self.lambda3, self.lambda4],
        }
    }
}

/// `(student layer, teacher layer)` pairs, both 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMap {
    pub pairs: Vec<(usize, usize)>,
}

impl LayerMap {
    /// Drop pairs whose student layer is among the first `k`.
    pub fn skip_front(mut self, k: usize) -> Self {
        self.pairs.retain(|&(s, _)| s > k);
        self
    }
}

/// Student layer `i` aligns with teacher layer `i * ceil(b / m)`, clamped to
/// `b`. A student layer whose clamped target repeats the previous one is
/// dropped.
pub fn build_layer_map(b: usize, m: usize) -> LayerMap {
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(m);
    if b == 0 || m == 0 {
        return LayerMap { pairs };
    }
    let s = b.div_ceil(m);
    for i in 1..=m {
        let t = (i * s).min(b);
        if pairs.last().is_some_and(|&(_, prev)| prev >= t) {
            continue;
        }
        pairs.push((i, t));
    }
    LayerMap { pairs }
}

/// Per-step loss values. `feature` is the unweighted sum over aligned
/// layers; `total` is the weighted objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub feature: f64,
    pub embedding: f64,
    pub logits: f64,
    pub ce: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.total += s * o.total;
        self.feature += s * o.feature;
        self.embedding += s * o.embedding;
        self.logits += s * o.logits;
        self.ce += s * o.ce;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerOptions {
    pub weights: LossWeights,
    pub lr: f64,
    pub weight_decay: f64,
    /// Penalize squared norms instead of norms.
    pub squared_norm: bool,
    pub skip_align_first_k: usize,
    /// Reinitialize alignment heads carried in from a checkpoint.
    pub reinit_align: bool,
    pub grad_clip: f64,
    /// Batch chunks evaluated in parallel; results are reduced in chunk order.
    pub threads: usize,
    pub seed: u64,
}

impl TrainerOptions {
    pub fn from_config(cfg: &TrainConfig, stage: Stage, threads: usize) -> Self {
        Self {
            weights: cfg.loss_weights(),
            lr: cfg.lr_for(stage),
            weight_decay: cfg.weight_decay,
            squared_norm: cfg.squared_norm,
            skip_align_first_k: cfg.skip_align_first_k,
            reinit_align: cfg.reinit_align,
            grad_clip: cfg.grad_clip,
            threads: threads.max(1),
            seed: cfg.seed,
        }
    }
}

impl Default for TrainerOptions {
    fn default() -> Self {
        Self::from_config(&TrainConfig::default(), Stage::One, 1)
    }
}

/// Named gradients in parameter-name order.
pub type NamedGrads = Vec<(String, Vec<f64>)>;

/// Student model, its alignment heads (stored as `align.*` parameters) and
/// optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: SpikeBert,
    pub opt: AdamW,
    pub map: LayerMap,
    pub weights: LossWeights,
    pub squared_norm: bool,
    pub grad_clip: f64,
    pub threads: usize,
    teacher_dim: usize,
}

impl Trainer {
    pub fn new(mut model: SpikeBert, teacher_layers: usize, teacher_dim: usize, opts: &TrainerOptions) -> Result<Self> {
        opts.weights.validate()?;
        if teacher_layers == 0 || teacher_dim == 0 {
            return Err(Error::input("teacher layers and dim must be positive"));
        }
        let map = build_layer_map(teacher_layers, model.config.depth).skip_front(opts.skip_align_first_k);
        if opts.reinit_align {
            model.params.remove_prefix("align.");
        }
        let d = model.config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xa11e_0000);
        let std = 1.0 / (d as f64).sqrt();
        let mut heads = vec![("align.emb".to_string(), false)];
        heads.extend(map.pairs.iter().map(|&(s, _)| (format!("align.layer{s}"), true)));
        for (prefix, norm) in heads {
            let mut wanted = vec![
                (format!("{prefix}.weight"), vec![d, teacher_dim]),
                (format!("{prefix}.bias"), vec![teacher_dim]),
            ];
            if norm {
                wanted.push((format!("{prefix}.norm.gain"), vec![teacher_dim]));
                wanted.push((format!("{prefix}.norm.bias"), vec![teacher_dim]));
            }
            for (name, shape) in wanted {
                match model.params.get(&name) {
                    Some(t) if t.shape == shape => {}
                    Some(t) => {
                        return Err(Error::Data(format!(
                            "alignment head {name} has shape {:?} but the teacher needs {shape:?}",
                            t.shape
                        )))
                    }
                    None => {
                        let t = if name.ends_with(".weight") {
                            normal_tensor(&mut rng, &shape, std)
                        } else if name.ends_with(".gain") {
                            Tensor::filled(&shape, 1.0)
                        } else {
                            Tensor::zeros(&shape)
                        };
                        model.params.insert(name, t);
                    }
                }
            }
        }
        Ok(Self {
            model,
            opt: AdamW::new(opts.lr, opts.weight_decay),
            map,
            weights: opts.weights,
            squared_norm: opts.squared_norm,
            grad_clip: opts.grad_clip,
            threads: opts.threads.max(1),
            teacher_dim,
        })
    }

    pub fn teacher_dim(&self) -> usize {
        self.teacher_dim
    }

    /// Stage-one loss and gradients without updating anything.
    pub fn stage1_loss(&self, targets: &[FeatureTarget]) -> Result<(LossBreakdown, NamedGrads)> {
        self.loss_and_grads(targets, None, Stage::One)
    }

    pub fn stage2_loss(&self, targets: &[TaskTarget]) -> Result<(LossBreakdown, NamedGrads)> {
        let feats: Vec<FeatureTarget> = targets.iter().map(|t| t.features).collect();
        self.loss_and_grads(&feats, Some(targets), Stage::Two)
    }

    /// `sigma1 * sum of feature losses + sigma2 * embedding loss`, then one
    /// optimizer update.
    pub fn stage1_step(&mut self, targets: &[FeatureTarget]) -> Result<LossBreakdown> {
        let (l, g) = self.stage1_loss(targets)?;
        self.apply(g);
        Ok(l)
    }

    /// Weighted feature, embedding, logits and cross-entropy losses, then
    /// one optimizer update.
    pub fn stage2_step(&mut self, targets: &[TaskTarget]) -> Result<LossBreakdown> {
        let (l, g) = self.stage2_loss(targets)?;
        self.apply(g);
        Ok(l)
    }

    fn apply(&mut self, grads: NamedGrads) {
        for (name, g) in grads {
            if let Some(t) = self.model.params.get_mut(&name) {
                t.grad = Some(g);
            }
        }
        if self.grad_clip > 0.0 {
            clip_grad_norm(&mut self.model.params, self.grad_clip);
        }
        self.opt.step(&mut self.model.params);
        self.model.params.zero_grads();
    }

    fn loss_and_grads(
        &self,
        feats: &[FeatureTarget],
        task: Option<&[TaskTarget]>,
        stage: Stage,
    ) -> Result<(LossBreakdown, NamedGrads)> {
        if feats.is_empty() {
            return Err(Error::input("empty training batch"));
        }
        let b = feats.len();
        let chunk = b.div_ceil(self.threads.min(b));
        let ranges: Vec<(usize, usize)> = (0..b).step_by(chunk).map(|s| (s, (s + chunk).min(b))).collect();
        let run = |&(s, e): &(usize, usize)| {
            let t = task.map(|t| &t[s..e]);
            self.chunk_loss(&feats[s..e], t, stage)
        };
        let results: Vec<Result<(LossBreakdown, NamedGrads)>> = if ranges.len() == 1 {
            vec![run(&ranges[0])]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = ranges.iter().map(|r| scope.spawn(move || run(r))).collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            })
        };

        let mut loss = LossBreakdown::default();
        let mut grads: NamedGrads = Vec::new();
        for (r, res) in ranges.iter().zip(results) {
            let (l, g) = res?;
            let w = (r.1 - r.0) as f64 / b as f64;
            loss.add_scaled(&l, w);
            if grads.is_empty() {
                grads = g.into_iter().map(|(n, v)| (n, v.into_iter().map(|x| x * w).collect())).collect();
            } else {
                for ((_, acc), (_, v)) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(v).for_each(|(a, x)| *a += w * x);
                }
            }
        }
        Ok((loss, grads))
    }

    /// Batch-mean losses and gradients for one chunk.
    fn chunk_loss(
        &self,
        feats: &[FeatureTarget],
        task: Option<&[TaskTarget]>,
        stage: Stage,
    ) -> Result<(LossBreakdown, NamedGrads)> {
        let b = feats.len();
        let n = feats[0].max_len();
        let dt = self.teacher_dim;
        for f in feats {
            if f.max_len() != n || f.dim != dt {
                return Err(Error::Data("teacher records disagree on max_len or dim".into()));
            }
        }
        let ids = feats
            .iter()
            .flat_map(|f| f.token_ids.iter())
            .map(|&t| u32::try_from(t).map_err(|_| Error::Data(format!("negative token id {t} in dump"))))
            .collect::<Result<Vec<u32>>>()?;
        let batch = TokenBatch::new(ids, b, n)?;
        let [w_fea, w_emb, w_kl, w_ce] = self.weights.for_stage(stage);

        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape);
        let fv = self.model.forward_on_tape(&mut tape, &p, &batch, SpikeMode::Hard)?;
        let row_mask: Vec<f64> = fv.mask.iter().flat_map(|&m| std::iter::repeat_n(m, dt)).collect();
        let mask = tape.constant(row_mask.clone(), vec![b, n, dt]);
        let squared = self.squared_norm;
        let mut loss = LossBreakdown::default();
        let mut total: Option<Var> = None;
        let add_term = |tape: &mut Tape, total: &mut Option<Var>, v: Var, w: f64| {
            let s = tape.scale(v, w);
            *total = Some(match *total {
                Some(t) => tape.add(t, s),
                None => s,
            });
        };
        let distance = |tape: &mut Tape, student: Var, teacher: Vec<f32>| {
            let t: Vec<f64> = teacher.iter().zip(&row_mask).map(|(&x, m)| x as f64 * m).collect();
            let t = tape.constant(t, vec![b, n, dt]);
            let s = tape.mul(student, mask);
            let diff = tape.sub(s, t);
            let norms = tape.sample_norm(diff, squared);
            tape.mean(norms)
        };

        if w_fea > 0.0 {
            let mut sum: Option<Var> = None;
            for &(si, ti) in &self.map.pairs {
                let teacher: Vec<f32> = feats
                    .iter()
                    .map(|f| f.layer(ti))
                    .collect::<Result<Vec<_>>>()?
                    .concat();
                let h = format!("align.layer{si}");
                let summed = tape.sum_axis(fv.layer_features[si - 1], 0);
                let lin = tape.linear(summed, p.get(&format!("{h}.weight")), Some(p.get(&format!("{h}.bias"))));
                let normed = tape.layer_norm(lin, p.get(&format!("{h}.norm.gain")), p.get(&format!("{h}.norm.bias")), LN_EPS);
                let l = distance(&mut tape, normed, teacher);
                loss.feature += tape.scalar_value(l);
                sum = Some(match sum {
                    Some(s) => tape.add(s, l),
                    None => l,
                });
            }
            if let Some(s) = sum {
                add_term(&mut tape, &mut total, s, w_fea);
            }
        }
        if w_emb > 0.0 {
            let teacher: Vec<f32> = feats.iter().flat_map(|f| f.embedding.iter().copied()).collect();
            let lin = tape.linear(fv.embedding, p.get("align.emb.weight"), Some(p.get("align.emb.bias")));
            let l = distance(&mut tape, lin, teacher);
            loss.embedding = tape.scalar_value(l);
            add_term(&mut tape, &mut total, l, w_emb);
        }
        if let Some(task) = task {
            let c = self.model.config.num_classes;
            if task.iter().any(|t| t.logits.len() != c) {
                return Err(Error::Data(format!("teacher logits do not have {c} classes")));
            }
            if w_kl > 0.0 {
                let z: Vec<f64> = task.iter().flat_map(|t| t.logits.iter().map(|&v| v as f64)).collect();
                let l = tape.kl_div(fv.logits, &softmax_rows(&z, c));
                loss.logits = tape.scalar_value(l);
                add_term(&mut tape, &mut total, l, w_kl);
            }
            if w_ce > 0.0 {
                let labels: Vec<usize> = task.iter().map(|t| t.label as usize).collect();
                if labels.iter().any(|&y| y >= c) {
                    return Err(Error::input(format!("label out of range for {c} classes")));
                }
                let l = tape.cross_entropy(fv.logits, &labels);
                loss.ce = tape.scalar_value(l);
                add_term(&mut tape, &mut total, l, w_ce);
            }
        }

        let grads = match total {
            Some(t) => {
                loss.total = tape.scalar_value(t);
                let g = tape.backward(t)?;
                p.iter()
                    .map(|(name, v)| {
                        let len = self.model.params.get(name).map_or(0, Tensor::numel);
                        (name.to_string(), g.get_or_zeros(v, len))
                    })
                    .collect()
            }
            None => self
                .model
                .params
                .iter()
                .map(|(name, t)| (name.to_string(), vec![0.0; t.numel()]))
                .collect(),
        };
        Ok((loss, grads))
    }
}

/// Sampling plan for one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Epoch-wise shuffled batches of record indices.
pub fn batch_indices(len: usize, opts: &LoopOptions) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xba7c_0000);
    let bs = opts.batch_size.clamp(1, len.max(1));
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        if order.len() < bs {
            let mut epoch: Vec<usize> = (0..len).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        out.push(order.drain(..bs).collect());
    }
    out
}

/// Run `opts.steps` updates over `dump`, calling `on_step(step, loss)` after
/// each one (steps count from 1).
pub fn run_stage(
    trainer: &mut Trainer,
    dump: &TeacherDump,
    stage: Stage,
    opts: &LoopOptions,
    mut on_step: impl FnMut(usize, &LossBreakdown) -> Result<()>,
) -> Result<Vec<LossBreakdown>> {
    if dump.is_empty() {
        return Err(Error::input("teacher dump holds no samples"));
    }
    if dump.header.dim != trainer.teacher_dim() {
        return Err(Error::Data(format!(
            "dump hidden size {} differs from trainer alignment width {}",
            dump.header.dim,
            trainer.teacher_dim()
        )));
    }
    let mut history = Vec::with_capacity(opts.steps);
    for (i, idx) in batch_indices(dump.len(), opts).into_iter().enumerate() {
        let l = match stage {
            Stage::One => {
                let t: Vec<FeatureTarget> = idx.iter().map(|&k| dump.feature_target(k)).collect();
                trainer.stage1_step(&t)?
            }
            Stage::Two => {
                let t = idx.iter().map(|&k| dump.task_target(k)).collect::<Result<Vec<_>>>()?;
                trainer.stage2_step(&t)?
            }
        };
        on_step(i + 1, &l)?;
        history.push(l);
    }
    Ok(history)
}
