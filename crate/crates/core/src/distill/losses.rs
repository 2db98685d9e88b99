//! Plain-value loss functions. The trainer builds the same quantities on a
//! tape; these versions validate their inputs and serve as references.

use crate::autodiff::{log_softmax, Tensor};
use crate::error::{Error, Result};
use crate::model::{SpikeTensor, LN_EPS};

/// Floor applied to student probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Allowed deviation of a probability row sum from 1.
pub const NORMALIZATION_TOL: f64 = 1e-5;

/// Split a `[N, D]` (one sample) or `[B, ...]` tensor into per-sample rows.
fn samples(t: &Tensor) -> (usize, usize) {
    match t.shape.len() {
        0 => (1, 1),
        1 | 2 => (1, t.numel()),
        _ => (t.shape[0], t.numel() / t.shape[0].max(1)),
    }
}

/// Frobenius norm of each per-sample difference, averaged over the batch.
/// A rank-2 input is one sample; higher ranks carry the batch first.
pub fn feature_alignment_loss(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    if student.shape != teacher.shape {
        return Err(Error::contract(format!(
            "feature shapes differ: {:?} vs {:?}",
            student.shape, teacher.shape
        )));
    }
    let (b, inner) = samples(student);
    if b == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..b)
        .map(|i| {
            let r = i * inner..(i + 1) * inner;
            student.data[r.clone()]
                .iter()
                .zip(&teacher.data[r])
                .map(|(s, t)| (s - t) * (s - t))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / b as f64)
}

/// `x [.., in] w [in, out] + b`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d_in = *x.shape.last().unwrap_or(&1);
    if w.shape.len() != 2 || w.shape[0] != d_in || b.shape != [w.shape[1]] {
        return Err(Error::contract(format!(
            "affine map {:?} + {:?} does not fit input {:?}",
            w.shape, b.shape, x.shape
        )));
    }
    let d_out = w.shape[1];
    let rows = x.numel() / d_in.max(1);
    let mut out = Vec::with_capacity(rows * d_out);
    for r in 0..rows {
        let xr = &x.data[r * d_in..(r + 1) * d_in];
        for j in 0..d_out {
            out.push(b.data[j] + (0..d_in).map(|i| xr[i] * w.data[i * d_out + j]).sum::<f64>());
        }
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(out, shape)
}

/// Layer normalization of each last-axis row.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = *x.shape.last().unwrap_or(&1);
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::contract("norm parameters do not match the last axis"));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(d) {
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (k, v) in row.iter_mut().enumerate() {
            *v = (*v - mu) * inv * gain.data[k] + bias.data[k];
        }
    }
    Tensor::new(out, x.shape.clone())
}

/// Sum a block's spikes over time, map each token to the teacher width and
/// normalize: `[T, B, N, D] -> [B, N, D_t]`.
pub fn transform_student_feature(
    f: &SpikeTensor,
    weight: &Tensor,
    bias: &Tensor,
    norm_gain: &Tensor,
    norm_bias: &Tensor,
) -> Result<Tensor> {
    let [_, b, n, d] = f.shape();
    let counts = Tensor::new(f.time_sum().iter().map(|&c| c as f64).collect(), vec![b, n, d])?;
    layer_norm(&affine(&counts, weight, bias)?, norm_gain, norm_bias)
}

/// `||E_t - (E_s w + b)||` per sample, batch-averaged.
pub fn embedding_alignment_loss(e_teacher: &Tensor, e_student: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<f64> {
    feature_alignment_loss(&affine(e_student, weight, bias)?, e_teacher)
}

fn check_distributions(p: &[f64], classes: usize, what: &str) -> Result<usize> {
    if classes == 0 || !p.len().is_multiple_of(classes) || p.is_empty() {
        return Err(Error::contract(format!("{what}: length {} is not a multiple of {classes}", p.len())));
    }
    for (i, row) in p.chunks(classes).enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::contract(format!("{what}: row {i} is not a probability vector (sum {s})")));
        }
    }
    Ok(p.len() / classes)
}

/// Batch-mean `KL(p || q)` over rows of `classes` probabilities.
pub fn logits_loss(p_teacher: &[f64], q_student: &[f64], classes: usize) -> Result<f64> {
    let b = check_distributions(p_teacher, classes, "teacher distribution")?;
    if check_distributions(q_student, classes, "student distribution")? != b {
        return Err(Error::contract("teacher and student batch sizes differ"));
    }
    let total: f64 = p_teacher
        .iter()
        .zip(q_student)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p.ln() - q.max(PROB_FLOOR).ln()))
        .sum();
    Ok(total / b as f64)
}

/// Batch-mean cross-entropy of `q_student` rows against class indices.
pub fn ce_loss(labels: &[usize], q_student: &[f64], classes: usize) -> Result<f64> {
    let b = check_distributions(q_student, classes, "student distribution")?;
    if labels.len() != b {
        return Err(Error::contract(format!("{} labels for {b} rows", labels.len())));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::input(format!("label {y} >= class count {classes}")));
        }
        total -= q_student[i * classes + y].max(PROB_FLOOR).ln();
    }
    Ok(total / b as f64)
}

/// Row-wise softmax of `[B, C]` logits.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    logits
        .chunks(classes)
        .flat_map(|r| log_softmax(r).into_iter().map(f64::exp))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::new(data, shape.to_vec()).unwrap()
    }

    #[test]
    fn feature_loss_examples() {
        let a = t(vec![0.3, -1.0, 2.0, 0.5], &[2, 2]);
        assert_eq!(feature_alignment_loss(&a, &a).unwrap(), 0.0);
        let ones = Tensor::filled(&[2, 2], 1.0);
        let zeros = Tensor::zeros(&[2, 2]);
        assert!((feature_alignment_loss(&ones, &zeros).unwrap() - 2.0).abs() < 1e-15);
        assert!(feature_alignment_loss(&ones, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn feature_loss_is_batch_mean_of_norms() {
        // sample 0 differs by (3, 4) -> 5, sample 1 by (0, 1) -> 1
        let s = t(vec![3.0, 4.0, 0.0, 1.0], &[2, 1, 2]);
        let z = Tensor::zeros(&[2, 1, 2]);
        assert!((feature_alignment_loss(&s, &z).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn embedding_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = t((0..24).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[2, 3, 4]);
        let mut eye = Tensor::zeros(&[4, 4]);
        (0..4).for_each(|i| eye.data[i * 5] = 1.0);
        let zb = Tensor::zeros(&[4]);
        assert_eq!(embedding_alignment_loss(&e, &e, &eye, &zb).unwrap(), 0.0);

        // residual of unit norm per sample
        let mut shifted = e.clone();
        shifted.data[0] += 0.6;
        shifted.data[1] += 0.8;
        shifted.data[12] -= 1.0;
        let l = embedding_alignment_loss(&shifted, &e, &eye, &zb).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        assert!(embedding_alignment_loss(&e, &e, &Tensor::zeros(&[3, 4]), &zb).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5, 0.9, 0.05, 0.05];
        assert!(logits_loss(&p, &p, 3).unwrap().abs() < 1e-15);
        let l = logits_loss(&[1.0, 0.0], &[0.5, 0.5], 2).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(logits_loss(&[0.7, 0.7], &[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn ce_examples() {
        assert_eq!(ce_loss(&[1], &[0.0, 1.0], 2).unwrap(), 0.0);
        assert!((ce_loss(&[2], &[0.2; 5], 5).unwrap() - 5f64.ln()).abs() < 1e-12);
        let a = ce_loss(&[0], &[0.6, 0.4], 2).unwrap();
        let b = ce_loss(&[0], &[0.3, 0.7], 2).unwrap();
        assert!(b > a);
        assert!(matches!(ce_loss(&[2], &[0.5, 0.5], 2), Err(Error::Input(_))));
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let c = rng.gen_range(2..7);
            let mut draw = || {
                let raw: Vec<f64> = (0..c).map(|_| rng.gen::<f64>() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect::<Vec<_>>()
            };
            let (p, q) = (draw(), draw());
            assert!(logits_loss(&p, &q, c).unwrap() >= 0.0);
        }
    }

    #[test]
    fn transform_of_silence_is_the_norm_bias() {
        let f = SpikeTensor::from_values(&[0.0; 2 * 3 * 4], &[2, 1, 3, 4]).unwrap();
        let nb = t(vec![0.1, -0.2, 0.3], &[3]);
        let out = transform_student_feature(
            &f,
            &Tensor::filled(&[4, 3], 0.7),
            &Tensor::zeros(&[3]),
            &Tensor::filled(&[3], 1.0),
            &nb,
        )
        .unwrap();
        assert_eq!(out.shape, vec![1, 3, 3]);
        for row in out.data.chunks(3) {
            assert_eq!(row, &nb.data[..]);
        }
    }

    #[test]
    fn single_step_time_sum_is_the_spike_matrix() {
        let vals = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let f = SpikeTensor::from_values(&vals, &[1, 1, 2, 3]).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        (0..3).for_each(|i| eye.data[i * 4] = 1.0);
        let counts = affine(
            &Tensor::new(f.time_sum().iter().map(|&c| c as f64).collect(), vec![1, 2, 3]).unwrap(),
            &eye,
            &Tensor::zeros(&[3]),
        )
        .unwrap();
        assert_eq!(counts.data, vals.to_vec());
    }

    proptest! {
        #[test]
        fn feature_loss_is_homogeneous(
            v in proptest::collection::vec(-5.0f64..5.0, 12),
            c in -4.0f64..4.0,
        ) {
            let s = t(v[..6].to_vec(), &[2, 3]);
            let te = t(v[6..].to_vec(), &[2, 3]);
            let sc = t(s.data.iter().map(|x| x * c).collect(), &[2, 3]);
            let tc = t(te.data.iter().map(|x| x * c).collect(), &[2, 3]);
            let base = feature_alignment_loss(&s, &te).unwrap();
            let scaled = feature_alignment_loss(&sc, &tc).unwrap();
            prop_assert!((scaled - c.abs() * base).abs() <= 1e-9 * (1.0 + scaled));
        }

        #[test]
        fn time_sums_are_bounded(bits in proptest::collection::vec(0u8..2, 3 * 8)) {
            let vals: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
            let f = SpikeTensor::from_values(&vals, &[3, 1, 2, 4]).unwrap();
            prop_assert!(f.time_sum().iter().all(|&c| c <= 3));
        }
    }
}
