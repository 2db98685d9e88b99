use super::*;
use crate::snn::{surrogate_grad_scalar, LifParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape.to_vec()).unwrap()
}

/// Central differences of a scalar function of several tensors.
fn finite_diff(
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    inputs: &[Tensor],
    h: f64,
) -> Vec<Vec<f64>> {
    let eval = |ins: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t)).collect();
        let out = build(&mut tape, &vars);
        tape.scalar_value(out)
    };
    let mut result = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= h;
            g.push((eval(&plus) - eval(&minus)) / (2.0 * h));
        }
        result.push(g);
    }
    result
}

fn check_grad(build: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let fd = finite_diff(build, inputs, 1e-5);
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let ad = grads.get_or_zeros(*v, inputs[i].numel());
        for (a, f) in ad.iter().zip(&fd[i]) {
            worst = worst.max((a - f).abs() / (f.abs() + 1e-8));
        }
    }
    worst
}

const TOL: f64 = 1e-4;

#[test]
fn linear_rule_gives_input_as_weight_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1.5, -2.0, 0.5], vec![1, 3]);
    let w = tape.param(&Tensor::new(vec![0.1, 0.2, 0.3], vec![3, 1]).unwrap());
    let y = tape.matmul(x, w);
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap(), &[1.5, -2.0, 0.5]);
    assert!(g.get(x).is_none());
}

#[test]
fn constant_loss_backward_is_noop() {
    let mut tape = Tape::new();
    let c = tape.constant(vec![3.0], vec![]);
    let w = tape.param(&Tensor::scalar(1.0));
    let g = tape.backward(c).unwrap();
    assert!(g.get(w).is_none());
    assert!(Tape::new().is_empty());
}

#[test]
fn non_scalar_loss_is_contract_violation() {
    let mut tape = Tape::new();
    let w = tape.param(&Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.backward(w), Err(crate::Error::Contract(_))));
}

#[test]
fn two_matmul_chain_matches_symbolic_expansion() {
    // L = sum(A B C); dL/dB = A^T 1 C^T, dL/dA = 1 (B C)^T, dL/dC = (A B)^T 1
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [0.5, -1.0, 2.0, 0.25];
    let c = [-1.0, 3.0, 1.0, 2.0];
    let mut tape = Tape::new();
    let va = tape.param(&Tensor::new(a.to_vec(), vec![2, 2]).unwrap());
    let vb = tape.param(&Tensor::new(b.to_vec(), vec![2, 2]).unwrap());
    let vc = tape.param(&Tensor::new(c.to_vec(), vec![2, 2]).unwrap());
    let ab = tape.matmul(va, vb);
    let abc = tape.matmul(ab, vc);
    let loss = tape.sum(abc);
    let g = tape.backward(loss).unwrap();

    // row sums of C: r_k = sum_j C[k, j]
    let rc = [c[0] + c[1], c[2] + c[3]];
    // col sums of A: s_k = sum_i A[i, k]
    let sa = [a[0] + a[2], a[1] + a[3]];
    let expect_b = [sa[0] * rc[0], sa[0] * rc[1], sa[1] * rc[0], sa[1] * rc[1]];
    // (B C) row sums
    let bc_row = [b[0] * rc[0] + b[1] * rc[1], b[2] * rc[0] + b[3] * rc[1]];
    let expect_a = [bc_row[0], bc_row[1], bc_row[0], bc_row[1]];
    // (A B) col sums
    let ab_col = [sa[0] * b[0] + sa[1] * b[2], sa[0] * b[1] + sa[1] * b[3]];
    let expect_c = [ab_col[0], ab_col[0], ab_col[1], ab_col[1]];
    for (got, want) in [(va, expect_a), (vb, expect_b), (vc, expect_c)] {
        for (x, y) in g.get(got).unwrap().iter().zip(want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn primitive_elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let build = |t: &mut Tape, v: &[Var]| {
        let s = t.add(v[0], v[1]);
        let d = t.sub(s, v[1]);
        let m = t.mul(d, v[1]);
        let m = t.mul(m, v[0]);
        let sc = t.scale(m, 1.7);
        let sh = t.add_scalar(sc, 0.3);
        let sq = t.mul(sh, sh);
        t.sum(sq)
    };
    assert!(check_grad(&build, &[a, b]) <= TOL);
}

#[test]
fn primitive_axis_reductions_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    for axis in 0..3 {
        let build = move |t: &mut Tape, v: &[Var]| {
            let s = t.sum_axis(v[0], axis);
            let m = t.mean_axis(v[0], axis);
            let p = t.mul(s, m);
            let o = t.sum_outer(v[0]);
            let o2 = t.mul(o, o);
            let a = t.mean(p);
            let b = t.sum(o2);
            t.add(a, b)
        };
        assert!(check_grad(&build, std::slice::from_ref(&a)) <= TOL);
    }
}

#[test]
fn primitive_linear_and_layer_norm_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 5], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let g = rand_tensor(&mut rng, &[4], 0.5, 1.5);
    let bb = rand_tensor(&mut rng, &[4], -0.5, 0.5);
    let target = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let build = move |t: &mut Tape, v: &[Var]| {
        let y = t.linear(v[0], v[1], Some(v[2]));
        let n = t.layer_norm(y, v[3], v[4], 1e-5);
        let tg = t.constant(target.data.clone(), target.shape.clone());
        let d = t.mul(n, tg);
        t.sum(d)
    };
    assert!(check_grad(&build, &[x, w, b, g, bb]) <= TOL);
}

#[test]
fn primitive_embedding_select_stack_repeat_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let table = rand_tensor(&mut rng, &[6, 3], -1.0, 1.0);
    let build = |t: &mut Tape, v: &[Var]| {
        let e = t.embedding(v[0], &[1, 4, 4, 0]);
        let r = t.repeat(e, 2);
        let a = t.select(r, 0);
        let b = t.select(r, 1);
        let bb = t.mul(b, b);
        let s = t.stack(&[a, bb]);
        let s = t.reshape(s, vec![8, 3]);
        let n = t.l2_norm(s);
        let m = t.sum(s);
        t.add(n, m)
    };
    assert!(check_grad(&build, &[table]) <= TOL);
}

#[test]
fn primitive_spike_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u = rand_tensor(&mut rng, &[10], -1.0, 3.0);
    let build = |t: &mut Tape, v: &[Var]| {
        let s = t.spike(v[0], 1.0, 2.0, SpikeMode::Soft);
        let s = t.mul(s, s);
        t.sum(s)
    };
    assert!(check_grad(&build, std::slice::from_ref(&u)) <= TOL);

    let mut tape = Tape::new();
    let uv = tape.param(&u);
    let s = tape.spike(uv, 1.0, 2.0, SpikeMode::Hard);
    assert!(tape.value(s).iter().all(|&x| x == 0.0 || x == 1.0));
    let loss = tape.sum(s);
    let g = tape.backward(loss).unwrap();
    for (gi, ui) in g.get(uv).unwrap().iter().zip(&u.data) {
        assert!((gi - surrogate_grad_scalar(ui - 1.0, 2.0)).abs() < 1e-15);
    }
}

#[test]
fn primitive_attention_and_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let shape = [2, 2, 3, 4];
    let q = rand_tensor(&mut rng, &shape, -1.0, 1.0);
    let k = rand_tensor(&mut rng, &shape, -1.0, 1.0);
    let v = rand_tensor(&mut rng, &shape, -1.0, 1.0);
    let mask = vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0];
    let build = move |t: &mut Tape, x: &[Var]| {
        let a = t.attention(x[0], x[1], x[2], &mask, 2, 0.125);
        let a2 = t.mul(a, a);
        let p = t.masked_mean_pool(a2, &mask);
        let s = t.sum(p);
        let z = t.sum(a);
        t.add(s, z)
    };
    assert!(check_grad(&build, &[q, k, v]) <= TOL);
}

#[test]
fn primitive_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    let x = rand_tensor(&mut rng, &[3, 2, 2], -1.0, 1.0);
    let target = vec![0.1, 0.2, 0.3, 0.4, 1.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25];
    let build = move |t: &mut Tape, v: &[Var]| {
        let ce = t.cross_entropy(v[0], &[0, 3, 2]);
        let kl = t.kl_div(v[0], &target);
        let n = t.sample_norm(v[1], false);
        let n2 = t.sample_norm(v[1], true);
        let n = t.mean(n);
        let n2 = t.mean(n2);
        let a = t.add(ce, kl);
        let b = t.add(n, n2);
        t.add(a, b)
    };
    assert!(check_grad(&build, &[logits, x]) <= TOL);
}

#[test]
fn gradient_accumulation_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let x = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    let l1 = |t: &mut Tape, w: Var| {
        let xv = t.constant(x.data.clone(), x.shape.clone());
        let y = t.matmul(xv, w);
        let y = t.mul(y, y);
        t.sum(y)
    };
    let l2 = |t: &mut Tape, w: Var| {
        let xv = t.constant(x.data.clone(), x.shape.clone());
        let y = t.matmul(xv, w);
        let s = t.spike(y, 0.2, 2.0, SpikeMode::Soft);
        t.mean(s)
    };
    let grad_of = |f: &dyn Fn(&mut Tape, Var) -> Var| {
        let mut t = Tape::new();
        let wv = t.param(&w);
        let l = f(&mut t, wv);
        t.backward(l).unwrap().get_or_zeros(wv, w.numel())
    };
    let g1 = grad_of(&l1);
    let g2 = grad_of(&l2);
    let g12 = grad_of(&|t: &mut Tape, wv: Var| {
        let a = l1(t, wv);
        let b = l2(t, wv);
        t.add(a, b)
    });
    for ((a, b), c) in g1.iter().zip(&g2).zip(&g12) {
        assert!((a + b - c).abs() < 1e-12);
    }
}

fn chain_inputs(rng: &mut ChaCha8Rng, steps: usize, d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let w = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let xs = (0..steps)
        .map(|_| (0..d).map(|_| rng.gen_range(0.0..1.5)).collect())
        .collect();
    (w, xs)
}

/// Tape version of the single-neuron chain `I_t = W . X_t`, `L = sum_t c_t S_t`.
fn chain_tape_grad(
    w: &[f64],
    xs: &[Vec<f64>],
    params: &LifParams,
    coeffs: &[f64],
    mode: SpikeMode,
) -> (f64, Vec<f64>) {
    let d = w.len();
    let mut tape = Tape::new();
    let wv = tape.param(&Tensor::new(w.to_vec(), vec![d, 1]).unwrap());
    let flat: Vec<f64> = xs.iter().flatten().copied().collect();
    let x = tape.constant(flat, vec![xs.len(), 1, d]);
    let current = tape.linear(x, wv, None);
    let spikes = unroll_lif(&mut tape, current, params, mode);
    let c = tape.constant(coeffs.to_vec(), vec![xs.len(), 1, 1]);
    let weighted = tape.mul(spikes, c);
    let loss = tape.sum(weighted);
    let g = tape.backward(loss).unwrap();
    (tape.scalar_value(loss), g.get_or_zeros(wv, d))
}

#[test]
fn backward_matches_bptt_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for &steps in &[1usize, 2, 4, 8] {
        for &beta in &[0.0, 0.5, 0.9, 1.0] {
            let params = LifParams {
                threshold: 1.0,
                decay: beta,
                surrogate_alpha: 2.0,
                ..LifParams::default()
            };
            let (w, xs) = chain_inputs(&mut rng, steps, 3);
            let coeffs: Vec<f64> = (0..steps).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, tape_g) = chain_tape_grad(&w, &xs, &params, &coeffs, SpikeMode::Hard);
            let ref_g = bptt_reference_grad(&w, &xs, &params, &coeffs);
            for (a, b) in tape_g.iter().zip(&ref_g) {
                assert!((a - b).abs() / (b.abs() + 1e-300) <= 1e-10 || (a - b).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn zero_decay_drops_the_recurrent_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let params = LifParams {
        threshold: 1.0,
        decay: 0.0,
        surrogate_alpha: 2.0,
        ..LifParams::default()
    };
    let (w, xs) = chain_inputs(&mut rng, 5, 4);
    let coeffs = vec![1.0; 5];
    let got = bptt_reference_grad(&w, &xs, &params, &coeffs);
    // sum_i dL/dS_i * dS_i/dU_i * X_i with U_i = W.X_i - S_{i-1} U_thr
    let mut want = vec![0.0; 4];
    let mut prev_s = 0.0;
    for x in &xs {
        let u: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - prev_s;
        let sg = surrogate_grad_scalar(u - 1.0, 2.0);
        for (wv, xi) in want.iter_mut().zip(x) {
            *wv += sg * xi;
        }
        prev_s = if u >= 1.0 { 1.0 } else { 0.0 };
    }
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn single_step_is_plain_chain_rule() {
    let params = LifParams::default();
    let w = [0.4, -0.3];
    let xs = vec![vec![1.0, 2.0]];
    let (_, g) = chain_tape_grad(&w, &xs, &params, &[1.0], SpikeMode::Hard);
    let u = 0.4 - 0.6;
    let sg = surrogate_grad_scalar(u - 1.0, 2.0);
    assert!((g[0] - sg).abs() < 1e-15);
    assert!((g[1] - 2.0 * sg).abs() < 1e-15);
}

#[test]
fn hard_forward_scalar_chain_carries_surrogate_factor() {
    // w -> u = w * x -> S
    let mut tape = Tape::new();
    let w = tape.param(&Tensor::new(vec![0.8], vec![1, 1]).unwrap());
    let x = tape.constant(vec![1.5], vec![1, 1]);
    let u = tape.matmul(x, w);
    let s = tape.spike(u, 1.0, 2.0, SpikeMode::Hard);
    let loss = tape.sum(s);
    let g = tape.backward(loss).unwrap();
    let uu = 1.2f64;
    let alpha = 2.0;
    let z = std::f64::consts::PI * alpha * (uu - 1.0) / 2.0;
    let expect = 1.5 * (alpha / 2.0) / (1.0 + z * z);
    assert!((g.get(w).unwrap()[0] - expect).abs() < 1e-14);
    assert_eq!(tape.scalar_value(loss), 1.0);
}

#[test]
fn soft_single_neuron_matches_finite_differences() {
    let params = LifParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (w, xs) = chain_inputs(&mut rng, 3, 3);
    let coeffs = vec![1.0; 3];
    let (_, ad) = chain_tape_grad(&w, &xs, &params, &coeffs, SpikeMode::Soft);
    let h = 1e-5;
    for j in 0..w.len() {
        let mut wp = w.clone();
        wp[j] += h;
        let mut wm = w.clone();
        wm[j] -= h;
        let lp = chain_tape_grad(&wp, &xs, &params, &coeffs, SpikeMode::Soft).0;
        let lm = chain_tape_grad(&wm, &xs, &params, &coeffs, SpikeMode::Soft).0;
        let fd = (lp - lm) / (2.0 * h);
        assert!((ad[j] - fd).abs() / (fd.abs() + 1e-8) <= 1e-4, "j={j} ad={} fd={fd}", ad[j]);
    }
}

#[test]
fn shared_weights_equal_sum_of_per_step_copies() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params = LifParams::default();
    let (w, xs) = chain_inputs(&mut rng, 4, 3);
    let coeffs = vec![1.0; 4];
    let (_, shared) = chain_tape_grad(&w, &xs, &params, &coeffs, SpikeMode::Hard);

    let mut tape = Tape::new();
    let wt = Tensor::new(w.clone(), vec![3, 1]).unwrap();
    let copies: Vec<Var> = (0..4).map(|_| tape.param(&wt)).collect();
    let currents: Vec<Var> = xs
        .iter()
        .zip(&copies)
        .map(|(x, &wc)| {
            let xv = tape.constant(x.clone(), vec![1, 3]);
            tape.linear(xv, wc, None)
        })
        .collect();
    let current = tape.stack(&currents);
    let spikes = unroll_lif(&mut tape, current, &params, SpikeMode::Hard);
    let loss = tape.sum(spikes);
    let g = tape.backward(loss).unwrap();
    let mut summed = [0.0; 3];
    for c in copies {
        for (s, v) in summed.iter_mut().zip(g.get_or_zeros(c, 3)) {
            *s += v;
        }
    }
    for (a, b) in summed.iter().zip(&shared) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn unrolled_lif_matches_stepwise_dynamics() {
    use crate::snn::{lif_step, MembraneState};
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let params = LifParams::new(0.7, 0.8, 2.0).unwrap();
    let cur = rand_tensor(&mut rng, &[6, 5], -0.5, 1.5);
    let mut tape = Tape::new();
    let cv = tape.constant(cur.data.clone(), cur.shape.clone());
    let s = unroll_lif(&mut tape, cv, &params, SpikeMode::Hard);
    let mut state = MembraneState::zeros(&[5]);
    for t in 0..6 {
        let input = Tensor::new(cur.data[t * 5..(t + 1) * 5].to_vec(), vec![5]).unwrap();
        let (next, spikes) = lif_step(&state, &input, &params).unwrap();
        assert_eq!(&tape.value(s)[t * 5..(t + 1) * 5], spikes.data.as_slice());
        state = next;
    }
}
