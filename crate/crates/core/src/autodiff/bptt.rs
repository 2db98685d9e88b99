use crate::snn::{heaviside_scalar, membrane_update, surrogate_grad_scalar, LifParams};

/// Gradient of `L = sum_i L_i(S_i)` with respect to the weights of a single
/// linear-into-LIF neuron, `I_i = W . X_i`, computed by the explicit time
/// recurrence rather than by a tape.
///
/// `step_loss_grads[i]` is `dL_i/dS_i`. The weight sensitivity is carried
/// forward as `dU_i/dW = X_i + beta * dU_{i-1}/dW`; the reset term is treated
/// as constant. The surrogate is evaluated at `U_i - U_thr`.
pub fn bptt_reference_grad(
    weights: &[f64],
    inputs: &[Vec<f64>],
    params: &LifParams,
    step_loss_grads: &[f64],
) -> Vec<f64> {
    assert_eq!(inputs.len(), step_loss_grads.len(), "one loss gradient per step");
    let d = weights.len();
    let mut grad = vec![0.0; d];
    let mut sens = vec![0.0; d];
    let mut u = 0.0;
    let mut s = 0.0;
    for (x, &dl_ds) in inputs.iter().zip(step_loss_grads) {
        assert_eq!(x.len(), d, "input width");
        let current: f64 = weights.iter().zip(x).map(|(w, xi)| w * xi).sum();
        u = membrane_update(current, u, s, params);
        for (sv, &xi) in sens.iter_mut().zip(x) {
            *sv = xi + params.decay * *sv;
        }
        let ds_du = surrogate_grad_scalar(u - params.threshold, params.surrogate_alpha);
        for (g, sv) in grad.iter_mut().zip(&sens) {
            *g += dl_ds * ds_du * sv;
        }
        s = heaviside_scalar(u, params.threshold);
    }
    grad
}
