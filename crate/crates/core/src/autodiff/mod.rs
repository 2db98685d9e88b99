//! Reverse-mode differentiation over a define-by-run tape.
//!
//! Every forward pass records its operations on a fresh [`Tape`]. Spiking
//! layers are unrolled over time with [`unroll_lif`], so a single
//! [`Tape::backward`] call performs backpropagation through time with
//! weights shared across steps.

mod bptt;
mod tape;
mod tensor;

pub use bptt::bptt_reference_grad;
pub use tape::{attention_scores, log_softmax, softmax, Gradients, SpikeMode, Tape, Var};
pub use tensor::Tensor;

use crate::snn::LifParams;

/// Run a LIF layer over the leading (time) axis of `current` and return the
/// stacked spike trains.
///
/// The reset term `S_{t-1} * U_thr` enters as a constant: gradients flow
/// through the membrane recurrence (`dU_t/dU_{t-1} = beta`) and the spike
/// surrogate only. The membrane starts at zero.
pub fn unroll_lif(tape: &mut Tape, current: Var, params: &LifParams, mode: SpikeMode) -> Var {
    let steps = tape.shape(current)[0];
    let thr = params.threshold;
    let mut prev_u: Option<Var> = None;
    let mut reset: Option<Var> = None;
    let mut spikes = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut u = tape.select(current, t);
        if let Some(p) = prev_u {
            let leak = tape.scale(p, params.decay);
            u = tape.add(u, leak);
        }
        if let Some(r) = reset {
            u = tape.sub(u, r);
        }
        spikes.push(tape.spike(u, thr, params.surrogate_alpha, mode));

        let uv = tape.value(u);
        reset = if uv.iter().any(|&v| v >= thr) {
            let r = uv.iter().map(|&v| if v >= thr { thr } else { 0.0 }).collect();
            let shape = tape.shape(u).to_vec();
            Some(tape.constant(r, shape))
        } else {
            None
        };
        prev_u = Some(u);
    }
    tape.stack(&spikes)
}

#[cfg(test)]
mod tests;
