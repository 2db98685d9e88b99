//! Leaky integrate-and-fire dynamics and the arctan surrogate.
//!
//! Membrane update per step:
//!
//! ```text
//! U_t = I_t + beta * U_{t-1} - S_{t-1} * U_thr
//! S_t = 1 if U_t >= U_thr else 0
//! ```
//!
//! During backpropagation the step function is replaced by the derivative
//! of `(1/pi) * atan(pi * alpha * u / 2) + 1/2`, evaluated at `u = U - U_thr`.

use std::f64::consts::PI;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Reset behaviour after a spike. Only subtractive reset is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResetMode {
    #[default]
    SubtractThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    pub threshold: f64,
    /// Membrane decay factor in `(0, 1]`.
    pub decay: f64,
    pub surrogate_alpha: f64,
    pub reset_mode: ResetMode,
}

impl LifParams {
    pub fn new(threshold: f64, decay: f64, surrogate_alpha: f64) -> Result<Self> {
        let p = Self {
            threshold,
            decay,
            surrogate_alpha,
            reset_mode: ResetMode::SubtractThreshold,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        // `threshold = +inf` is allowed: it turns the neuron into a pure integrator.
        if !(self.threshold > 0.0) {
            return Err(Error::contract(format!(
                "LIF threshold must be > 0, got {}",
                self.threshold
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::contract(format!(
                "LIF decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        if !(self.surrogate_alpha > 0.0) {
            return Err(Error::contract(format!(
                "surrogate alpha must be > 0, got {}",
                self.surrogate_alpha
            )));
        }
        Ok(())
    }
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            decay: 0.9,
            surrogate_alpha: 2.0,
            reset_mode: ResetMode::SubtractThreshold,
        }
    }
}

/// Membrane potential and previous-step spikes for a layer of neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct MembraneState {
    pub potential: Tensor,
    pub last_spike: Tensor,
}

impl MembraneState {
    /// Resting state: zero potential, no prior spikes.
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            potential: Tensor::zeros(shape),
            last_spike: Tensor::zeros(shape),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.potential.shape != self.last_spike.shape {
            return Err(Error::contract(format!(
                "membrane shapes differ: potential {:?}, last_spike {:?}",
                self.potential.shape, self.last_spike.shape
            )));
        }
        if let Some(v) = self
            .last_spike
            .data
            .iter()
            .find(|&&v| v != 0.0 && v != 1.0)
        {
            return Err(Error::contract(format!("last_spike holds non-binary value {v}")));
        }
        Ok(())
    }
}

/// Advance one time step. Returns the new state and the emitted spikes.
pub fn lif_step(
    state: &MembraneState,
    input_current: &Tensor,
    params: &LifParams,
) -> Result<(MembraneState, Tensor)> {
    state.validate()?;
    params.validate()?;
    if input_current.shape != state.potential.shape {
        return Err(Error::contract(format!(
            "input current shape {:?} does not match membrane shape {:?}",
            input_current.shape, state.potential.shape
        )));
    }
    let potential: Vec<f64> = input_current
        .data
        .iter()
        .zip(&state.potential.data)
        .zip(&state.last_spike.data)
        .map(|((&i, &u), &s)| membrane_update(i, u, s, params))
        .collect();
    let spikes = heaviside(&potential, params.threshold);
    let shape = state.potential.shape.clone();
    let spike_t = Tensor::new(spikes, shape.clone())?;
    Ok((
        MembraneState {
            potential: Tensor::new(potential, shape)?,
            last_spike: spike_t.clone(),
        },
        spike_t,
    ))
}

#[inline]
pub(crate) fn membrane_update(current: f64, prev: f64, prev_spike: f64, params: &LifParams) -> f64 {
    let reset = if prev_spike != 0.0 {
        prev_spike * params.threshold
    } else {
        0.0
    };
    current + params.decay * prev - reset
}

/// Inclusive threshold: `u >= threshold` fires.
pub fn heaviside(u: &[f64], threshold: f64) -> Vec<f64> {
    u.iter().map(|&v| heaviside_scalar(v, threshold)).collect()
}

#[inline]
pub fn heaviside_scalar(u: f64, threshold: f64) -> f64 {
    if u >= threshold {
        1.0
    } else {
        0.0
    }
}

/// Arctan pseudo-derivative `(alpha/2) / (1 + (pi*alpha*u/2)^2)`.
pub fn surrogate_grad(u_minus_thr: &[f64], alpha: f64) -> Vec<f64> {
    u_minus_thr
        .iter()
        .map(|&u| surrogate_grad_scalar(u, alpha))
        .collect()
}

#[inline]
pub fn surrogate_grad_scalar(u: f64, alpha: f64) -> f64 {
    let z = 0.5 * PI * alpha * u;
    if !z.is_finite() {
        return 0.0;
    }
    0.5 * alpha / (1.0 + z * z)
}

/// Smooth stand-in for the step function, used in soft-forward gradient checks.
pub fn soft_spike(u_minus_thr: &[f64], alpha: f64) -> Vec<f64> {
    u_minus_thr
        .iter()
        .map(|&u| soft_spike_scalar(u, alpha))
        .collect()
}

#[inline]
pub fn soft_spike_scalar(u: f64, alpha: f64) -> f64 {
    (0.5 * PI * alpha * u).atan() / PI + 0.5
}
