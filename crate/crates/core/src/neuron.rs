//! Leaky integrate-and-fire dynamics with soft reset.
//!
//! One call advances one discrete time step:
//!
//! ```text
//! u[t] = γ (u[t-1] - v_th y[t-1]) + I[t]
//! y[t] = Θ(u[t] - v_th)            Θ(0) = 1
//! ```
//!
//! The input current `I[t]` (already `W·x[t]`, plus `W_rec·y[t-1]` for the
//! recurrent variant) is computed by the caller.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::psi::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams {
    pub gamma: f64,
    pub v_th: f64,
}

impl NeuronParams {
    pub fn new(gamma: f64, v_th: f64) -> Result<Self> {
        let p = Self { gamma, v_th };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("leak factor gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.v_th > 0.0) || !self.v_th.is_finite() {
            return Err(Error::Config(format!("threshold v_th must be positive, got {}", self.v_th)));
        }
        Ok(())
    }
}

impl Default for NeuronParams {
    fn default() -> Self {
        Self { gamma: 0.5, v_th: 0.8 }
    }
}

/// Output nonlinearity. `Heaviside` is the spiking neuron; `Sigmoid` is a
/// differentiable stand-in used only for finite-difference validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Firing {
    #[default]
    Heaviside,
    Sigmoid {
        k: f64,
    },
}

impl Firing {
    #[inline]
    pub fn fire(self, du: f64) -> f64 {
        match self {
            Firing::Heaviside => {
                if du >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Firing::Sigmoid { k } => sigmoid(k * du),
        }
    }

    /// Exact derivative of the smoothed firing function; not defined for the
    /// Heaviside case, where a surrogate is used instead.
    #[inline]
    pub fn smooth_derivative(self, du: f64) -> Option<f64> {
        match self {
            Firing::Heaviside => None,
            Firing::Sigmoid { k } => {
                let s = sigmoid(k * du);
                Some(k * s * (1.0 - s))
            }
        }
    }
}

/// Membrane potentials and last emitted spikes of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub u: Array1<f64>,
    pub y_prev: Array1<f64>,
}

impl LayerState {
    pub fn zeros(width: usize) -> Self {
        Self { u: Array1::zeros(width), y_prev: Array1::zeros(width) }
    }

    pub fn width(&self) -> usize {
        self.u.len()
    }

    pub fn reset(&mut self) {
        self.u.fill(0.0);
        self.y_prev.fill(0.0);
    }

    /// Leak, soft reset and integrate `current` in place, then fire.
    /// `y_prev` holds the new spikes on return.
    pub(crate) fn advance(&mut self, current: &Array1<f64>, params: &NeuronParams, firing: Firing) {
        let (gamma, v_th) = (params.gamma, params.v_th);
        ndarray::Zip::from(&mut self.u).and(&mut self.y_prev).and(current).for_each(|u, y, &i| {
            *u = gamma * (*u - v_th * *y) + i;
            *y = firing.fire(*u - v_th);
        });
    }
}

pub fn lif_step(
    state: &LayerState,
    input_current: &Array1<f64>,
    params: &NeuronParams,
) -> Result<(LayerState, Array1<f64>)> {
    check_len("lif_step input current", state.width(), input_current.len())?;
    let mut next = state.clone();
    next.advance(input_current, params, Firing::Heaviside);
    let spikes = next.y_prev.clone();
    Ok((next, spikes))
}

pub fn rlif_step(
    state: &LayerState,
    ff_current: &Array1<f64>,
    rec_weights: &Array2<f64>,
    params: &NeuronParams,
) -> Result<(LayerState, Array1<f64>)> {
    let n = state.width();
    if rec_weights.nrows() != rec_weights.ncols() {
        return Err(Error::Config(format!(
            "recurrent weights must be square, got {}x{}",
            rec_weights.nrows(),
            rec_weights.ncols()
        )));
    }
    check_len("rlif_step recurrent weights", n, rec_weights.nrows())?;
    check_len("rlif_step feedforward current", n, ff_current.len())?;
    let current = ff_current + &rec_weights.dot(&state.y_prev);
    lif_step(state, &current, params)
}

/// Non-spiking leaky integrator: `u' = γ u + I`.
pub fn leaky_readout_step(u: &Array1<f64>, input_current: &Array1<f64>, gamma: f64) -> Result<Array1<f64>> {
    check_len("leaky_readout_step input current", u.len(), input_current.len())?;
    Ok(u * gamma + input_current)
}
