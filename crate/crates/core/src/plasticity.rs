//! Exponential traces, classical STDP and the eligibility traces that drive
//! the three-factor update.
//!
//! The eligibility of synapse `i <- j` at step `t` combines a causal term
//! (current postsynaptic Ψ times the filtered presynaptic history) and a
//! non-causal term (current presynaptic spike times the filtered
//! postsynaptic Ψ history, excluding step `t` itself):
//!
//! ```text
//! e_ij[t] = α_pre  Ψ(u_i[t]) Σ_{t'=0..t}   λ_pre^(t-t')  x_j[t']
//!         + α_post x_j[t]    Σ_{t'=0..t-1} λ_post^(t-t') Ψ(u_i[t'])
//! ```
//!
//! The forward forms below keep one trace per presynaptic input and one per
//! postsynaptic neuron, so the state carried between steps is
//! `O(fan_in + fan_out)`. The `*_reference` forms evaluate the double sums
//! directly from full histories and exist only as oracles.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::psi::PsiKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StdpParams {
    pub lambda_pre: f64,
    pub lambda_post: f64,
    pub alpha_pre: f64,
    pub alpha_post: f64,
}

impl Default for StdpParams {
    fn default() -> Self {
        Self { lambda_pre: 0.5, lambda_post: 0.2, alpha_pre: 1.0, alpha_post: -1.0 }
    }
}

impl StdpParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_pre", self.lambda_pre), ("lambda_post", self.lambda_post)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !self.alpha_pre.is_finite() || !self.alpha_post.is_finite() {
            return Err(Error::Config("alpha gains must be finite".into()));
        }
        Ok(())
    }

    pub fn with_gains(self, alpha_pre: f64, alpha_post: f64) -> Self {
        Self { alpha_pre, alpha_post, ..self }
    }
}

/// `tr' = λ tr + x`
pub fn trace_update(tr: &Array1<f64>, x: &Array1<f64>, lambda: f64) -> Result<Array1<f64>> {
    check_len("trace_update", tr.len(), x.len())?;
    Ok(tr * lambda + x)
}

#[inline]
pub(crate) fn trace_update_in_place(tr: &mut Array1<f64>, x: ArrayView1<f64>, lambda: f64) {
    ndarray::Zip::from(tr).and(x).for_each(|t, &v| *t = lambda * *t + v);
}

/// Presynaptic and postsynaptic traces of one synaptic layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceBuffer {
    /// Filtered presynaptic activity (`λ_pre`), one entry per input.
    pub tr_x: Array1<f64>,
    /// Filtered postsynaptic Ψ or spikes (`λ_post`), one entry per neuron.
    pub tr_psi: Array1<f64>,
}

impl TraceBuffer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { tr_x: Array1::zeros(fan_in), tr_psi: Array1::zeros(fan_out) }
    }

    pub fn reset(&mut self) {
        self.tr_x.fill(0.0);
        self.tr_psi.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.tr_x.len() + self.tr_psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Advance both traces by one step. `post` is Ψ(u[t]) (or y[t] for
    /// classical STDP) and is included in the updated postsynaptic trace.
    ///
    /// Returns the postsynaptic history `λ_post tr_psi[t-1]`, i.e. the
    /// updated trace without `post`. The non-causal term needs exactly this;
    /// taking it before the update avoids recovering it as `tr_psi - post`,
    /// which cancels badly when the history is small next to `post`.
    pub fn update(&mut self, x: &Array1<f64>, post: &Array1<f64>, params: &StdpParams) -> Result<Array1<f64>> {
        check_len("trace buffer presynaptic input", self.tr_x.len(), x.len())?;
        check_len("trace buffer postsynaptic input", self.tr_psi.len(), post.len())?;
        trace_update_in_place(&mut self.tr_x, x.view(), params.lambda_pre);
        let history = &self.tr_psi * params.lambda_post;
        self.tr_psi.assign(&history);
        self.tr_psi += post;
        Ok(history)
    }
}

/// Rank-two form shared by STDP and the eligibility traces:
/// `out_ij = α_pre post_i tr_x_j + α_post x_j history_i`.
fn pair_term(
    post: ArrayView1<f64>,
    x_now: ArrayView1<f64>,
    tr_x: ArrayView1<f64>,
    history: ArrayView1<f64>,
    params: &StdpParams,
) -> Array2<f64> {
    let mut out = Array2::zeros((post.len(), x_now.len()));
    let ones = Array1::ones(post.len());
    accumulate_modulated(&mut out, ones.view(), post, x_now, tr_x, history, params);
    out
}

fn check_pair(traces: &TraceBuffer, x: &Array1<f64>, post: &Array1<f64>, history: &Array1<f64>) -> Result<()> {
    check_len("pair term presynaptic width", traces.tr_x.len(), x.len())?;
    check_len("pair term postsynaptic width", traces.tr_psi.len(), post.len())?;
    check_len("pair term postsynaptic history", post.len(), history.len())
}

/// Classical STDP weight change from spike traces. `y_history` is the value
/// returned by [`TraceBuffer::update`] for this step.
pub fn stdp_delta(
    y: &Array1<f64>,
    x: &Array1<f64>,
    traces: &TraceBuffer,
    y_history: &Array1<f64>,
    params: &StdpParams,
) -> Result<Array2<f64>> {
    check_pair(traces, x, y, y_history)?;
    Ok(pair_term(y.view(), x.view(), traces.tr_x.view(), y_history.view(), params))
}

/// Feedforward eligibility from the forward traces. `traces.tr_x` must
/// already include `x[t]`; `psi_history` is what [`TraceBuffer::update`]
/// returned for step `t`.
pub fn eligibility_ff(
    psi_u: &Array1<f64>,
    x_now: &Array1<f64>,
    traces: &TraceBuffer,
    psi_history: &Array1<f64>,
    params: &StdpParams,
) -> Result<Array2<f64>> {
    check_pair(traces, x_now, psi_u, psi_history)?;
    Ok(pair_term(psi_u.view(), x_now.view(), traces.tr_x.view(), psi_history.view(), params))
}

/// Recurrent eligibility. Here `traces.tr_x` filters the delayed outputs
/// `y[t-1]` (so it equals the layer's own output trace from the previous
/// step) and `y_prev` is `y[t-1]`.
pub fn eligibility_rec(
    psi_u: &Array1<f64>,
    y_prev: &Array1<f64>,
    traces: &TraceBuffer,
    psi_history: &Array1<f64>,
    params: &StdpParams,
) -> Result<Array2<f64>> {
    check_pair(traces, y_prev, psi_u, psi_history)?;
    Ok(pair_term(psi_u.view(), y_prev.view(), traces.tr_x.view(), psi_history.view(), params))
}

/// `dw_ij += δ_i e_ij` without materialising `e`.
///
/// The modulated eligibility factorises into two outer products, so the cost
/// per call is two rank-one updates of `dw`.
pub fn accumulate_modulated(
    dw: &mut Array2<f64>,
    delta: ArrayView1<f64>,
    psi_u: ArrayView1<f64>,
    x_now: ArrayView1<f64>,
    tr_x: ArrayView1<f64>,
    psi_history: ArrayView1<f64>,
    params: &StdpParams,
) {
    for (i, mut row) in dw.axis_iter_mut(Axis(0)).enumerate() {
        let d = delta[i];
        if d == 0.0 {
            continue;
        }
        let causal = d * params.alpha_pre * psi_u[i];
        let non_causal = d * params.alpha_post * psi_history[i];
        if causal != 0.0 {
            row.scaled_add(causal, &tr_x);
        }
        if non_causal != 0.0 {
            row.scaled_add(non_causal, &x_now);
        }
    }
}

fn check_history(x_history: &Array2<f64>, u_history: &Array2<f64>, t: usize) -> Result<()> {
    check_len("reference history length", x_history.nrows(), u_history.nrows())?;
    if t >= x_history.nrows() {
        return Err(Error::Usage(format!("step {t} outside history of length {}", x_history.nrows())));
    }
    Ok(())
}

/// Direct double-sum feedforward eligibility at step `t` from full
/// `T x fan_in` input and `T x fan_out` membrane histories.
pub fn eligibility_ff_reference(
    x_history: &Array2<f64>,
    u_history: &Array2<f64>,
    t: usize,
    params: &StdpParams,
    psi: PsiKind,
    v_th: f64,
) -> Result<Array2<f64>> {
    check_history(x_history, u_history, t)?;
    let (fan_in, fan_out) = (x_history.ncols(), u_history.ncols());
    let psi_at = |s: usize, i: usize| psi.eval(u_history[[s, i]] - v_th);
    let mut e = Array2::zeros((fan_out, fan_in));
    for i in 0..fan_out {
        let mut post_sum = 0.0;
        for s in 0..t {
            post_sum += params.lambda_post.powi((t - s) as i32) * psi_at(s, i);
        }
        let psi_now = psi_at(t, i);
        for j in 0..fan_in {
            let mut pre_sum = 0.0;
            for s in 0..=t {
                pre_sum += params.lambda_pre.powi((t - s) as i32) * x_history[[s, j]];
            }
            e[[i, j]] = params.alpha_pre * psi_now * pre_sum + params.alpha_post * x_history[[t, j]] * post_sum;
        }
    }
    Ok(e)
}

/// Direct double-sum recurrent eligibility at step `t`. `y_history` holds
/// the layer's own outputs; `y[-1]` is taken as zero.
pub fn eligibility_rec_reference(
    y_history: &Array2<f64>,
    u_history: &Array2<f64>,
    t: usize,
    params: &StdpParams,
    psi: PsiKind,
    v_th: f64,
) -> Result<Array2<f64>> {
    check_history(y_history, u_history, t)?;
    let n = u_history.ncols();
    check_len("recurrent reference width", n, y_history.ncols())?;
    let psi_at = |s: usize, i: usize| psi.eval(u_history[[s, i]] - v_th);
    let mut e = Array2::zeros((n, n));
    for i in 0..n {
        let mut post_sum = 0.0;
        for s in 0..t {
            post_sum += params.lambda_post.powi((t - s) as i32) * psi_at(s, i);
        }
        let psi_now = psi_at(t, i);
        for k in 0..n {
            let mut pre_sum = 0.0;
            for s in 1..=t {
                pre_sum += params.lambda_pre.powi((t - s) as i32) * y_history[[s - 1, k]];
            }
            let y_delayed = if t == 0 { 0.0 } else { y_history[[t - 1, k]] };
            e[[i, k]] = params.alpha_pre * psi_now * pre_sum + params.alpha_post * y_delayed * post_sum;
        }
    }
    Ok(e)
}
