//! Reference surrogate-gradient backpropagation through time.
//!
//! The forward pass is recorded on a [`Tape`] holding the input and every
//! layer's membrane at every step; spikes are recomputed from the stored
//! membranes. The backward pass uses the detached-reset expansion
//!
//! ```text
//! ∂L/∂u[t] = ∂L/∂y[t] · Θ′(u[t]) + γ · ∂L/∂u[t+1]
//! ```
//!
//! with recurrent layers also routing credit through `W_rec` and `y[t-1]`.
//!
//! In smoothed mode (`Firing::Sigmoid`) the spike function is a steep
//! sigmoid, Θ′ is its exact derivative and the soft-reset term is dropped
//! from the forward pass, so the recorded loss is a differentiable function
//! of the weights and can be checked against finite differences.

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{check_len, Error, Result};
use crate::loss::{LossKind, Target};
use crate::network::{LayerKind, NetworkSpec, Weights};
use crate::neuron::Firing;
use crate::psi::psi_eval;

/// Steepness of the smoothed firing function used for gradient checks.
pub const SMOOTH_K: f64 = 10.0;

/// Which steps contribute to the loss and how.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub loss: LossKind,
    /// Steps `t > signal_onset` (1-indexed) contribute `L_t`.
    pub signal_onset: usize,
}

impl Objective {
    pub fn every_step(loss: LossKind) -> Self {
        Self { loss, signal_onset: 0 }
    }
}

/// Full forward history of one sequence.
#[derive(Debug, Clone)]
pub struct Tape {
    firing: Firing,
    inputs: Vec<Array1<f64>>,
    /// `membranes[t][l]`
    membranes: Vec<Vec<Array1<f64>>>,
}

impl Tape {
    pub fn record(net: &NetworkSpec, weights: &Weights, frames: &Array2<f64>, firing: Firing) -> Result<Self> {
        net.validate()?;
        weights.check_shapes(net)?;
        check_len("tape input width", net.input_width, frames.ncols())?;
        let ff: Vec<_> = (0..net.num_layers()).map(|l| weights.effective_ff(net, l)).collect();
        let mut tape =
            Self { firing, inputs: Vec::with_capacity(frames.nrows()), membranes: Vec::with_capacity(frames.nrows()) };
        let mut u: Vec<Array1<f64>> = net.layers.iter().map(|s| Array1::zeros(s.width)).collect();
        let mut y_prev: Vec<Array1<f64>> = u.clone();
        for frame in frames.axis_iter(Axis(0)) {
            let mut input = frame.to_owned();
            tape.inputs.push(input.clone());
            for (l, spec) in net.layers.iter().enumerate() {
                let mut current = ff[l].dot(&input);
                if let Some(rec) = &weights.layers[l].rec {
                    current += &rec.dot(&y_prev[l]);
                }
                let gamma = spec.neuron.gamma;
                let output = match spec.kind {
                    LayerKind::Readout => {
                        u[l] = gamma * &u[l] + &current;
                        u[l].clone()
                    }
                    LayerKind::Dense | LayerKind::Recurrent => {
                        let v_th = spec.neuron.v_th;
                        let reset = match firing {
                            Firing::Heaviside => v_th,
                            Firing::Sigmoid { .. } => 0.0,
                        };
                        ndarray::Zip::from(&mut u[l])
                            .and(&y_prev[l])
                            .and(&current)
                            .for_each(|u, &y, &i| *u = gamma * (*u - reset * y) + i);
                        let y = u[l].mapv(|v| firing.fire(v - v_th));
                        y_prev[l] = y.clone();
                        y
                    }
                };
                input = output;
            }
            tape.membranes.push(u.clone());
        }
        Ok(tape)
    }

    /// Number of recorded steps.
    pub fn len(&self) -> usize {
        self.membranes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.membranes.is_empty()
    }

    pub fn firing(&self) -> Firing {
        self.firing
    }

    /// Elements held by the tape: the input and every membrane, per step.
    pub fn stored_elements(&self) -> usize {
        let inputs: usize = self.inputs.iter().map(|x| x.len()).sum();
        let membranes: usize = self.membranes.iter().flatten().map(|u| u.len()).sum();
        inputs + membranes
    }

    pub fn membrane(&self, t: usize, l: usize) -> &Array1<f64> {
        &self.membranes[t][l]
    }

    /// Layer output at step `t`: spikes for spiking layers, the membrane for
    /// the readout.
    pub fn output(&self, net: &NetworkSpec, t: usize, l: usize) -> Array1<f64> {
        let spec = &net.layers[l];
        let u = &self.membranes[t][l];
        match spec.kind {
            LayerKind::Readout => u.clone(),
            _ => u.mapv(|v| self.firing.fire(v - spec.neuron.v_th)),
        }
    }

    fn presynaptic(&self, net: &NetworkSpec, t: usize, l: usize) -> Array1<f64> {
        if l == 0 {
            self.inputs[t].clone()
        } else {
            self.output(net, t, l - 1)
        }
    }

    fn firing_derivative(&self, net: &NetworkSpec, t: usize, l: usize) -> Array1<f64> {
        let spec = &net.layers[l];
        let u = &self.membranes[t][l];
        match self.firing {
            Firing::Heaviside => psi_eval(spec.surrogate, u, spec.neuron.v_th),
            smooth => u.mapv(|v| smooth.smooth_derivative(v - spec.neuron.v_th).expect("smooth firing")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// `Σ_t L_t` over contributing steps.
    pub loss: f64,
    /// `∂L/∂w` for every matrix, shaped like the weights.
    pub grads: Weights,
}

/// Loss value and `∂L/∂output[t]` for every step.
fn output_gradients(
    net: &NetworkSpec,
    tape: &Tape,
    target: &Target,
    objective: &Objective,
) -> Result<(f64, Vec<Array1<f64>>)> {
    let top = net.num_layers() - 1;
    let loss = objective.loss.loss();
    let width = net.output_width();
    let mut total = 0.0;
    let mut grads = vec![Array1::zeros(width); tape.len()];
    let mut running = Array1::zeros(width);
    let mut per_step = Vec::new();
    for (t, g) in grads.iter_mut().enumerate().skip(objective.signal_onset) {
        let out = tape.output(net, t, top);
        let (value, grad) = if loss.accumulates() {
            running += &out;
            loss.step(&running, target)?
        } else {
            loss.step(&out, target)?
        };
        total += value;
        if loss.accumulates() {
            per_step.push(grad);
        } else {
            *g = grad;
        }
    }
    if loss.accumulates() {
        // L_t depends on every earlier contributing output through the sum.
        let mut suffix = Array1::zeros(width);
        for (k, grad) in per_step.iter().enumerate().rev() {
            suffix += grad;
            grads[objective.signal_onset + k] = suffix.clone();
        }
    }
    Ok((total, grads))
}

pub fn bptt_gradients(
    net: &NetworkSpec,
    weights: &Weights,
    tape: &Tape,
    target: &Target,
    objective: &Objective,
) -> Result<Gradients> {
    if tape.is_empty() {
        return Err(Error::Usage("no recorded forward pass: the tape is empty".into()));
    }
    if tape.membranes[0].len() != net.num_layers() {
        return Err(Error::Usage("tape was recorded for a different network".into()));
    }
    weights.check_shapes(net)?;
    if objective.signal_onset > tape.len() {
        return Err(Error::Config(format!(
            "signal_onset ({}) exceeds recorded steps ({})",
            objective.signal_onset,
            tape.len()
        )));
    }
    let (loss, d_out) = output_gradients(net, tape, target, objective)?;
    let ff: Vec<_> = (0..net.num_layers()).map(|l| weights.effective_ff(net, l)).collect();
    let top = net.num_layers() - 1;
    let mut grads = weights.zeros_like();
    let mut g_next: Vec<Array1<f64>> = net.layers.iter().map(|s| Array1::zeros(s.width)).collect();
    for t in (0..tape.len()).rev() {
        let mut from_above = d_out[t].clone();
        for l in (0..=top).rev() {
            let spec = &net.layers[l];
            let mut dy = from_above;
            if let Some(rec) = &weights.layers[l].rec {
                dy += &rec.t().dot(&g_next[l]);
            }
            let local = match spec.kind {
                LayerKind::Readout => dy,
                _ => dy * &tape.firing_derivative(net, t, l),
            };
            let g_u = local + spec.neuron.gamma * &g_next[l];
            let x = tape.presynaptic(net, t, l);
            outer_add(&mut grads.layers[l].ff, &g_u, &x);
            if let Some(dr) = grads.layers[l].rec.as_mut() {
                if t > 0 {
                    outer_add(dr, &g_u, &tape.output(net, t - 1, l));
                }
            }
            from_above = ff[l].t().dot(&g_u);
            g_next[l] = g_u;
        }
    }
    Ok(Gradients { loss, grads })
}

fn outer_add(m: &mut Array2<f64>, col: &Array1<f64>, row: &Array1<f64>) {
    for (i, mut r) in m.axis_iter_mut(Axis(0)).enumerate() {
        if col[i] != 0.0 {
            r.scaled_add(col[i], row);
        }
    }
}

/// Record and differentiate one sample.
pub fn bptt_sample(
    net: &NetworkSpec,
    weights: &Weights,
    sample: &Sample,
    objective: &Objective,
    firing: Firing,
) -> Result<Gradients> {
    let tape = Tape::record(net, weights, &sample.frames, firing)?;
    bptt_gradients(net, weights, &tape, &sample.target, objective)
}

/// Loss of the forward pass alone.
pub fn sequence_loss(
    net: &NetworkSpec,
    weights: &Weights,
    sample: &Sample,
    objective: &Objective,
    firing: Firing,
) -> Result<f64> {
    let tape = Tape::record(net, weights, &sample.frames, firing)?;
    Ok(output_gradients(net, &tape, &sample.target, objective)?.0)
}

/// Address of one scalar weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coordinate {
    pub layer: usize,
    pub recurrent: bool,
    pub row: usize,
    pub col: usize,
}

fn coordinates(weights: &Weights) -> Vec<Coordinate> {
    let mut out = Vec::new();
    for (layer, lw) in weights.layers.iter().enumerate() {
        for (recurrent, m) in std::iter::once((false, &lw.ff)).chain(lw.rec.as_ref().map(|r| (true, r))) {
            for ((row, col), _) in m.indexed_iter() {
                out.push(Coordinate { layer, recurrent, row, col });
            }
        }
    }
    out
}

fn entry_mut(weights: &mut Weights, c: Coordinate) -> &mut f64 {
    let lw = &mut weights.layers[c.layer];
    let m = if c.recurrent { lw.rec.as_mut().expect("recurrent matrix") } else { &mut lw.ff };
    &mut m[[c.row, c.col]]
}

fn entry(weights: &Weights, c: Coordinate) -> f64 {
    let lw = &weights.layers[c.layer];
    let m = if c.recurrent { lw.rec.as_ref().expect("recurrent matrix") } else { &lw.ff };
    m[[c.row, c.col]]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiniteDifferenceReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst: Option<Coordinate>,
}

/// Absolute denominator floor for relative errors.
const REL_FLOOR: f64 = 1e-6;
/// Gradients smaller than this fraction of the largest one are compared
/// against that scale; their differences are dominated by round-off in the
/// loss.
const REL_SCALE: f64 = 1e-5;

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare the smoothed-mode oracle gradient with central differences on
/// up to `max_coords` randomly chosen weights (all of them when fewer).
pub fn finite_difference_check(
    net: &NetworkSpec,
    weights: &Weights,
    sample: &Sample,
    objective: &Objective,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<FiniteDifferenceReport> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    if net.weight_standardization {
        return Err(Error::Config(
            "finite-difference check differentiates raw weights; disable weight standardisation".into(),
        ));
    }
    let firing = Firing::Sigmoid { k: SMOOTH_K };
    let analytic = bptt_sample(net, weights, sample, objective, firing)?.grads;
    let floor = REL_FLOOR.max(REL_SCALE * analytic.max_abs());
    let all = coordinates(weights);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<Coordinate> = if all.len() <= max_coords {
        all
    } else {
        sample_indices(&mut rng, all.len(), max_coords).into_iter().map(|i| all[i]).collect()
    };
    let mut report =
        FiniteDifferenceReport { coordinates: chosen.len(), max_rel_error: 0.0, max_abs_error: 0.0, worst: None };
    let mut probe = weights.clone();
    for c in chosen {
        let w0 = entry(weights, c);
        *entry_mut(&mut probe, c) = w0 + h;
        let plus = sequence_loss(net, &probe, sample, objective, firing)?;
        *entry_mut(&mut probe, c) = w0 - h;
        let minus = sequence_loss(net, &probe, sample, objective, firing)?;
        *entry_mut(&mut probe, c) = w0;
        let numeric = (plus - minus) / (2.0 * h);
        let exact = entry(&analytic, c);
        let rel = relative_error(exact, numeric, floor);
        report.max_abs_error = report.max_abs_error.max((exact - numeric).abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(c);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerSpec;
    use crate::neuron::NeuronParams;
    use crate::psi::PsiKind;
    use ndarray::array;
    use rand::Rng;

    fn single_neuron(gamma: f64) -> NetworkSpec {
        NetworkSpec::new(
            1,
            vec![LayerSpec::new(LayerKind::Dense, 1, NeuronParams { gamma, v_th: 0.8 })
                .with_surrogate(PsiKind::RationalBell)],
        )
    }

    fn weights_of(ff: Vec<Array2<f64>>) -> Weights {
        Weights { layers: ff.into_iter().map(|ff| crate::network::LayerWeights { ff, rec: None }).collect() }
    }

    #[test]
    fn two_step_hand_expansion() {
        let net = single_neuron(0.5);
        let w = weights_of(vec![array![[0.7]]]);
        let frames = array![[1.0], [1.0]];
        let target = Target::Values(array![0.0]);
        let obj = Objective::every_step(LossKind::Mse);
        let tape = Tape::record(&net, &w, &frames, Firing::Heaviside).unwrap();
        let g = bptt_gradients(&net, &w, &tape, &target, &obj).unwrap();

        let (u1, u2) = (tape.membrane(0, 0)[0], tape.membrane(1, 0)[0]);
        assert_eq!(u1, 0.7);
        assert!((u2 - (0.5 * 0.7 + 0.7)).abs() < 1e-15);
        let d = |u: f64| psi_eval(PsiKind::RationalBell, &array![u], 0.8)[0];
        let y = |u: f64| if u >= 0.8 { 1.0 } else { 0.0 };
        // δ[t] = ∂L/∂y[t] = y[t] for ½y² per step.
        let expect = y(u1) * d(u1) * 1.0 + y(u2) * d(u2) * (1.0 + 0.5 * 1.0);
        assert!((g.grads.layers[0].ff[[0, 0]] - expect).abs() < 1e-14);
        assert!(expect > 0.0);
    }

    #[test]
    fn final_step_without_leak_is_one_step_backprop() {
        let net = single_neuron(0.0);
        let w = weights_of(vec![array![[0.9]]]);
        let frames = array![[1.0], [0.0], [1.0]];
        let obj = Objective { loss: LossKind::Mse, signal_onset: 2 };
        let tape = Tape::record(&net, &w, &frames, Firing::Heaviside).unwrap();
        let g = bptt_gradients(&net, &w, &tape, &Target::Values(array![0.0]), &obj).unwrap();
        let u = tape.membrane(2, 0)[0];
        let d = psi_eval(PsiKind::RationalBell, &array![u], 0.8)[0];
        assert!((g.grads.layers[0].ff[[0, 0]] - 1.0 * d * 1.0).abs() < 1e-14);
    }

    #[test]
    fn empty_tape_is_usage_error() {
        let net = single_neuron(0.5);
        let w = weights_of(vec![array![[0.5]]]);
        let tape = Tape::record(&net, &w, &Array2::zeros((0, 1)), Firing::Heaviside).unwrap();
        let err = bptt_gradients(&net, &w, &tape, &Target::Values(array![0.0]), &Objective::every_step(LossKind::Mse));
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    fn small_net(recurrent: bool) -> NetworkSpec {
        let p = NeuronParams { gamma: 0.6, v_th: 0.5 };
        let kind = if recurrent { LayerKind::Recurrent } else { LayerKind::Dense };
        NetworkSpec::new(
            5,
            vec![
                LayerSpec::new(kind, 6, p),
                LayerSpec::new(LayerKind::Dense, 4, p),
                LayerSpec::new(LayerKind::Readout, 3, NeuronParams { gamma: 0.8, v_th: 1.0 }),
            ],
        )
    }

    fn random_sample(rng: &mut ChaCha8Rng, t: usize, width: usize, target: Target) -> Sample {
        Sample {
            frames: Array2::from_shape_simple_fn((t, width), || if rng.gen_bool(0.4) { 1.0 } else { 0.0 }),
            target,
        }
    }

    #[test]
    fn tape_counts_match_bptt_memory_law() {
        let net = small_net(true);
        let w = Weights::init(&net, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in [1, 4, 9] {
            let s = random_sample(&mut rng, t, 5, Target::Class(0));
            let tape = Tape::record(&net, &w, &s.frames, Firing::Heaviside).unwrap();
            assert_eq!(tape.len(), t);
            assert_eq!(tape.stored_elements(), t * net.widths().iter().sum::<usize>());
        }
    }

    #[test]
    fn gradients_are_deterministic() {
        let net = small_net(true);
        let w = Weights::init(&net, 5);
        let s = random_sample(&mut ChaCha8Rng::seed_from_u64(2), 7, 5, Target::Class(1));
        let obj = Objective::every_step(LossKind::CrossEntropy);
        let tape = Tape::record(&net, &w, &s.frames, Firing::Heaviside).unwrap();
        let a = bptt_gradients(&net, &w, &tape, &s.target, &obj).unwrap();
        let b = bptt_gradients(&net, &w, &tape, &s.target, &obj).unwrap();
        assert_eq!(a.grads, b.grads);
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn finite_differences_agree_on_recurrent_net() {
        for (recurrent, loss) in
            [(true, LossKind::CrossEntropy), (false, LossKind::Mse), (true, LossKind::CumulativeMse)]
        {
            let net = small_net(recurrent);
            let w = Weights::init(&net, 11);
            let target = match loss {
                LossKind::CrossEntropy => Target::Class(2),
                _ => Target::Values(array![0.3, -0.2, 0.5]),
            };
            let s = random_sample(&mut ChaCha8Rng::seed_from_u64(4), 8, 5, target);
            let obj = Objective { loss, signal_onset: 2 };
            let r = finite_difference_check(&net, &w, &s, &obj, 1e-4, 200, 1).unwrap();
            assert_eq!(r.coordinates, w.num_params().min(200));
            assert!(r.max_rel_error < 1e-4, "{loss:?}: {r:?}");
        }
    }

    #[test]
    fn rejects_nonpositive_step() {
        let net = small_net(false);
        let w = Weights::init(&net, 1);
        let s = random_sample(&mut ChaCha8Rng::seed_from_u64(4), 3, 5, Target::Class(0));
        let obj = Objective::every_step(LossKind::CrossEntropy);
        assert!(finite_difference_check(&net, &w, &s, &obj, 0.0, 10, 0).is_err());
        assert!(finite_difference_check(&net, &w, &s, &obj, -1e-4, 10, 0).is_err());
    }

    #[test]
    fn zero_weights_give_mirrored_gradients() {
        let p = NeuronParams { gamma: 0.5, v_th: 0.8 };
        let net =
            NetworkSpec::new(2, vec![LayerSpec::new(LayerKind::Dense, 2, p), LayerSpec::new(LayerKind::Readout, 1, p)]);
        let w = Weights::zeros(&net);
        let s = Sample { frames: array![[1.0, 1.0], [0.0, 0.0], [1.0, 1.0]], target: Target::Values(array![1.0]) };
        let g = bptt_sample(&net, &w, &s, &Objective::every_step(LossKind::Mse), Firing::Sigmoid { k: SMOOTH_K })
            .unwrap()
            .grads;
        let top = &g.layers[1].ff;
        assert_eq!(top[[0, 0]], top[[0, 1]]);
        assert!(top[[0, 0]] != 0.0);
        let hidden = &g.layers[0].ff;
        assert_eq!(hidden.row(0), hidden.row(1));
    }

    #[test]
    fn central_difference_error_is_second_order() {
        let net = small_net(false);
        let w = Weights::init(&net, 8);
        let s = random_sample(&mut ChaCha8Rng::seed_from_u64(9), 6, 5, Target::Class(0));
        let obj = Objective::every_step(LossKind::CrossEntropy);
        let firing = Firing::Sigmoid { k: SMOOTH_K };
        let exact = bptt_sample(&net, &w, &s, &obj, firing).unwrap().grads;
        let c = Coordinate { layer: 0, recurrent: false, row: 1, col: 2 };
        let fd_error = |h: f64| {
            let mut p = w.clone();
            *entry_mut(&mut p, c) += h;
            let plus = sequence_loss(&net, &p, &s, &obj, firing).unwrap();
            *entry_mut(&mut p, c) -= 2.0 * h;
            let minus = sequence_loss(&net, &p, &s, &obj, firing).unwrap();
            ((plus - minus) / (2.0 * h) - entry(&exact, c)).abs()
        };
        let ratio = fd_error(2e-2) / fd_error(1e-2);
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }
}
