//! Online training loop.
//!
//! Each time step runs the layer stack forward, advances the per-layer
//! traces, and, once the learning signal is active, combines the output
//! error routed to every layer with the eligibility traces into a weight
//! change. Nothing older than the previous step is retained: the carried
//! state is the membrane, the last spikes and the traces of each layer.
//!
//! Steps are numbered `t = 1..=T`; the learning signal is active for
//! `t > T_l`, so a sequence accumulates exactly `T - T_l` updates. Updates
//! are summed over the sequence and handed to the optimizer at its end.

use std::borrow::Cow;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{check_len, Error, Result};
use crate::loss::{Loss, LossKind, Target};
use crate::network::{LayerKind, NetworkSpec, Weights};
use crate::neuron::{Firing, LayerState};
use crate::optim::{Optimizer, OptimizerKind};
use crate::plasticity::{accumulate_modulated, trace_update_in_place, StdpParams, TraceBuffer};
use crate::psi::psi_eval;
use crate::signal::{LearningSignal, SignalMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningConfig {
    #[serde(default)]
    pub mode: SignalMode,
    /// Sequence length `T`.
    pub time_steps: usize,
    /// Learning-signal onset `T_l`; updates happen at steps `T_l+1..=T`.
    pub signal_onset: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub stdp: StdpParams,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl LearningConfig {
    /// Validates the config and returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.time_steps == 0 {
            return Err(Error::Config("time_steps must be at least 1".into()));
        }
        if self.signal_onset > self.time_steps {
            return Err(Error::Config(format!(
                "signal_onset ({}) exceeds time_steps ({})",
                self.signal_onset, self.time_steps
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        self.stdp.validate()?;
        let mut warnings = Vec::new();
        if self.signal_onset == self.time_steps {
            warnings.push(format!(
                "signal_onset equals time_steps ({}): the learning signal is never active and no weight updates will occur",
                self.time_steps
            ));
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(warnings)
    }

    /// Whether zero-based step index `step` (i.e. `t = step + 1`) is active.
    #[inline]
    pub fn is_active(&self, step: usize) -> bool {
        step >= self.signal_onset
    }

    pub fn active_steps(&self) -> usize {
        self.time_steps - self.signal_onset.min(self.time_steps)
    }
}

/// Per-layer state carried between steps.
#[derive(Debug, Clone)]
struct LayerRuntime {
    neuron: LayerState,
    /// Hidden spiking layers only.
    traces: Option<TraceBuffer>,
    /// Recurrent layers only: `λ_pre` trace of the delayed outputs `y[t-1]`.
    rec_trace: Option<Array1<f64>>,
}

/// Counted elements retained between time steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainedState {
    pub trace_elements: usize,
    pub neuron_elements: usize,
}

impl RetainedState {
    pub fn total(&self) -> usize {
        self.trace_elements + self.neuron_elements
    }

    pub fn max(self, other: Self) -> Self {
        Self {
            trace_elements: self.trace_elements.max(other.trace_elements),
            neuron_elements: self.neuron_elements.max(other.neuron_elements),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetworkState {
    layers: Vec<LayerRuntime>,
}

impl NetworkState {
    pub fn new(net: &NetworkSpec) -> Self {
        let last = net.num_layers() - 1;
        let layers = net
            .layers
            .iter()
            .enumerate()
            .map(|(l, spec)| {
                let hidden = l < last;
                let neuron = match spec.kind {
                    LayerKind::Readout => LayerState { u: Array1::zeros(spec.width), y_prev: Array1::zeros(0) },
                    _ => LayerState::zeros(spec.width),
                };
                LayerRuntime {
                    neuron,
                    traces: hidden.then(|| TraceBuffer::zeros(net.fan_in(l), spec.width)),
                    rec_trace: (spec.kind == LayerKind::Recurrent).then(|| Array1::zeros(spec.width)),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn reset(&mut self) {
        for layer in &mut self.layers {
            layer.neuron.reset();
            if let Some(t) = layer.traces.as_mut() {
                t.reset();
            }
            if let Some(r) = layer.rec_trace.as_mut() {
                r.fill(0.0);
            }
        }
    }

    pub fn layer_state(&self, l: usize) -> &LayerState {
        &self.layers[l].neuron
    }

    pub fn traces(&self, l: usize) -> Option<&TraceBuffer> {
        self.layers[l].traces.as_ref()
    }

    pub fn retained(&self) -> RetainedState {
        let mut r = RetainedState::default();
        for layer in &self.layers {
            r.neuron_elements += layer.neuron.u.len() + layer.neuron.y_prev.len();
            r.trace_elements += layer.traces.as_ref().map_or(0, TraceBuffer::len);
            r.trace_elements += layer.rec_trace.as_ref().map_or(0, |t| t.len());
        }
        r
    }
}

/// Recurrent-path quantities of one step.
#[derive(Debug, Clone)]
pub struct RecurrentStep {
    pub y_prev: Array1<f64>,
    pub tr_delayed: Array1<f64>,
}

/// Everything one layer contributes to an update at the current step.
#[derive(Debug, Clone)]
pub struct LayerStep {
    /// Presynaptic activity `x^(l)[t]` (input spikes or previous layer).
    pub input: Array1<f64>,
    pub u: Array1<f64>,
    /// Spikes for spiking layers, the membrane for the readout.
    pub output: Array1<f64>,
    /// Ψ(u[t]); hidden layers only.
    pub psi: Array1<f64>,
    /// Θ′(u[t]); hidden layers only.
    pub surrogate: Array1<f64>,
    pub tr_x: Array1<f64>,
    /// `λ_post tr_psi[t-1]`, the postsynaptic Ψ history before this step.
    pub psi_history: Array1<f64>,
    pub rec: Option<RecurrentStep>,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub layers: Vec<LayerStep>,
}

impl StepRecord {
    pub fn readout(&self) -> &Array1<f64> {
        &self.layers.last().expect("non-empty network").output
    }
}

/// Forward weights after optional standardisation, fixed for one sequence.
pub struct EffectiveWeights<'a> {
    ff: Vec<Cow<'a, Array2<f64>>>,
    rec: Vec<Option<&'a Array2<f64>>>,
}

impl<'a> EffectiveWeights<'a> {
    pub fn new(net: &NetworkSpec, weights: &'a Weights) -> Self {
        Self {
            ff: (0..net.num_layers()).map(|l| weights.effective_ff(net, l)).collect(),
            rec: weights.layers.iter().map(|lw| lw.rec.as_ref()).collect(),
        }
    }

    pub fn ff_refs(&self) -> Vec<&Array2<f64>> {
        self.ff.iter().map(|c| c.as_ref()).collect()
    }
}

/// Advance the whole stack by one step with input frame `x_t`.
pub fn forward_step(
    net: &NetworkSpec,
    weights: &EffectiveWeights<'_>,
    state: &mut NetworkState,
    x_t: &Array1<f64>,
    stdp: &StdpParams,
) -> Result<StepRecord> {
    check_len("forward_step input", net.input_width, x_t.len())?;
    let last = net.num_layers() - 1;
    let mut records: Vec<LayerStep> = Vec::with_capacity(net.num_layers());
    for (l, spec) in net.layers.iter().enumerate() {
        let input = if l == 0 { x_t.clone() } else { records[l - 1].output.clone() };
        let rt = &mut state.layers[l];
        let mut current = weights.ff[l].dot(&input);
        let mut rec = None;
        if let (Some(w_rec), Some(tr)) = (weights.rec[l], rt.rec_trace.as_mut()) {
            let y_prev = rt.neuron.y_prev.clone();
            current += &w_rec.dot(&y_prev);
            trace_update_in_place(tr, y_prev.view(), stdp.lambda_pre);
            rec = Some(RecurrentStep { tr_delayed: tr.clone(), y_prev });
        }
        let output = match spec.kind {
            LayerKind::Readout => {
                let gamma = spec.neuron.gamma;
                rt.neuron.u.zip_mut_with(&current, |u, &i| *u = gamma * *u + i);
                rt.neuron.u.clone()
            }
            LayerKind::Dense | LayerKind::Recurrent => {
                rt.neuron.advance(&current, &spec.neuron, Firing::Heaviside);
                rt.neuron.y_prev.clone()
            }
        };
        let u = rt.neuron.u.clone();
        let (psi, surrogate, tr_x, psi_history) = if l < last {
            let psi = psi_eval(spec.psi, &u, spec.neuron.v_th);
            let surrogate = psi_eval(spec.surrogate, &u, spec.neuron.v_th);
            let traces = rt.traces.as_mut().expect("hidden layer traces");
            let history = traces.update(&input, &psi, stdp)?;
            (psi, surrogate, traces.tr_x.clone(), history)
        } else {
            let empty = Array1::zeros(0);
            (empty.clone(), empty.clone(), empty.clone(), empty)
        };
        records.push(LayerStep { input, u, output, psi, surrogate, tr_x, psi_history, rec });
    }
    Ok(StepRecord { layers: records })
}

/// Add one step's three-factor update to `acc`.
///
/// `delta_out` and `hidden` are descent-direction signals (negated loss
/// gradients). Hidden layers use `δ ⊙ e`; the last layer uses the outer
/// product of its error with its presynaptic activity.
pub fn accumulate_step(
    acc: &mut Weights,
    record: &StepRecord,
    hidden: &[Array1<f64>],
    delta_out: &Array1<f64>,
    stdp: &StdpParams,
) {
    let last = record.layers.len() - 1;
    for (l, (step, delta)) in record.layers[..last].iter().zip(hidden).enumerate() {
        let lw = &mut acc.layers[l];
        accumulate_modulated(
            &mut lw.ff,
            delta.view(),
            step.psi.view(),
            step.input.view(),
            step.tr_x.view(),
            step.psi_history.view(),
            stdp,
        );
        if let (Some(rec), Some(dw_rec)) = (&step.rec, lw.rec.as_mut()) {
            accumulate_modulated(
                dw_rec,
                delta.view(),
                step.psi.view(),
                rec.y_prev.view(),
                rec.tr_delayed.view(),
                step.psi_history.view(),
                stdp,
            );
        }
    }
    let top = &record.layers[last];
    let dw = &mut acc.layers[last].ff;
    for (i, mut row) in dw.axis_iter_mut(Axis(0)).enumerate() {
        if delta_out[i] != 0.0 {
            row.scaled_add(delta_out[i], &top.input);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    /// Mean per-step loss over active steps (last value for accumulating
    /// losses); zero when no step is active.
    pub loss: f64,
    /// Argmax of the readout summed over active steps, for class targets.
    pub predicted: Option<usize>,
    pub correct: Option<bool>,
    pub update_events: usize,
    pub retained: RetainedState,
}

struct LossTracker<'a> {
    loss: &'a dyn Loss,
    target: &'a Target,
    readout_sum: Option<Array1<f64>>,
    total: f64,
    last: f64,
    count: usize,
}

impl<'a> LossTracker<'a> {
    fn new(kind: LossKind, target: &'a Target) -> Self {
        Self { loss: kind.loss(), target, readout_sum: None, total: 0.0, last: 0.0, count: 0 }
    }

    /// Returns the descent-direction output error.
    fn observe(&mut self, readout: &Array1<f64>) -> Result<Array1<f64>> {
        match self.readout_sum.as_mut() {
            Some(s) => *s += readout,
            None => self.readout_sum = Some(readout.clone()),
        }
        let (value, grad) = if self.loss.accumulates() {
            let running = self.readout_sum.as_ref().expect("set above");
            self.loss.step(running, self.target)?
        } else {
            self.loss.step(readout, self.target)?
        };
        self.total += value;
        self.last = value;
        self.count += 1;
        Ok(-grad)
    }

    fn finish(self, final_readout: &Array1<f64>, update_events: usize, retained: RetainedState) -> SequenceMetrics {
        let loss = if self.count == 0 {
            0.0
        } else if self.loss.accumulates() {
            self.last
        } else {
            self.total / self.count as f64
        };
        let scores = self.readout_sum.as_ref().unwrap_or(final_readout);
        let predicted = self.target.class().map(|_| argmax(scores));
        let correct = self.target.class().zip(predicted).map(|(c, p)| c == p);
        SequenceMetrics { loss, predicted, correct, update_events, retained }
    }
}

pub fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_sample(net: &NetworkSpec, config: &LearningConfig, sample: &Sample) -> Result<()> {
    check_len("sample frame width", net.input_width, sample.frames.ncols())?;
    if sample.frames.nrows() != config.time_steps {
        return Err(Error::Config(format!(
            "sample has {} frames but the config expects T = {}",
            sample.frames.nrows(),
            config.time_steps
        )));
    }
    Ok(())
}

/// Run one sequence and return the summed update without applying it.
pub fn sequence_update(
    net: &NetworkSpec,
    weights: &Weights,
    sample: &Sample,
    config: &LearningConfig,
    signal: &dyn LearningSignal,
) -> Result<(Weights, SequenceMetrics)> {
    check_sample(net, config, sample)?;
    let eff = EffectiveWeights::new(net, weights);
    let ff = eff.ff_refs();
    let mut state = NetworkState::new(net);
    let mut acc = weights.zeros_like();
    let mut tracker = LossTracker::new(config.loss, &sample.target);
    let mut retained = RetainedState::default();
    let mut events = 0;
    let mut final_readout = Array1::zeros(net.output_width());
    for (step, frame) in sample.frames.axis_iter(Axis(0)).enumerate() {
        let record = forward_step(net, &eff, &mut state, &frame.to_owned(), &config.stdp)?;
        retained = retained.max(state.retained());
        if config.is_active(step) {
            let delta_out = tracker.observe(record.readout())?;
            let surrogates: Vec<Array1<f64>> =
                record.layers[..record.layers.len() - 1].iter().map(|s| s.surrogate.clone()).collect();
            let hidden = signal.hidden_signals(&ff, &surrogates, &delta_out)?;
            accumulate_step(&mut acc, &record, &hidden, &delta_out, &config.stdp);
            events += 1;
        }
        final_readout = record.readout().clone();
    }
    Ok((acc, tracker.finish(&final_readout, events, retained)))
}

/// Forward-only pass with the same loss bookkeeping as training.
pub fn evaluate_sequence(
    net: &NetworkSpec,
    weights: &Weights,
    sample: &Sample,
    config: &LearningConfig,
) -> Result<SequenceMetrics> {
    check_sample(net, config, sample)?;
    let eff = EffectiveWeights::new(net, weights);
    let mut state = NetworkState::new(net);
    let mut tracker = LossTracker::new(config.loss, &sample.target);
    let mut retained = RetainedState::default();
    let mut final_readout = Array1::zeros(net.output_width());
    for (step, frame) in sample.frames.axis_iter(Axis(0)).enumerate() {
        let record = forward_step(net, &eff, &mut state, &frame.to_owned(), &config.stdp)?;
        retained = retained.max(state.retained());
        if config.is_active(step) {
            tracker.observe(record.readout())?;
        }
        final_readout = record.readout().clone();
    }
    Ok(tracker.finish(&final_readout, 0, retained))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

impl EpochMetrics {
    pub fn from_sequences(metrics: &[SequenceMetrics]) -> Self {
        if metrics.is_empty() {
            return Self::default();
        }
        let n = metrics.len() as f64;
        let loss = metrics.iter().map(|m| m.loss).sum::<f64>() / n;
        let correct = metrics.iter().filter(|m| m.correct == Some(true)).count();
        let labelled = metrics.iter().filter(|m| m.correct.is_some()).count();
        let accuracy = if labelled == 0 { f64::NAN } else { correct as f64 / labelled as f64 };
        Self { loss, accuracy }
    }
}

/// Owns the weights, learning-signal strategy and optimizer of one run.
pub struct Trainer {
    pub net: NetworkSpec,
    pub config: LearningConfig,
    pub weights: Weights,
    signal: Box<dyn LearningSignal>,
    optimizer: Box<dyn Optimizer>,
    pub warnings: Vec<String>,
}

impl Trainer {
    pub fn new(net: NetworkSpec, config: LearningConfig, seed: u64) -> Result<Self> {
        let weights = Weights::init(&net, seed);
        Self::with_weights(net, config, weights, seed)
    }

    pub fn with_weights(net: NetworkSpec, config: LearningConfig, weights: Weights, seed: u64) -> Result<Self> {
        net.validate()?;
        let warnings = config.validate()?;
        weights.check_shapes(&net)?;
        let signal = config.mode.build(&net, seed);
        let optimizer = config.optimizer.build(config.learning_rate, &weights);
        Ok(Self { net, config, weights, signal, optimizer, warnings })
    }

    pub fn signal(&self) -> &dyn LearningSignal {
        self.signal.as_ref()
    }

    /// One sequence, one optimizer step.
    pub fn train_sequence(&mut self, sample: &Sample) -> Result<SequenceMetrics> {
        let (delta, metrics) = sequence_update(&self.net, &self.weights, sample, &self.config, self.signal.as_ref())?;
        self.optimizer.step(&mut self.weights, &delta);
        Ok(metrics)
    }

    /// Sequences of a mini-batch run in parallel against the same weights;
    /// their updates are averaged in sample order and applied once.
    pub fn train_batch(&mut self, batch: &[Sample]) -> Result<Vec<SequenceMetrics>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let (net, weights, config, signal) = (&self.net, &self.weights, &self.config, self.signal.as_ref());
        let results: Vec<(Weights, SequenceMetrics)> =
            batch.par_iter().map(|s| sequence_update(net, weights, s, config, signal)).collect::<Result<_>>()?;
        let mut total = self.weights.zeros_like();
        let mut metrics = Vec::with_capacity(results.len());
        let scale = 1.0 / batch.len() as f64;
        for (d, m) in results {
            total.scaled_add(scale, &d);
            metrics.push(m);
        }
        self.optimizer.step(&mut self.weights, &total);
        Ok(metrics)
    }

    pub fn train_epoch(&mut self, samples: &[Sample], batch_size: usize) -> Result<Vec<SequenceMetrics>> {
        let mut all = Vec::with_capacity(samples.len());
        for batch in samples.chunks(batch_size.max(1)) {
            all.extend(self.train_batch(batch)?);
        }
        Ok(all)
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<Vec<SequenceMetrics>> {
        let (net, weights, config) = (&self.net, &self.weights, &self.config);
        samples.par_iter().map(|s| evaluate_sequence(net, weights, s, config)).collect()
    }
}

/// Single-sequence convenience wrapper matching the three-factor algorithm
/// end to end: forward, learn, and apply the optimizer once.
pub fn train_sequence(
    net: &NetworkSpec,
    weights: &Weights,
    sample: &Sample,
    config: &LearningConfig,
    seed: u64,
) -> Result<(Weights, SequenceMetrics)> {
    let mut trainer = Trainer::with_weights(net.clone(), config.clone(), weights.clone(), seed)?;
    let metrics = trainer.train_sequence(sample)?;
    Ok((trainer.weights, metrics))
}
