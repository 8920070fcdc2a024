//! Self-check suite: every invariant is exercised on random instances and
//! reported with the largest error observed.
//!
//! The eligibility computation under test is injectable so that deliberately
//! broken variants can be shown to fail.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bptt::{bptt_sample, finite_difference_check, Objective};
use crate::cost::{cost_bptt, cost_stllr, runtime_memory_audit, speedups};
use crate::data::Sample;
use crate::engine::{sequence_update, LearningConfig};
use crate::error::Result;
use crate::loss::{LossKind, Target};
use crate::network::{LayerKind, LayerSpec, NetworkSpec, Weights};
use crate::neuron::{Firing, NeuronParams};
use crate::optim::OptimizerKind;
use crate::plasticity::{
    eligibility_ff, eligibility_ff_reference, eligibility_rec, eligibility_rec_reference, trace_update, StdpParams,
    TraceBuffer,
};
use crate::psi::{psi_eval, PsiKind};
use crate::signal::{Backprop, SignalMode};

/// Computes the eligibility of every step from full histories, the way a
/// training run would see it step by step.
pub trait EligibilityRule: Sync {
    fn name(&self) -> &str;

    /// `x: T x fan_in`, `u: T x fan_out`; one `fan_out x fan_in` matrix per step.
    fn ff_series(
        &self,
        x: &Array2<f64>,
        u: &Array2<f64>,
        params: &StdpParams,
        psi: PsiKind,
        v_th: f64,
    ) -> Result<Vec<Array2<f64>>>;

    /// `y: T x n` own outputs, `u: T x n`.
    fn rec_series(
        &self,
        y: &Array2<f64>,
        u: &Array2<f64>,
        params: &StdpParams,
        psi: PsiKind,
        v_th: f64,
    ) -> Result<Vec<Array2<f64>>>;
}

/// The trace-based forward computation used by the engine.
pub struct OnlineTraces;

impl EligibilityRule for OnlineTraces {
    fn name(&self) -> &str {
        "online-traces"
    }

    fn ff_series(
        &self,
        x: &Array2<f64>,
        u: &Array2<f64>,
        params: &StdpParams,
        psi: PsiKind,
        v_th: f64,
    ) -> Result<Vec<Array2<f64>>> {
        let mut traces = TraceBuffer::zeros(x.ncols(), u.ncols());
        let mut out = Vec::with_capacity(x.nrows());
        for (xt, ut) in x.axis_iter(Axis(0)).zip(u.axis_iter(Axis(0))) {
            let (xt, p) = (xt.to_owned(), psi_eval(psi, &ut.to_owned(), v_th));
            let history = traces.update(&xt, &p, params)?;
            out.push(eligibility_ff(&p, &xt, &traces, &history, params)?);
        }
        Ok(out)
    }

    fn rec_series(
        &self,
        y: &Array2<f64>,
        u: &Array2<f64>,
        params: &StdpParams,
        psi: PsiKind,
        v_th: f64,
    ) -> Result<Vec<Array2<f64>>> {
        let n = u.ncols();
        let mut post = Array1::zeros(n);
        let mut delayed = Array1::zeros(n);
        let mut y_prev = Array1::zeros(n);
        let mut out = Vec::with_capacity(y.nrows());
        for (yt, ut) in y.axis_iter(Axis(0)).zip(u.axis_iter(Axis(0))) {
            let p = psi_eval(psi, &ut.to_owned(), v_th);
            delayed = trace_update(&delayed, &y_prev, params.lambda_pre)?;
            let history = &post * params.lambda_post;
            post = &history + &p;
            let traces = TraceBuffer { tr_x: delayed.clone(), tr_psi: post.clone() };
            out.push(eligibility_rec(&p, &y_prev, &traces, &history, params)?);
            y_prev = yt.to_owned();
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn to_text(&self) -> String {
        let w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{} {:<w$}  cases {:>6}  max error {:.3e}  tolerance {:.1e}  ({:.2}s)",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.cases,
                c.max_error,
                c.tolerance,
                c.seconds
            );
        }
        let _ = writeln!(s, "{}/{} checks passed", self.checks.iter().filter(|c| c.passed).count(), self.checks.len());
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub eligibility_cases: usize,
    pub bptt_instances: usize,
    pub fd_nets: usize,
    pub fd_coords: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { eligibility_cases: 2_000, bptt_instances: 100, fd_nets: 20, fd_coords: 100, seed: 0 }
    }
}

fn check(name: &str, tolerance: f64, start: Instant, cases: usize, max_error: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        cases,
        max_error,
        tolerance,
        passed: max_error.is_finite() && max_error <= tolerance,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn binary(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || if rng.gen_bool(p) { 1.0 } else { 0.0 })
}

/// Element-wise relative error against a per-element scale.
fn scaled_error(a: &Array2<f64>, b: &Array2<f64>, scale: &Array2<f64>) -> f64 {
    ndarray::Zip::from(a).and(b).and(scale).fold(0.0, |m: f64, &x, &y, &s| {
        let d = (x - y).abs();
        m.max(if d == 0.0 { 0.0 } else { d / s.max(f64::MIN_POSITIVE) })
    })
}

/// Random instance for the eligibility comparisons.
pub struct EligibilityCase {
    pub x: Array2<f64>,
    pub u: Array2<f64>,
    pub params: StdpParams,
    pub psi: PsiKind,
    pub v_th: f64,
}

pub fn random_eligibility_case(rng: &mut ChaCha8Rng, square: bool) -> EligibilityCase {
    let t = rng.gen_range(1..=64);
    let fan_out = rng.gen_range(1..=32);
    let fan_in = if square { fan_out } else { rng.gen_range(1..=32) };
    let gains = [-1.0, 0.0, 1.0];
    let v_th = rng.gen_range(0.2..1.5);
    let density = rng.gen_range(0.05..0.6);
    EligibilityCase {
        x: binary(rng, t, fan_in, density),
        u: Array2::from_shape_simple_fn((t, fan_out), || v_th + rng.gen_range(-1.5..1.5)),
        params: StdpParams {
            lambda_pre: rng.gen_range(0.0..=1.0),
            lambda_post: rng.gen_range(0.0..=1.0),
            alpha_pre: gains[rng.gen_range(0..3)],
            alpha_post: gains[rng.gen_range(0..3)],
        },
        psi: PsiKind::ALL[rng.gen_range(0..4)],
        v_th,
    }
}

/// Max element-wise relative error of `rule` against the double sums.
/// Every summand is non-negative, so the sums with `|α|` bound the
/// magnitude of each element and serve as its scale.
pub fn eligibility_error(rule: &dyn EligibilityRule, case: &EligibilityCase, recurrent: bool) -> Result<f64> {
    let EligibilityCase { x, u, params, psi, v_th } = case;
    let abs = params.with_gains(params.alpha_pre.abs(), params.alpha_post.abs());
    let series = if recurrent {
        rule.rec_series(x, u, params, *psi, *v_th)?
    } else {
        rule.ff_series(x, u, params, *psi, *v_th)?
    };
    let reference = |t: usize, p: &StdpParams| {
        if recurrent {
            eligibility_rec_reference(x, u, t, p, *psi, *v_th)
        } else {
            eligibility_ff_reference(x, u, t, p, *psi, *v_th)
        }
    };
    if series.len() != x.nrows() {
        return Ok(f64::INFINITY);
    }
    let mut worst: f64 = 0.0;
    for (t, e) in series.iter().enumerate() {
        let expected = reference(t, params)?;
        let scale = reference(t, &abs)?;
        worst = worst.max(scaled_error(e, &expected, &scale));
    }
    Ok(worst)
}

pub fn check_eligibility(rule: &dyn EligibilityRule, cases: usize, seed: u64, recurrent: bool) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let case = random_eligibility_case(&mut rng, recurrent);
        worst = worst.max(eligibility_error(rule, &case, recurrent)?);
    }
    let name =
        if recurrent { "recurrent eligibility equals double sum" } else { "feedforward eligibility equals double sum" };
    Ok(check(name, 1e-9, start, cases, worst))
}

/// One dense hidden layer and a stateless readout, set up so that the
/// online update is exactly the negated full-history gradient.
pub fn restricted_instance(rng: &mut ChaCha8Rng) -> (NetworkSpec, Weights, Sample, LearningConfig) {
    let input = rng.gen_range(1..=16);
    let hidden = rng.gen_range(1..=16);
    let outputs = rng.gen_range(2..=16);
    let t = rng.gen_range(1..=20);
    let gamma = rng.gen_range(0.0..1.0);
    let v_th = rng.gen_range(0.1..1.0);
    let psi = PsiKind::ALL[rng.gen_range(0..4)];
    let net = NetworkSpec::new(
        input,
        vec![
            LayerSpec::new(LayerKind::Dense, hidden, NeuronParams { gamma, v_th }).with_psi(psi).with_surrogate(psi),
            LayerSpec::new(LayerKind::Readout, outputs, NeuronParams { gamma: 0.0, v_th: 1.0 }),
        ],
    );
    let weights = Weights::init(&net, rng.gen());
    let (loss, target) = if rng.gen_bool(0.5) {
        (LossKind::CrossEntropy, Target::Class(rng.gen_range(0..outputs)))
    } else {
        (LossKind::Mse, Target::Values(Array1::from_shape_simple_fn(outputs, || rng.gen_range(-1.0..1.0))))
    };
    let density = rng.gen_range(0.2..0.8);
    let sample = Sample { frames: binary(rng, t, input, density), target };
    let config = LearningConfig {
        mode: SignalMode::Bp,
        time_steps: t,
        signal_onset: 0,
        learning_rate: 1e-3,
        stdp: StdpParams { lambda_pre: gamma, lambda_post: rng.gen_range(0.0..1.0), alpha_pre: 1.0, alpha_post: 0.0 },
        loss,
        optimizer: OptimizerKind::Sgd,
    };
    (net, weights, sample, config)
}

/// Max element-wise relative error between the online update and the
/// negated oracle gradient; elements below `1e-9` of the largest gradient
/// are measured against that floor.
pub fn restricted_error(net: &NetworkSpec, weights: &Weights, sample: &Sample, config: &LearningConfig) -> Result<f64> {
    let (update, _) = sequence_update(net, weights, sample, config, &Backprop)?;
    let oracle = bptt_sample(net, weights, sample, &Objective::every_step(config.loss), Firing::Heaviside)?;
    let floor = (1e-9 * oracle.grads.max_abs()).max(1e-300);
    let mut worst: f64 = 0.0;
    for (a, g) in update.iter_matrices().zip(oracle.grads.iter_matrices()) {
        for (&x, &y) in a.iter().zip(g.iter()) {
            let expected = -y;
            worst = worst.max((x - expected).abs() / expected.abs().max(floor));
        }
    }
    Ok(worst)
}

pub fn check_restricted_equivalence(instances: usize, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (net, w, s, cfg) = restricted_instance(&mut rng);
        worst = worst.max(restricted_error(&net, &w, &s, &cfg)?);
    }
    Ok(check("online update equals full-history gradient (restricted)", 1e-6, start, instances, worst))
}

/// Small random dense/recurrent net with at least `min_params` weights.
pub fn random_smooth_net(rng: &mut ChaCha8Rng, min_params: usize) -> (NetworkSpec, Weights, Sample, Objective) {
    loop {
        let input = rng.gen_range(2..=16);
        let depth = rng.gen_range(1..=2);
        let mut layers = Vec::new();
        for _ in 0..depth {
            let kind = if rng.gen_bool(0.5) { LayerKind::Recurrent } else { LayerKind::Dense };
            let p = NeuronParams { gamma: rng.gen_range(0.0..0.95), v_th: rng.gen_range(0.2..1.0) };
            layers.push(LayerSpec::new(kind, rng.gen_range(2..=16), p));
        }
        let outputs = rng.gen_range(2..=8);
        layers.push(LayerSpec::new(
            LayerKind::Readout,
            outputs,
            NeuronParams { gamma: rng.gen_range(0.0..0.95), v_th: 1.0 },
        ));
        let net = NetworkSpec::new(input, layers);
        let weights = Weights::init(&net, rng.gen());
        if weights.num_params() < min_params {
            continue;
        }
        let t = rng.gen_range(2..=10);
        let (loss, target) = match rng.gen_range(0..3) {
            0 => (LossKind::CrossEntropy, Target::Class(rng.gen_range(0..outputs))),
            1 => (LossKind::Mse, Target::Values(Array1::from_shape_simple_fn(outputs, || rng.gen_range(-1.0..1.0)))),
            _ => (
                LossKind::CumulativeMse,
                Target::Values(Array1::from_shape_simple_fn(outputs, || rng.gen_range(-1.0..1.0))),
            ),
        };
        let sample = Sample { frames: binary(rng, t, input, 0.4), target };
        let objective = Objective { loss, signal_onset: rng.gen_range(0..t) };
        return (net, weights, sample, objective);
    }
}

/// Central-difference step. Smaller steps are dominated by round-off in the
/// loss, larger ones by truncation through the steep smoothed firing.
pub const FD_STEP: f64 = 1e-4;

pub fn check_finite_differences(nets: usize, coords: usize, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut total = 0;
    for i in 0..nets {
        let (net, w, s, obj) = random_smooth_net(&mut rng, coords);
        let r = finite_difference_check(&net, &w, &s, &obj, FD_STEP, coords, seed ^ i as u64)?;
        total += r.coordinates;
        worst = worst.max(r.max_rel_error);
    }
    Ok(check("full-history gradient equals finite differences", 1e-4, start, total, worst))
}

pub fn check_cost_identities(cases: usize, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let widths: Vec<usize> = (0..rng.gen_range(2..8)).map(|_| rng.gen_range(1..2000)).collect();
        let t = rng.gen_range(1..500);
        let t_l = rng.gen_range(0..t);
        let b = cost_bptt(&widths, t)?;
        let s = cost_stllr(&widths, t, t_l)?;
        let sp = speedups(t, t_l)?;
        let e_mem = (sp.s_mem - b.mem as f64 / s.mem as f64).abs() / sp.s_mem;
        let e_mac = (sp.s_mac - b.mac as f64 / s.mac as f64).abs() / sp.s_mac;
        worst = worst.max(e_mem).max(e_mac);
    }
    Ok(check("speedups equal count ratios", 1e-12, start, cases, worst))
}

/// Retained online state must not depend on `T`; the tape must grow exactly
/// in proportion. Error is the relative deviation from either law.
pub fn check_memory_audit(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = NeuronParams::default();
    let net = NetworkSpec::new(
        20,
        vec![
            LayerSpec::new(LayerKind::Dense, 30, p),
            LayerSpec::new(LayerKind::Recurrent, 25, p),
            LayerSpec::new(LayerKind::Readout, 4, p),
        ],
    );
    let weights = Weights::init(&net, seed);
    let audit = |t: usize, rng: &mut ChaCha8Rng| {
        let sample = Sample { frames: binary(rng, t, 20, 0.3), target: Target::Class(1) };
        let cfg = LearningConfig {
            mode: SignalMode::Bp,
            time_steps: t,
            signal_onset: t - 1,
            learning_rate: 1e-3,
            stdp: StdpParams::default(),
            loss: LossKind::CrossEntropy,
            optimizer: OptimizerKind::Sgd,
        };
        runtime_memory_audit(&net, &weights, &sample, &cfg)
    };
    let short = audit(10, &mut rng)?;
    let long = audit(300, &mut rng)?;
    let online = (long.stllr.total() as f64 - short.stllr.total() as f64).abs() / short.stllr.total() as f64;
    let tape = (long.bptt_tape as f64 / short.bptt_tape as f64 - 30.0).abs() / 30.0;
    let formula = (short.bptt_tape as f64 - cost_bptt(&net.widths(), 10)?.mem as f64).abs();
    Ok(check("retained state constant in T, tape linear in T", 0.0, start, 2, online.max(tape).max(formula)))
}

/// Update accumulations per sequence equal `T - T_l`.
pub fn check_update_count(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = NeuronParams::default();
    let net =
        NetworkSpec::new(6, vec![LayerSpec::new(LayerKind::Recurrent, 8, p), LayerSpec::new(LayerKind::Readout, 3, p)]);
    let weights = Weights::init(&net, seed);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for t in 1..=12 {
        for t_l in 0..=t {
            let sample = Sample { frames: binary(&mut rng, t, 6, 0.5), target: Target::Class(0) };
            let cfg = LearningConfig {
                mode: SignalMode::Bp,
                time_steps: t,
                signal_onset: t_l,
                learning_rate: 1e-3,
                stdp: StdpParams::default(),
                loss: LossKind::CrossEntropy,
                optimizer: OptimizerKind::Sgd,
            };
            let (_, m) = sequence_update(&net, &weights, &sample, &cfg, &Backprop)?;
            worst = worst.max((m.update_events as f64 - (t - t_l) as f64).abs());
            cases += 1;
        }
    }
    Ok(check("update accumulations equal T - T_l", 0.0, start, cases, worst))
}

/// Run every check with the given eligibility rule.
pub fn run_suite(rule: &dyn EligibilityRule, opts: &VerifyOptions) -> Result<VerifyReport> {
    let s = opts.seed;
    let checks = vec![
        check_eligibility(rule, opts.eligibility_cases, s, false)?,
        check_eligibility(rule, opts.eligibility_cases, s ^ 1, true)?,
        check_restricted_equivalence(opts.bptt_instances, s ^ 2)?,
        check_finite_differences(opts.fd_nets, opts.fd_coords, s ^ 3)?,
        check_cost_identities(1000, s ^ 4)?,
        check_memory_audit(s ^ 5)?,
        check_update_count(s ^ 6)?,
    ];
    Ok(VerifyReport { checks })
}

pub fn verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    run_suite(&OnlineTraces, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Decays the presynaptic trace one step too many.
    struct LambdaOffByOne;

    impl EligibilityRule for LambdaOffByOne {
        fn name(&self) -> &str {
            "lambda-off-by-one"
        }

        fn ff_series(
            &self,
            x: &Array2<f64>,
            u: &Array2<f64>,
            params: &StdpParams,
            psi: PsiKind,
            v_th: f64,
        ) -> Result<Vec<Array2<f64>>> {
            let mut traces = TraceBuffer::zeros(x.ncols(), u.ncols());
            let mut out = Vec::new();
            for (xt, ut) in x.axis_iter(Axis(0)).zip(u.axis_iter(Axis(0))) {
                let (xt, p) = (xt.to_owned(), psi_eval(psi, &ut.to_owned(), v_th));
                let history = traces.update(&xt, &p, params)?;
                traces.tr_x *= params.lambda_pre;
                out.push(eligibility_ff(&p, &xt, &traces, &history, params)?);
            }
            Ok(out)
        }

        fn rec_series(
            &self,
            y: &Array2<f64>,
            u: &Array2<f64>,
            params: &StdpParams,
            psi: PsiKind,
            v_th: f64,
        ) -> Result<Vec<Array2<f64>>> {
            OnlineTraces.rec_series(y, u, params, psi, v_th)
        }
    }

    fn quick() -> VerifyOptions {
        VerifyOptions { eligibility_cases: 200, bptt_instances: 20, fd_nets: 3, fd_coords: 100, seed: 7 }
    }

    #[test]
    fn suite_passes() {
        let report = verify(&quick()).unwrap();
        assert!(report.passed(), "{}", report.to_text());
        assert_eq!(report.checks.len(), 7);
        let text = report.to_text();
        assert!(text.contains("max error"));
        assert!(text.contains("7/7 checks passed"));
    }

    #[test]
    fn mutated_trace_decay_is_caught() {
        let report = run_suite(&LambdaOffByOne, &quick()).unwrap();
        assert!(!report.passed());
        let failed: Vec<_> = report.failures().iter().map(|c| c.name.clone()).collect();
        assert_eq!(failed, vec!["feedforward eligibility equals double sum".to_string()]);
    }
}
