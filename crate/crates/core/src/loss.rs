//! Per-step losses on the readout and their output-layer gradients.

use ndarray::Array1;
use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::registry::Registry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Class(usize),
    Values(Array1<f64>),
}

impl Target {
    pub fn class(&self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(*c),
            Target::Values(_) => None,
        }
    }
}

pub trait Loss: Send + Sync {
    fn name(&self) -> &'static str;

    /// Loss value and `∂L/∂readout` for one step.
    fn step(&self, readout: &Array1<f64>, target: &Target) -> Result<(f64, Array1<f64>)>;

    /// When true the engine passes the running sum of readouts over active
    /// steps instead of the instantaneous readout.
    fn accumulates(&self) -> bool {
        false
    }
}

/// Softmax cross-entropy against a class index.
pub struct CrossEntropy;

/// `½ ||readout - y*||²` at each active step.
pub struct Mse;

/// `½ ||Σ_t readout[t] - y*||²`, evaluated on the running sum.
pub struct CumulativeMse;

pub fn softmax(z: &Array1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = z.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

fn class_index(target: &Target, k: usize) -> Result<usize> {
    match target {
        Target::Class(c) if *c < k => Ok(*c),
        Target::Class(c) => Err(Error::Data(format!("class index {c} out of range for {k} outputs"))),
        Target::Values(_) => Err(Error::Data("cross-entropy needs a class target".into())),
    }
}

fn values(target: &Target, k: usize) -> Result<&Array1<f64>> {
    match target {
        Target::Values(v) => {
            check_len("regression target", k, v.len())?;
            Ok(v)
        }
        Target::Class(_) => Err(Error::Data("mean-squared error needs a value target".into())),
    }
}

impl Loss for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross-entropy"
    }

    fn step(&self, readout: &Array1<f64>, target: &Target) -> Result<(f64, Array1<f64>)> {
        let c = class_index(target, readout.len())?;
        let mut grad = softmax(readout);
        let loss = -grad[c].max(f64::MIN_POSITIVE).ln();
        grad[c] -= 1.0;
        Ok((loss, grad))
    }
}

impl Loss for Mse {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn step(&self, readout: &Array1<f64>, target: &Target) -> Result<(f64, Array1<f64>)> {
        let y = values(target, readout.len())?;
        let diff = readout - y;
        Ok((0.5 * diff.dot(&diff), diff))
    }
}

impl Loss for CumulativeMse {
    fn name(&self) -> &'static str {
        "cumulative-mse"
    }

    fn step(&self, running_sum: &Array1<f64>, target: &Target) -> Result<(f64, Array1<f64>)> {
        Mse.step(running_sum, target)
    }

    fn accumulates(&self) -> bool {
        true
    }
}

static LOSSES: Lazy<Registry<dyn Loss>> = Lazy::new(|| {
    let mut reg: Registry<dyn Loss> = Registry::new("loss");
    reg.register("cross-entropy", Box::new(CrossEntropy))
        .register("mse", Box::new(Mse))
        .register("cumulative-mse", Box::new(CumulativeMse));
    reg
});

pub fn losses() -> &'static Registry<dyn Loss> {
    &LOSSES
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    Mse,
    CumulativeMse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross-entropy",
            LossKind::Mse => "mse",
            LossKind::CumulativeMse => "cumulative-mse",
        }
    }

    pub fn loss(self) -> &'static dyn Loss {
        losses().get(self.name()).expect("registered loss")
    }
}

/// Loss value and output-layer gradient for one step.
pub fn loss_and_delta_l(readout: &Array1<f64>, target: &Target, kind: LossKind) -> Result<(f64, Array1<f64>)> {
    kind.loss().step(readout, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_softmax_cross_entropy() {
        let k = 5;
        let readout = Array1::from_elem(k, 0.3);
        let (loss, delta) = loss_and_delta_l(&readout, &Target::Class(2), LossKind::CrossEntropy).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-12);
        for (i, d) in delta.iter().enumerate() {
            let expect = 1.0 / k as f64 - if i == 2 { 1.0 } else { 0.0 };
            assert!((d - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_class_index() {
        assert!(loss_and_delta_l(&array![0.0, 1.0], &Target::Class(2), LossKind::CrossEntropy).is_err());
        assert!(loss_and_delta_l(&array![0.0], &Target::Class(0), LossKind::Mse).is_err());
    }

    #[test]
    fn mse_at_target_is_zero() {
        let y = array![0.4, -1.0];
        let (loss, delta) = loss_and_delta_l(&y, &Target::Values(y.clone()), LossKind::Mse).unwrap();
        assert_eq!(loss, 0.0);
        assert!(delta.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let z = array![0.3, -1.2, 2.0, 0.1];
        let t = Target::Class(1);
        let (_, g) = CrossEntropy.step(&z, &t).unwrap();
        let h = 1e-6;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let fd = (CrossEntropy.step(&zp, &t).unwrap().0 - CrossEntropy.step(&zm, &t).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn registry_lists_all_kinds() {
        for k in [LossKind::CrossEntropy, LossKind::Mse, LossKind::CumulativeMse] {
            assert_eq!(k.loss().name(), k.name());
        }
        assert!(LossKind::CumulativeMse.loss().accumulates());
    }
}
