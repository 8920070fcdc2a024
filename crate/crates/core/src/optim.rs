//! Optimizers consuming accumulated weight changes.
//!
//! The engine hands optimizers a descent-direction update `Δw` (the negated
//! gradient), so SGD is `w += ρ Δw` and Adam tracks moments of `Δw`.

use ndarray::Array2;
use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};

use crate::network::Weights;
use crate::registry::Registry;

pub trait Optimizer: Send {
    fn name(&self) -> &'static str;
    fn step(&mut self, weights: &mut Weights, delta: &Weights);
}

pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, weights: &mut Weights, delta: &Weights) {
        weights.scaled_add(self.lr, delta);
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, like: &Weights) -> Self {
        let zeros: Vec<_> = like.iter_matrices().map(|m| Array2::zeros(m.raw_dim())).collect();
        Self { lr, beta1, beta2, eps, steps: 0, m: zeros.clone(), v: zeros }
    }

    pub fn moments(&self) -> (&[Array2<f64>], &[Array2<f64>]) {
        (&self.m, &self.v)
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, weights: &mut Weights, delta: &Weights) {
        self.steps += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        for (((w, d), m), v) in
            weights.iter_matrices_mut().zip(delta.iter_matrices()).zip(self.m.iter_mut()).zip(self.v.iter_mut())
        {
            ndarray::Zip::from(w).and(d).and(m).and(v).for_each(|w, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w += lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }

    pub fn build(&self, lr: f64, like: &Weights) -> Box<dyn Optimizer> {
        let factory = optimizers().get(self.name()).expect("registered optimizer");
        factory(self, lr, like)
    }
}

pub type OptimizerFactory = dyn Fn(&OptimizerKind, f64, &Weights) -> Box<dyn Optimizer> + Send + Sync;

static OPTIMIZERS: Lazy<Registry<OptimizerFactory>> = Lazy::new(|| {
    let mut reg: Registry<OptimizerFactory> = Registry::new("optimizer");
    reg.register("sgd", Box::new(|_, lr, _| Box::new(Sgd { lr })));
    reg.register(
        "adam",
        Box::new(|kind, lr, like| {
            let OptimizerKind::Adam { beta1, beta2, eps } = *kind else { panic!("adam factory called with {kind:?}") };
            Box::new(Adam::new(lr, beta1, beta2, eps, like))
        }),
    );
    reg
});

pub fn optimizers() -> &'static Registry<OptimizerFactory> {
    &OPTIMIZERS
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerWeights;
    use ndarray::array;

    fn single(m: Array2<f64>) -> Weights {
        Weights { layers: vec![LayerWeights { ff: m, rec: None }] }
    }

    #[test]
    fn sgd_descends_along_gradient() {
        let mut w = single(array![[1.0, -1.0]]);
        let grad = array![[0.5, -2.0]];
        let mut opt = OptimizerKind::Sgd.build(1.0, &w);
        opt.step(&mut w, &single(-&grad));
        assert_eq!(w.layers[0].ff, array![[0.5, 1.0]]);
    }

    #[test]
    fn adam_step_size_approaches_learning_rate() {
        let lr = 1e-3;
        let mut w = single(array![[0.0, 0.0]]);
        let d = single(array![[0.3, -7.0]]);
        let mut opt = OptimizerKind::default().build(lr, &w);
        let mut last = w.clone();
        for _ in 0..200 {
            opt.step(&mut w, &d);
            let step = &w.layers[0].ff - &last.layers[0].ff;
            assert!((step[[0, 0]] - lr).abs() < 1e-6 * lr.max(1.0));
            assert!((step[[0, 1]] + lr).abs() < 1e-6 * lr.max(1.0));
            last = w.clone();
        }
    }

    #[test]
    fn zero_update_leaves_weights_and_decays_moments() {
        let mut w = single(array![[0.2, 0.4]]);
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8, &w);
        adam.step(&mut w, &single(array![[1.0, 1.0]]));
        let after_first = w.clone();
        let m0 = adam.moments().0[0][[0, 0]];
        let mut sgd = Sgd { lr: 0.1 };
        let mut w2 = after_first.clone();
        sgd.step(&mut w2, &single(array![[0.0, 0.0]]));
        assert_eq!(w2, after_first);
        adam.step(&mut w, &single(array![[0.0, 0.0]]));
        assert!((adam.moments().0[0][[0, 0]] - 0.9 * m0).abs() < 1e-15);
    }

    #[test]
    fn registry_names() {
        assert_eq!(optimizers().names(), vec!["adam", "sgd"]);
    }
}
