//! Layer stack description and weight storage.

use std::borrow::Cow;
use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::NeuronParams;
use crate::psi::PsiKind;

const STANDARDIZE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    /// Feedforward LIF layer.
    Dense,
    /// LIF layer with an all-to-all recurrent matrix on its own outputs.
    Recurrent,
    /// Non-spiking leaky integrator; only valid as the last layer.
    Readout,
}

impl LayerKind {
    pub fn is_spiking(self) -> bool {
        !matches!(self, LayerKind::Readout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub width: usize,
    #[serde(default)]
    pub neuron: NeuronParams,
    /// Ψ used inside the eligibility traces of this layer.
    #[serde(default)]
    pub psi: PsiKind,
    /// Θ′ used when the learning signal passes through this layer.
    #[serde(default)]
    pub surrogate: PsiKind,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, width: usize, neuron: NeuronParams) -> Self {
        Self { kind, width, neuron, psi: PsiKind::default(), surrogate: PsiKind::default() }
    }

    pub fn with_psi(mut self, psi: PsiKind) -> Self {
        self.psi = psi;
        self
    }

    pub fn with_surrogate(mut self, surrogate: PsiKind) -> Self {
        self.surrogate = surrogate;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_width: usize,
    pub layers: Vec<LayerSpec>,
    /// Standardise the forward weights of dense spiking layers.
    #[serde(default)]
    pub weight_standardization: bool,
}

impl NetworkSpec {
    pub fn new(input_width: usize, layers: Vec<LayerSpec>) -> Self {
        Self { input_width, layers, weight_standardization: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 {
            return Err(Error::Config("input width must be at least 1".into()));
        }
        let Some(last) = self.layers.last() else {
            return Err(Error::Config("network has no layers".into()));
        };
        if last.kind == LayerKind::Recurrent {
            return Err(Error::Config("last layer must be a readout or dense spiking layer".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.width == 0 {
                return Err(Error::Config(format!("layer {l} has zero width")));
            }
            if layer.kind == LayerKind::Readout && l + 1 != self.layers.len() {
                return Err(Error::Config(format!("readout layer {l} must be the last layer")));
            }
            if layer.kind == LayerKind::Readout {
                if !(0.0..=1.0).contains(&layer.neuron.gamma) {
                    return Err(Error::Config(format!("readout leak must lie in [0, 1], got {}", layer.neuron.gamma)));
                }
            } else {
                layer.neuron.validate()?;
            }
            if self.weight_standardization && layer.kind == LayerKind::Dense && self.fan_in(l) < 2 {
                return Err(Error::Config(format!("weight standardisation needs fan-in >= 2 (layer {l})")));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn fan_in(&self, l: usize) -> usize {
        if l == 0 {
            self.input_width
        } else {
            self.layers[l - 1].width
        }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.width)
    }

    /// `[N_0, N_1, ..., N_L]`
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width).chain(self.layers.iter().map(|l| l.width)).collect()
    }

    pub fn is_standardized(&self, l: usize) -> bool {
        self.weight_standardization && self.layers[l].kind == LayerKind::Dense
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// `width x fan_in`
    pub ff: Array2<f64>,
    /// `width x width`, recurrent layers only.
    pub rec: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub layers: Vec<LayerWeights>,
}

impl Weights {
    /// Uniform in `±sqrt(1 / fan_in)` from a seeded generator.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize| {
            let bound = (1.0 / cols as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
        };
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let ff = uniform(layer.width, spec.fan_in(l));
                let rec = (layer.kind == LayerKind::Recurrent).then(|| uniform(layer.width, layer.width));
                LayerWeights { ff, rec }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| LayerWeights {
                ff: Array2::zeros((layer.width, spec.fan_in(l))),
                rec: (layer.kind == LayerKind::Recurrent).then(|| Array2::zeros((layer.width, layer.width))),
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|lw| LayerWeights {
                    ff: Array2::zeros(lw.ff.raw_dim()),
                    rec: lw.rec.as_ref().map(|r| Array2::zeros(r.raw_dim())),
                })
                .collect(),
        }
    }

    pub fn check_shapes(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::Config(format!(
                "weights have {} layers, network has {}",
                self.layers.len(),
                spec.layers.len()
            )));
        }
        for (l, (lw, ls)) in self.layers.iter().zip(&spec.layers).enumerate() {
            if lw.ff.dim() != (ls.width, spec.fan_in(l)) {
                return Err(Error::Config(format!(
                    "layer {l} forward weights are {:?}, expected {:?}",
                    lw.ff.dim(),
                    (ls.width, spec.fan_in(l))
                )));
            }
            let rec_ok = match (&lw.rec, ls.kind) {
                (Some(r), LayerKind::Recurrent) => r.dim() == (ls.width, ls.width),
                (None, LayerKind::Recurrent) => false,
                (Some(_), _) => false,
                (None, _) => true,
            };
            if !rec_ok {
                return Err(Error::Config(format!("layer {l} recurrent weights do not match its kind")));
            }
        }
        Ok(())
    }

    /// Forward weights as seen by the dynamics (standardised when enabled).
    pub fn effective_ff<'a>(&'a self, spec: &NetworkSpec, l: usize) -> Cow<'a, Array2<f64>> {
        if spec.is_standardized(l) {
            Cow::Owned(weight_standardize(&self.layers[l].ff))
        } else {
            Cow::Borrowed(&self.layers[l].ff)
        }
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &Weights) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.ff.scaled_add(alpha, &b.ff);
            if let (Some(ar), Some(br)) = (a.rec.as_mut(), b.rec.as_ref()) {
                ar.scaled_add(alpha, br);
            }
        }
    }

    pub fn iter_matrices(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.layers.iter().flat_map(|lw| std::iter::once(&lw.ff).chain(lw.rec.as_ref()))
    }

    pub fn iter_matrices_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.layers.iter_mut().flat_map(|lw| std::iter::once(&mut lw.ff).chain(lw.rec.as_mut()))
    }

    /// Frobenius distance over all matrices.
    pub fn distance(&self, other: &Weights) -> f64 {
        self.iter_matrices().zip(other.iter_matrices()).map(|(a, b)| (a - b).mapv(|v| v * v).sum()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.iter_matrices().flat_map(|m| m.iter()).fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn num_params(&self) -> usize {
        self.iter_matrices().map(|m| m.len()).sum()
    }
}

/// Order-sensitive checksum of the exact bit patterns of a matrix.
pub fn checksum(m: &Array2<f64>) -> u64 {
    let mut h = DefaultHasher::new();
    h.write_usize(m.nrows());
    h.write_usize(m.ncols());
    for v in m.iter() {
        h.write_u64(v.to_bits());
    }
    h.finish()
}

/// Per output row: `(w - mean) / sqrt(var + 1e-5)`.
pub fn weight_standardize(w: &Array2<f64>) -> Array2<f64> {
    let mut out = w.clone();
    let n = w.ncols() as f64;
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = 1.0 / (var + STANDARDIZE_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * scale);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn net() -> NetworkSpec {
        NetworkSpec::new(
            4,
            vec![
                LayerSpec::new(LayerKind::Recurrent, 3, NeuronParams::default()),
                LayerSpec::new(LayerKind::Readout, 2, NeuronParams::new(0.9, 1.0).unwrap()),
            ],
        )
    }

    #[test]
    fn validation_rules() {
        assert!(net().validate().is_ok());
        let mut bad = net();
        bad.layers.swap(0, 1);
        assert!(bad.validate().is_err());
        let mut rec_last = net();
        rec_last.layers.pop();
        assert!(rec_last.validate().is_err());
        assert!(NetworkSpec::new(3, vec![]).validate().is_err());
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let spec = net();
        let w = Weights::init(&spec, 3);
        w.check_shapes(&spec).unwrap();
        let bound = (1.0f64 / 4.0).sqrt();
        assert!(w.layers[0].ff.iter().all(|v| v.abs() < bound));
        assert_eq!(w, Weights::init(&spec, 3));
        assert_ne!(w, Weights::init(&spec, 4));
        assert_eq!(spec.widths(), vec![4, 3, 2]);
    }

    #[test]
    fn standardize_edge_cases() {
        let unit = array![[-1.0, 1.0, -1.0, 1.0]];
        let s = weight_standardize(&unit);
        for (a, b) in s.iter().zip(unit.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        let constant = array![[0.7, 0.7, 0.7]];
        assert!(weight_standardize(&constant).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn standardized_rows_have_zero_mean() {
        let spec = NetworkSpec::new(50, vec![LayerSpec::new(LayerKind::Readout, 8, NeuronParams::default())]);
        let w = Weights::init(&spec, 11);
        let s = weight_standardize(&w.layers[0].ff);
        for row in s.axis_iter(Axis(0)) {
            let mean = row.sum() / row.len() as f64;
            assert!(mean.abs() < 1e-7);
        }
    }

    #[test]
    fn checksum_tracks_bits() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let mut b = a.clone();
        assert_eq!(checksum(&a), checksum(&b));
        b[[1, 1]] = f64::from_bits(4.0f64.to_bits() + 1);
        assert_ne!(checksum(&a), checksum(&b));
    }
}
