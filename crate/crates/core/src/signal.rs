//! Learning-signal generators: route the output error to hidden layers
//! within the current time step.

use ndarray::{Array1, Array2};
use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::network::{checksum, NetworkSpec};
use crate::registry::Registry;

pub trait LearningSignal: Send + Sync {
    fn name(&self) -> &'static str;

    /// Signals for every hidden layer (all but the last), bottom first.
    ///
    /// `ff[l]` are the effective forward weights of layer `l` and
    /// `surrogate[l]` is Θ′(u^(l)[t]) for every hidden layer.
    fn hidden_signals(
        &self,
        ff: &[&Array2<f64>],
        surrogate: &[Array1<f64>],
        delta_out: &Array1<f64>,
    ) -> Result<Vec<Array1<f64>>>;
}

/// Spatial backpropagation through the layer stack at one time step.
///
/// The output layer passes its error unscaled; every hidden layer above the
/// target gates it by its own Θ′ before the transposed weights carry it down.
pub fn backprop_signal(
    ff: &[&Array2<f64>],
    surrogate: &[Array1<f64>],
    delta_out: &Array1<f64>,
) -> Result<Vec<Array1<f64>>> {
    let num_layers = ff.len();
    let hidden = num_layers.saturating_sub(1);
    if surrogate.len() < hidden {
        return Err(Error::Usage(format!("backprop needs {hidden} surrogate vectors, got {}", surrogate.len())));
    }
    check_len("backprop output error", ff[num_layers - 1].nrows(), delta_out.len())?;
    let mut out = vec![Array1::zeros(0); hidden];
    let mut gated = delta_out.clone();
    for l in (0..hidden).rev() {
        let delta = ff[l + 1].t().dot(&gated);
        gated = &delta * &surrogate[l];
        out[l] = delta;
    }
    Ok(out)
}

pub struct Backprop;

impl LearningSignal for Backprop {
    fn name(&self) -> &'static str {
        "bp"
    }

    fn hidden_signals(
        &self,
        ff: &[&Array2<f64>],
        surrogate: &[Array1<f64>],
        delta_out: &Array1<f64>,
    ) -> Result<Vec<Array1<f64>>> {
        backprop_signal(ff, surrogate, delta_out)
    }
}

/// Fixed random projections `B_l` (hidden width x output width).
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackMatrices {
    pub b: Vec<Array2<f64>>,
    pub seed: u64,
}

impl FeedbackMatrices {
    pub fn new(net: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0dfa_0dfa_0dfa_0dfa);
        let out = net.output_width();
        let bound = (1.0 / out as f64).sqrt();
        let hidden = net.num_layers().saturating_sub(1);
        let b = net.layers[..hidden]
            .iter()
            .map(|layer| Array2::from_shape_simple_fn((layer.width, out), || rng.gen_range(-bound..bound)))
            .collect();
        Self { b, seed }
    }

    pub fn checksums(&self) -> Vec<u64> {
        self.b.iter().map(checksum).collect()
    }
}

/// `δ^(l) = B_l δ_out` for every hidden layer.
pub fn dfa_signal(feedback: &FeedbackMatrices, delta_out: &Array1<f64>) -> Result<Vec<Array1<f64>>> {
    feedback
        .b
        .iter()
        .map(|b| {
            check_len("feedback matrix columns", b.ncols(), delta_out.len())?;
            Ok(b.dot(delta_out))
        })
        .collect()
}

pub struct DirectFeedback {
    pub feedback: FeedbackMatrices,
}

impl LearningSignal for DirectFeedback {
    fn name(&self) -> &'static str {
        "dfa"
    }

    fn hidden_signals(
        &self,
        _ff: &[&Array2<f64>],
        _surrogate: &[Array1<f64>],
        delta_out: &Array1<f64>,
    ) -> Result<Vec<Array1<f64>>> {
        dfa_signal(&self.feedback, delta_out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SignalMode {
    #[default]
    Bp,
    Dfa,
}

impl SignalMode {
    pub fn name(self) -> &'static str {
        match self {
            SignalMode::Bp => "bp",
            SignalMode::Dfa => "dfa",
        }
    }

    pub fn build(self, net: &NetworkSpec, seed: u64) -> Box<dyn LearningSignal> {
        let factory = signals().get(self.name()).expect("registered signal");
        factory(net, seed)
    }
}

impl std::str::FromStr for SignalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bp" => Ok(SignalMode::Bp),
            "dfa" => Ok(SignalMode::Dfa),
            other => Err(Error::UnknownStrategy {
                family: "learning signal",
                name: other.to_string(),
                available: signals().names().join(", "),
            }),
        }
    }
}

pub type SignalFactory = dyn Fn(&NetworkSpec, u64) -> Box<dyn LearningSignal> + Send + Sync;

static SIGNALS: Lazy<Registry<SignalFactory>> = Lazy::new(|| {
    let mut reg: Registry<SignalFactory> = Registry::new("learning signal");
    reg.register("bp", Box::new(|_, _| Box::new(Backprop)));
    reg.register("dfa", Box::new(|net, seed| Box::new(DirectFeedback { feedback: FeedbackMatrices::new(net, seed) })));
    reg
});

pub fn signals() -> &'static Registry<SignalFactory> {
    &SIGNALS
}
