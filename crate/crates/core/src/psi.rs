//! Secondary activation functions Ψ.
//!
//! All four are bump functions of the distance to threshold `u - v_th`,
//! peaking at the threshold. They serve two roles: the postsynaptic factor
//! inside eligibility traces and the surrogate derivative Θ′ used when the
//! learning signal is propagated between layers.

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;

pub trait SecondaryActivation: Send + Sync {
    fn name(&self) -> &'static str;

    /// Value at distance `du = u - v_th` from threshold.
    fn eval(&self, du: f64) -> f64;
}

/// Sharp inverse-square bump, `1 / (100|du| + 1)^2`.
pub struct InverseSquare;

/// Triangle of height 0.3 and half-width 1.
pub struct Triangular;

/// Sigmoid derivative scaled to peak at 1.
pub struct SigmoidBell;

/// Cauchy-shaped bump, `1 / (1 + (10 du)^2)`.
pub struct RationalBell;

impl SecondaryActivation for InverseSquare {
    fn name(&self) -> &'static str {
        "inverse-square"
    }
    fn eval(&self, du: f64) -> f64 {
        let d = 100.0 * du.abs() + 1.0;
        1.0 / (d * d)
    }
}

impl SecondaryActivation for Triangular {
    fn name(&self) -> &'static str {
        "triangular"
    }
    fn eval(&self, du: f64) -> f64 {
        0.3 * (1.0 - du.abs()).max(0.0)
    }
}

impl SecondaryActivation for SigmoidBell {
    fn name(&self) -> &'static str {
        "sigmoid-bell"
    }
    fn eval(&self, du: f64) -> f64 {
        let s = sigmoid(du);
        4.0 * s * (1.0 - s)
    }
}

impl SecondaryActivation for RationalBell {
    fn name(&self) -> &'static str {
        "rational-bell"
    }
    fn eval(&self, du: f64) -> f64 {
        let z = 10.0 * du;
        1.0 / (1.0 + z * z)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

static ACTIVATIONS: Lazy<Registry<dyn SecondaryActivation>> = Lazy::new(|| {
    let mut reg: Registry<dyn SecondaryActivation> = Registry::new("secondary activation");
    reg.register("inverse-square", Box::new(InverseSquare))
        .register("triangular", Box::new(Triangular))
        .register("sigmoid-bell", Box::new(SigmoidBell))
        .register("rational-bell", Box::new(RationalBell));
    reg
});

pub fn activations() -> &'static Registry<dyn SecondaryActivation> {
    &ACTIVATIONS
}

/// Config-level selector for one of the registered activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PsiKind {
    InverseSquare,
    #[default]
    Triangular,
    SigmoidBell,
    RationalBell,
}

impl PsiKind {
    pub const ALL: [PsiKind; 4] =
        [PsiKind::InverseSquare, PsiKind::Triangular, PsiKind::SigmoidBell, PsiKind::RationalBell];

    pub fn name(self) -> &'static str {
        match self {
            PsiKind::InverseSquare => "inverse-square",
            PsiKind::Triangular => "triangular",
            PsiKind::SigmoidBell => "sigmoid-bell",
            PsiKind::RationalBell => "rational-bell",
        }
    }

    pub fn activation(self) -> &'static dyn SecondaryActivation {
        // every variant is registered above
        activations().get(self.name()).expect("registered activation")
    }

    #[inline]
    pub fn eval(self, du: f64) -> f64 {
        self.activation().eval(du)
    }
}

impl fmt::Display for PsiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PsiKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PsiKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::UnknownStrategy {
            family: "secondary activation",
            name: s.to_string(),
            available: activations().names().join(", "),
        })
    }
}

/// Element-wise Ψ(u) centred on `v_th`.
pub fn psi_eval(kind: PsiKind, u: &Array1<f64>, v_th: f64) -> Array1<f64> {
    let act = kind.activation();
    u.mapv(|ui| act.eval(ui - v_th))
}

/// Surrogate derivative Θ′(u) of the firing function. Shares the Ψ family.
pub fn surrogate_deriv(kind: PsiKind, u: &Array1<f64>, v_th: f64) -> Array1<f64> {
    psi_eval(kind, u, v_th)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn peak_values() {
        let v_th = 0.8;
        let at = array![v_th];
        assert_eq!(psi_eval(PsiKind::InverseSquare, &at, v_th)[0], 1.0);
        assert!((psi_eval(PsiKind::Triangular, &at, v_th)[0] - 0.3).abs() < 1e-15);
        assert_eq!(psi_eval(PsiKind::SigmoidBell, &at, v_th)[0], 1.0);
        assert_eq!(psi_eval(PsiKind::RationalBell, &at, v_th)[0], 1.0);
    }

    #[test]
    fn rational_bell_off_peak() {
        let v = psi_eval(PsiKind::RationalBell, &array![0.9], 0.8)[0];
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn triangular_clamps_far_from_threshold() {
        let u = array![-0.2, 1.8, 5.0, -3.0];
        let d = surrogate_deriv(PsiKind::Triangular, &u, 0.8);
        assert!(d.iter().all(|&v| v == 0.0), "{d}");
    }

    #[test]
    fn default_surrogate_is_triangular() {
        assert_eq!(PsiKind::default(), PsiKind::Triangular);
    }

    #[test]
    fn names_round_trip_through_registry() {
        for k in PsiKind::ALL {
            assert_eq!(k.name().parse::<PsiKind>().unwrap(), k);
            assert_eq!(k.activation().name(), k.name());
        }
        assert!("gaussian".parse::<PsiKind>().is_err());
        assert_eq!(activations().names().len(), 4);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!(SigmoidBell.eval(-800.0).is_finite());
    }

    proptest! {
        #[test]
        fn non_negative_and_peaked_at_threshold(du in -50.0f64..50.0, k in 0usize..4) {
            let kind = PsiKind::ALL[k];
            let v = kind.eval(du);
            prop_assert!(v >= 0.0);
            prop_assert!(v <= kind.eval(0.0));
        }
    }
}
