//! Memory and multiply-accumulate counts for full-history BPTT versus the
//! online rule, plus a measured audit of what each engine actually keeps.
//!
//! Widths are `[N_0, ..., N_L]` with `N_0` the input. Counts are elements
//! and MACs; element-wise operations are not counted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bptt::Tape;
use crate::data::Sample;
use crate::engine::{sequence_update, LearningConfig, RetainedState};
use crate::error::{Error, Result};
use crate::network::{NetworkSpec, Weights};
use crate::neuron::Firing;
use crate::signal::Backprop;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub mem: u64,
    pub mac: u64,
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::Config(format!("need an input width and at least one layer, got {} widths", widths.len())));
    }
    if widths.contains(&0) {
        return Err(Error::Config("layer widths must be at least 1".into()));
    }
    Ok(())
}

fn synapses(widths: &[usize]) -> u64 {
    widths.windows(2).map(|w| (w[0] * w[1]) as u64).sum()
}

fn neurons(widths: &[usize]) -> u64 {
    widths.iter().map(|&n| n as u64).sum()
}

/// `mem = T·ΣN_l`, `mac = 2T·ΣN_l·N_{l-1}`.
pub fn cost_bptt(widths: &[usize], t: usize) -> Result<Cost> {
    check_widths(widths)?;
    if t == 0 {
        return Err(Error::Config("T must be at least 1".into()));
    }
    let t = t as u64;
    Ok(Cost { mem: t * neurons(widths), mac: 2 * t * synapses(widths) })
}

/// `mem = 2·ΣN_l`, `mac = 3(T - T_l)·ΣN_l·N_{l-1}`.
pub fn cost_stllr(widths: &[usize], t: usize, t_l: usize) -> Result<Cost> {
    check_widths(widths)?;
    if t_l > t {
        return Err(Error::Config(format!("T_l ({t_l}) exceeds T ({t})")));
    }
    Ok(Cost { mem: 2 * neurons(widths), mac: 3 * (t - t_l) as u64 * synapses(widths) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedups {
    pub s_mem: f64,
    pub s_mac: f64,
}

/// `s_mem = T/2`, `s_mac = 2T / (3(T - T_l))`.
pub fn speedups(t: usize, t_l: usize) -> Result<Speedups> {
    if t_l >= t {
        return Err(Error::Config(format!("MAC ratio undefined for T_l = {t_l} >= T = {t}: no updates are performed")));
    }
    Ok(Speedups { s_mem: t as f64 / 2.0, s_mac: 2.0 * t as f64 / (3.0 * (t - t_l) as f64) })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MethodComplexity {
    pub method: &'static str,
    pub memory: &'static str,
    pub time: &'static str,
    pub temporal_local: bool,
    pub non_causal: bool,
}

const fn row(
    method: &'static str,
    memory: &'static str,
    time: &'static str,
    temporal_local: bool,
    non_causal: bool,
) -> MethodComplexity {
    MethodComplexity { method, memory, time, temporal_local, non_causal }
}

static COMPLEXITY: [MethodComplexity; 8] = [
    row("BPTT", "Tn", "Tn^2", false, false),
    row("RTRL", "n^3", "n^4", true, false),
    row("e-prop", "n^2", "n^2", true, false),
    row("OSTL", "n^2", "n^2", true, false),
    row("ETLP", "n^2", "n^2", true, false),
    row("OSTTP", "n^2", "n^2", true, false),
    row("OTTT", "n", "n^2", true, false),
    row("S-TLLR", "n", "n^2", true, true),
];

/// Asymptotic memory/time per step for common recurrent learning rules.
pub fn complexity_table() -> &'static [MethodComplexity] {
    &COMPLEXITY
}

pub fn lookup_complexity(method: &str) -> Option<&'static MethodComplexity> {
    COMPLEXITY.iter().find(|m| m.method.eq_ignore_ascii_case(method))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    /// 0 is the input.
    pub layer: usize,
    pub width: usize,
    pub mem_bptt: u64,
    pub mem_stllr: u64,
    pub mac_bptt: u64,
    pub mac_stllr: u64,
}

/// Measured element counts from running both engines on one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryAudit {
    pub time_steps: usize,
    /// Peak state the online engine keeps between steps.
    pub stllr: RetainedState,
    /// Elements on the full-history tape after the forward pass.
    pub bptt_tape: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioCheck {
    pub name: String,
    pub closed_form: f64,
    pub from_counts: f64,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub widths: Vec<usize>,
    pub time_steps: usize,
    pub signal_onset: usize,
    pub mem_bptt: u64,
    pub mem_stllr: u64,
    pub mac_bptt: u64,
    pub mac_stllr: u64,
    pub s_mem: f64,
    /// Undefined (null) when no update happens.
    pub s_mac: Option<f64>,
    pub layers: Vec<LayerCost>,
    pub checks: Vec<RatioCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub element_bytes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditSummary>,
}

/// Measured counts next to the closed-form ones. `stllr_overhead` is the
/// measured minus the closed-form count; it is a per-layer constant (input
/// traces sized by fan-in, membranes, last spikes, delayed-output traces of
/// recurrent layers) and does not grow with `T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub measured: MemoryAudit,
    pub stllr_overhead: i64,
    pub bptt_matches: bool,
}

fn ratio(a: u64, b: u64) -> f64 {
    a as f64 / b as f64
}

impl CostReport {
    pub fn new(widths: &[usize], t: usize, t_l: usize) -> Result<Self> {
        let bptt = cost_bptt(widths, t)?;
        let stllr = cost_stllr(widths, t, t_l)?;
        let s_mem = t as f64 / 2.0;
        let s_mac = speedups(t, t_l).ok().map(|s| s.s_mac);
        let layers = widths
            .iter()
            .enumerate()
            .map(|(l, &n)| {
                let syn = if l == 0 { 0 } else { (n * widths[l - 1]) as u64 };
                LayerCost {
                    layer: l,
                    width: n,
                    mem_bptt: (t * n) as u64,
                    mem_stllr: 2 * n as u64,
                    mac_bptt: 2 * t as u64 * syn,
                    mac_stllr: 3 * (t - t_l) as u64 * syn,
                }
            })
            .collect();
        let mut checks = vec![RatioCheck {
            name: "s_mem".into(),
            closed_form: s_mem,
            from_counts: ratio(bptt.mem, stllr.mem),
            consistent: false,
        }];
        if let Some(s_mac) = s_mac {
            checks.push(RatioCheck {
                name: "s_mac".into(),
                closed_form: s_mac,
                from_counts: ratio(bptt.mac, stllr.mac),
                consistent: false,
            });
        }
        for c in &mut checks {
            c.consistent = (c.closed_form - c.from_counts).abs() <= 1e-12 * c.closed_form.abs();
        }
        Ok(Self {
            widths: widths.to_vec(),
            time_steps: t,
            signal_onset: t_l,
            mem_bptt: bptt.mem,
            mem_stllr: stllr.mem,
            mac_bptt: bptt.mac,
            mac_stllr: stllr.mac,
            s_mem,
            s_mac,
            layers,
            checks,
            element_bytes: None,
            audit: None,
        })
    }

    pub fn with_element_bytes(mut self, bytes: usize) -> Self {
        self.element_bytes = Some(bytes);
        self
    }

    pub fn with_audit(mut self, audit: MemoryAudit) -> Self {
        self.audit = Some(AuditSummary {
            measured: audit,
            stllr_overhead: audit.stllr.total() as i64 - self.mem_stllr as i64,
            bptt_matches: audit.bptt_tape as u64 == self.mem_bptt,
        });
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "widths {:?}  T={}  T_l={}", self.widths, self.time_steps, self.signal_onset);
        let header = ["layer", "width", "mem_bptt", "mem_stllr", "mac_bptt", "mac_stllr"];
        let mut rows: Vec<[String; 6]> = self
            .layers
            .iter()
            .map(|l| {
                [
                    l.layer.to_string(),
                    l.width.to_string(),
                    l.mem_bptt.to_string(),
                    l.mem_stllr.to_string(),
                    l.mac_bptt.to_string(),
                    l.mac_stllr.to_string(),
                ]
            })
            .collect();
        rows.push([
            "total".into(),
            String::new(),
            self.mem_bptt.to_string(),
            self.mem_stllr.to_string(),
            self.mac_bptt.to_string(),
            self.mac_stllr.to_string(),
        ]);
        let mut col = [0usize; 6];
        for (i, h) in header.iter().enumerate() {
            col[i] = rows.iter().map(|r| r[i].len()).max().unwrap_or(0).max(h.len());
        }
        let line =
            |cells: &[&str]| cells.iter().zip(col).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ");
        let _ = writeln!(s, "{}", line(&header));
        for r in &rows {
            let cells: Vec<&str> = r.iter().map(String::as_str).collect();
            let _ = writeln!(s, "{}", line(&cells));
        }
        let _ = writeln!(s, "s_mem = {:.4}", self.s_mem);
        match self.s_mac {
            Some(v) => {
                let _ = writeln!(s, "s_mac = {v:.4}");
            }
            None => {
                let _ = writeln!(s, "s_mac = undefined (no updates)");
            }
        }
        for c in &self.checks {
            let _ = writeln!(
                s,
                "check {:<6} closed-form {:.6}  from counts {:.6}  {}",
                c.name,
                c.closed_form,
                c.from_counts,
                if c.consistent { "ok" } else { "MISMATCH" }
            );
        }
        if let Some(b) = self.element_bytes {
            let _ = writeln!(
                s,
                "bytes at {b} B/element: bptt {}  stllr {}",
                self.mem_bptt * b as u64,
                self.mem_stllr * b as u64
            );
        }
        if let Some(a) = &self.audit {
            let _ = writeln!(
                s,
                "measured: stllr {} (traces {}, neuron state {}; {:+} vs closed form)  bptt tape {} ({})",
                a.measured.stllr.total(),
                a.measured.stllr.trace_elements,
                a.measured.stllr.neuron_elements,
                a.stllr_overhead,
                a.measured.bptt_tape,
                if a.bptt_matches { "matches" } else { "MISMATCH" }
            );
        }
        s
    }
}

/// Run the online engine and record the full-history tape on one sample,
/// returning the element counts each keeps.
pub fn runtime_memory_audit(
    net: &NetworkSpec,
    weights: &Weights,
    sample: &Sample,
    config: &LearningConfig,
) -> Result<MemoryAudit> {
    if net.layers.is_empty() {
        return Ok(MemoryAudit { time_steps: sample.time_steps(), stllr: RetainedState::default(), bptt_tape: 0 });
    }
    let (_, metrics) = sequence_update(net, weights, sample, config, &Backprop)?;
    let tape = Tape::record(net, weights, &sample.frames, Firing::Heaviside)?;
    Ok(MemoryAudit { time_steps: sample.time_steps(), stllr: metrics.retained, bptt_tape: tape.stored_elements() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn bptt_examples() {
        let w = [1000; 5];
        assert_eq!(cost_bptt(&w, 10).unwrap().mem, 50_000);
        assert_eq!(cost_bptt(&[1000, 1], 1).unwrap().mac, 2000);
        let a = cost_bptt(&w, 7).unwrap();
        let b = cost_bptt(&w, 14).unwrap();
        assert_eq!((b.mem, b.mac), (2 * a.mem, 2 * a.mac));
        assert!(cost_bptt(&[], 3).is_err());
        assert!(cost_bptt(&[5], 3).is_err());
    }

    #[test]
    fn stllr_examples() {
        let w = [1000; 5];
        for t in [1, 10, 300] {
            assert_eq!(cost_stllr(&w, t, 0).unwrap().mem, 10_000);
        }
        assert_eq!(cost_stllr(&w, 10, 10).unwrap().mac, 0);
        assert!(cost_stllr(&w, 10, 11).is_err());
    }

    #[test]
    fn published_ratios() {
        let close = |a: f64, b: f64| (a - b).abs() <= 0.05;
        assert_eq!(speedups(10, 0).unwrap().s_mem, 5.0);
        assert_eq!(speedups(100, 0).unwrap().s_mem, 50.0);
        assert!(close(speedups(20, 15).unwrap().s_mac, 2.67));
        assert!(close(speedups(10, 5).unwrap().s_mac, 1.33));
        assert!(close(speedups(10, 9).unwrap().s_mac, 6.67));
        assert!(speedups(10, 10).is_err());
    }

    #[test]
    fn complexity_lookup() {
        let s = lookup_complexity("s-tllr").unwrap();
        assert_eq!(s.memory, "n");
        assert!(s.non_causal && s.temporal_local);
        let r = lookup_complexity("RTRL").unwrap();
        assert_eq!((r.memory, r.time), ("n^3", "n^4"));
        assert!(!lookup_complexity("BPTT").unwrap().temporal_local);
        assert_eq!(complexity_table().iter().filter(|m| m.non_causal).count(), 1);
        assert!(lookup_complexity("nope").is_none());
    }

    #[test]
    fn report_text_and_json() {
        let r = CostReport::new(&[4, 3, 2], 10, 5).unwrap().with_element_bytes(4);
        assert_eq!(r.layers.len(), 3);
        assert_eq!(r.layers.iter().map(|l| l.mem_bptt).sum::<u64>(), r.mem_bptt);
        assert_eq!(r.layers.iter().map(|l| l.mac_stllr).sum::<u64>(), r.mac_stllr);
        assert!(r.checks.iter().all(|c| c.consistent));
        let text = r.to_text();
        assert!(text.contains("s_mac = 1.3333"), "{text}");
        let back: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back["mem_bptt"], 90);
        let degenerate = CostReport::new(&[4, 3, 2], 10, 10).unwrap();
        assert_eq!(degenerate.s_mac, None);
        assert!(degenerate.to_text().contains("undefined"));
    }

    #[test]
    fn empty_network_audits_to_zero() {
        let net = NetworkSpec::new(3, vec![]);
        let w = Weights { layers: vec![] };
        let s = Sample { frames: ndarray::Array2::zeros((4, 3)), target: crate::loss::Target::Class(0) };
        let cfg = LearningConfig {
            mode: Default::default(),
            time_steps: 4,
            signal_onset: 0,
            learning_rate: 1.0,
            stdp: Default::default(),
            loss: Default::default(),
            optimizer: Default::default(),
        };
        let a = runtime_memory_audit(&net, &w, &s, &cfg).unwrap();
        assert_eq!((a.stllr.total(), a.bptt_tape), (0, 0));
    }

    proptest! {
        #[test]
        fn closed_form_ratios_match_counts(
            widths in proptest::collection::vec(1usize..300, 2..7),
            t in 1usize..400,
            frac in 0.0f64..1.0,
        ) {
            let t_l = ((t as f64) * frac) as usize;
            prop_assert!(t_l < t);
            let b = cost_bptt(&widths, t).unwrap();
            let s = cost_stllr(&widths, t, t_l).unwrap();
            let sp = speedups(t, t_l).unwrap();
            prop_assert!((sp.s_mem - ratio(b.mem, s.mem)).abs() < 1e-12 * sp.s_mem);
            prop_assert!((sp.s_mac - ratio(b.mac, s.mac)).abs() < 1e-12 * sp.s_mac);
            prop_assert_eq!(cost_stllr(&widths, t + 5, t_l).unwrap().mem, s.mem);
        }
    }
}
