//! Integrated-gradients attribution over MLP neurons and global top-r
//! ranking.
//!
//! For layer `l` with activations `w̄` (zero baseline), every unit's score is
//! `Σ_t w̄[t,u] · (1/m) Σ_{k=1..m} ∂P/∂w[t,u] |_{α_k·w̄}` where the whole
//! layer is scaled jointly along the path and `α_k` is `(k − ½)/m` (midpoint
//! rule, the default) or `k/m` (right endpoints). Summing over positions after the
//! product keeps the per-layer completeness identity
//! `Σ_u ns[u] ≈ P(w̄) − P(0)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::gradients::prob_grad_wrt_activations;
use crate::model::{forward, NeuronId, Parameters};
use crate::tensor::Mat;

pub const DEFAULT_IG_STEPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TargetClass {
    /// Class predicted by the unmodified model.
    #[default]
    Predicted,
    /// Gold label of the instance.
    Gold,
}

/// Where along `[0, 1]` the path gradient is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IgRule {
    /// `α_k = (k − ½)/m`; second-order accurate.
    #[default]
    Midpoint,
    /// `α_k = k/m`.
    Right,
}

impl IgRule {
    pub fn alpha(self, k: usize, m: usize) -> f64 {
        match self {
            IgRule::Midpoint => (k as f64 - 0.5) / m as f64,
            IgRule::Right => k as f64 / m as f64,
        }
    }
}

/// Attribution score for every MLP neuron, layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronScores {
    pub n_layers: usize,
    pub d_mlp: usize,
    pub target: usize,
    pub scores: Vec<f64>,
}

impl NeuronScores {
    pub fn get(&self, n: NeuronId) -> f64 {
        self.scores[n.layer * self.d_mlp + n.unit]
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.scores[l * self.d_mlp..(l + 1) * self.d_mlp]
    }

    pub fn iter(&self) -> impl Iterator<Item = (NeuronId, f64)> + '_ {
        self.scores
            .iter()
            .enumerate()
            .map(move |(i, &s)| (NeuronId::new(i / self.d_mlp, i % self.d_mlp), s))
    }
}

/// Riemann sum `Σ_t acts[t,u] · (1/m) Σ_k grad_at(α_k)[t,u]`.
pub fn integrate_layer<F>(acts: &Mat, m: usize, rule: IgRule, mut grad_at: F) -> Result<Vec<f64>>
where
    F: FnMut(f64) -> Result<Mat>,
{
    if m == 0 {
        return Err(Error::InvalidArgument("ig steps must be at least 1".into()));
    }
    let mut sum = Mat::zeros_like(acts);
    for k in 1..=m {
        let g = grad_at(rule.alpha(k, m))?;
        sum.add_assign(&g);
    }
    let mut out = vec![0.0; acts.cols];
    for t in 0..acts.rows {
        for (u, o) in out.iter_mut().enumerate() {
            *o += acts.get(t, u) * (sum.get(t, u) / m as f64);
        }
    }
    Ok(out)
}

pub fn attribute_tokens(
    params: &Parameters,
    tokens: &[u32],
    gold: usize,
    m: usize,
    target: TargetClass,
) -> Result<NeuronScores> {
    attribute_tokens_with(params, tokens, gold, m, target, IgRule::default())
}

pub fn attribute_tokens_with(
    params: &Parameters,
    tokens: &[u32],
    gold: usize,
    m: usize,
    target: TargetClass,
    rule: IgRule,
) -> Result<NeuronScores> {
    let cfg = &params.config;
    let base = forward(params, tokens, None)?;
    let target = match target {
        TargetClass::Predicted => base.predicted,
        TargetClass::Gold => gold,
    };
    let mut scores = Vec::with_capacity(cfg.n_neurons());
    for (layer, acts) in base.mlp_acts.iter().enumerate() {
        let layer_scores = integrate_layer(acts, m, rule, |scale| {
            Ok(prob_grad_wrt_activations(params, tokens, layer, target, scale)?.grad)
        })?;
        scores.extend(layer_scores);
    }
    Ok(NeuronScores {
        n_layers: cfg.n_layers,
        d_mlp: cfg.d_mlp,
        target,
        scores,
    })
}

pub fn attribute_neurons(
    params: &Parameters,
    instance: &Instance,
    m: usize,
    target: TargetClass,
) -> Result<NeuronScores> {
    attribute_tokens(params, &instance.tokens(), instance.label, m, target)
}

/// Neurons sorted by descending score, ties by `(layer, unit)` ascending,
/// with min-max normalized scores alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedNeurons {
    pub entries: Vec<(NeuronId, f64)>,
    pub normalized: Vec<f64>,
}

impl RankedNeurons {
    pub fn from_entries(mut entries: Vec<(NeuronId, f64)>) -> Self {
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let normalized = min_max(&entries);
        Self {
            entries,
            normalized,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn neurons(&self) -> Vec<NeuronId> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn top1(&self) -> Option<NeuronId> {
        self.entries.first().map(|e| e.0)
    }

    /// First `r` entries, normalization recomputed over them.
    pub fn truncated(&self, r: usize) -> Self {
        let entries: Vec<_> = self.entries.iter().take(r).copied().collect();
        let normalized = min_max(&entries);
        Self {
            entries,
            normalized,
        }
    }
}

fn min_max(entries: &[(NeuronId, f64)]) -> Vec<f64> {
    let (lo, hi) = entries.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
        (lo.min(e.1), hi.max(e.1))
    });
    entries
        .iter()
        .map(|e| if hi > lo { (e.1 - lo) / (hi - lo) } else { 1.0 })
        .collect()
}

pub fn top_r(scores: &NeuronScores, r: usize) -> Result<RankedNeurons> {
    let total = scores.scores.len();
    if r == 0 {
        return Err(Error::InvalidArgument("r must be at least 1".into()));
    }
    if r > total {
        return Err(Error::TooManyNeurons {
            requested: r,
            available: total,
        });
    }
    Ok(RankedNeurons::from_entries(scores.iter().collect()).truncated(r))
}

/// On-disk form of one instance's ranked neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronDump {
    pub instance_id: String,
    pub method: String,
    pub target: Option<usize>,
    pub neurons: Vec<NeuronEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronEntry {
    pub layer: usize,
    pub unit: usize,
    pub score: f64,
    pub normalized: f64,
}

impl NeuronDump {
    pub fn new(instance_id: &str, method: &str, target: Option<usize>, ranked: &RankedNeurons) -> Self {
        Self {
            instance_id: instance_id.to_string(),
            method: method.to_string(),
            target,
            neurons: ranked
                .entries
                .iter()
                .zip(&ranked.normalized)
                .map(|((n, s), z)| NeuronEntry {
                    layer: n.layer,
                    unit: n.unit,
                    score: *s,
                    normalized: *z,
                })
                .collect(),
        }
    }

    /// Entries in file order; the file is written already sorted.
    pub fn ranked(&self) -> RankedNeurons {
        RankedNeurons {
            entries: self
                .neurons
                .iter()
                .map(|e| (NeuronId::new(e.layer, e.unit), e.score))
                .collect(),
            normalized: self.neurons.iter().map(|e| e.normalized).collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(v: Vec<f64>, d_mlp: usize) -> NeuronScores {
        NeuronScores {
            n_layers: v.len() / d_mlp,
            d_mlp,
            target: 0,
            scores: v,
        }
    }

    #[test]
    fn constant_integrand_gives_exact_score() {
        // P = 0.1 + 0.2 w along the path, w̄ = 1.5.
        let acts = Mat::from_vec(1, 1, vec![1.5]);
        for rule in [IgRule::Midpoint, IgRule::Right] {
            for m in [1, 3, 20, 301] {
                let s = integrate_layer(&acts, m, rule, |_| Ok(Mat::from_vec(1, 1, vec![0.2]))).unwrap();
                assert!((s[0] - 0.3).abs() < 1e-12, "m={m}: {}", s[0]);
            }
        }
    }

    #[test]
    fn linear_integrand_by_rule() {
        // ∫₀¹ α dα = ½; midpoint is exact, right endpoints give (m+1)/2m.
        let acts = Mat::from_vec(1, 1, vec![1.0]);
        for m in [1, 4, 9] {
            let mid = integrate_layer(&acts, m, IgRule::Midpoint, |a| Ok(Mat::from_vec(1, 1, vec![a]))).unwrap();
            let right = integrate_layer(&acts, m, IgRule::Right, |a| Ok(Mat::from_vec(1, 1, vec![a]))).unwrap();
            assert!((mid[0] - 0.5).abs() < 1e-15);
            assert!((right[0] - (m + 1) as f64 / (2 * m) as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_activation_scores_exactly_zero() {
        let acts = Mat::from_vec(2, 2, vec![0.0, 1.0, 0.0, 2.0]);
        let s = integrate_layer(&acts, 7, IgRule::Right, |k| Ok(Mat::from_vec(2, 2, vec![k * 3.0, 1.0, -9.0, 1.0])))
            .unwrap();
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 3.0);
    }

    #[test]
    fn zero_steps_rejected() {
        let acts = Mat::zeros(1, 1);
        assert!(integrate_layer(&acts, 0, IgRule::Midpoint, |_| Ok(Mat::zeros(1, 1))).is_err());
    }

    #[test]
    fn top_r_orders_by_score() {
        // A = (0,0):3, B = (0,1):1, C = (0,2):2
        let s = scores(vec![3.0, 1.0, 2.0], 3);
        let r = top_r(&s, 2).unwrap();
        assert_eq!(r.neurons(), vec![NeuronId::new(0, 0), NeuronId::new(0, 2)]);
        assert_eq!(r.normalized, vec![1.0, 0.0]);
    }

    #[test]
    fn ties_break_by_layer_then_unit() {
        let s = scores(vec![0.5; 6], 3);
        let r = top_r(&s, 2).unwrap();
        assert_eq!(r.neurons(), vec![NeuronId::new(0, 0), NeuronId::new(0, 1)]);
        assert_eq!(r.normalized, vec![1.0, 1.0]);
    }

    #[test]
    fn scaling_scores_keeps_ordering() {
        let raw = vec![0.3, -1.0, 2.5, 0.3, 7.0, -0.2];
        let a = top_r(&scores(raw.clone(), 3), 6).unwrap();
        let b = top_r(&scores(raw.iter().map(|v| v * 5.0).collect(), 3), 6).unwrap();
        assert_eq!(a.neurons(), b.neurons());
    }

    #[test]
    fn r_bounds_are_checked() {
        let s = scores(vec![1.0, 2.0], 2);
        assert!(matches!(top_r(&s, 3), Err(Error::TooManyNeurons { .. })));
        assert!(top_r(&s, 0).is_err());
    }

    #[test]
    fn dump_round_trip_preserves_order() {
        let r = top_r(&scores(vec![0.1, 0.9, 0.4, 0.4], 2), 4).unwrap();
        let dump = NeuronDump::new("x", "na", Some(1), &r);
        let text = serde_json::to_string(&dump).unwrap();
        let back: NeuronDump = serde_json::from_str(&text).unwrap();
        assert_eq!(back.ranked(), r);
    }
}
