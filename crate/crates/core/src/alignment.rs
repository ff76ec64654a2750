//! Bridges between the two attribution families: NA-Instances ranks
//! training instances by how highly they rank a test instance's important
//! neurons (discounted cumulative neuron similarity), and IA-Neurons
//! collects the top neuron of each influential training instance.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance_attribution::{InstanceScores, ScoreMethod};
use crate::model::NeuronId;
use crate::neuron_attribution::RankedNeurons;

pub const DEFAULT_ALIGN_R: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DcnsScores {
    /// Min-max normalized attribution scores in [0, 1].
    #[default]
    Normalized,
    /// Raw integrated-gradients scores.
    Raw,
}

/// `Σ_{m=1..r, train[m] ∈ test[..r]} (2^{ns_m} − 1) / log2(m + 1)` with `ns`
/// taken from the training instance's list.
pub fn dcns_with(test: &RankedNeurons, train: &RankedNeurons, r: usize, kind: DcnsScores) -> f64 {
    let wanted: HashSet<NeuronId> = test.entries.iter().take(r).map(|e| e.0).collect();
    let mut total = 0.0;
    for (m, (neuron, raw)) in train.entries.iter().take(r).enumerate() {
        if !wanted.contains(neuron) {
            continue;
        }
        let ns = match kind {
            DcnsScores::Normalized => train.normalized[m],
            DcnsScores::Raw => *raw,
        };
        total += (ns.exp2() - 1.0) / ((m + 2) as f64).log2();
    }
    total
}

pub fn dcns(test: &RankedNeurons, train: &RankedNeurons, r: usize) -> f64 {
    dcns_with(test, train, r, DcnsScores::Normalized)
}

/// Largest attainable score: identical lists, every normalized score 1.
pub fn dcns_upper_bound(r: usize) -> f64 {
    (1..=r).map(|m| 1.0 / ((m + 1) as f64).log2()).sum()
}

/// Scores every training instance by DCNS against the test instance. Both
/// lists are cut to their top `r` (normalization recomputed on the cut).
pub fn na_instances_from(
    test_id: &str,
    test_neurons: &RankedNeurons,
    train_neurons: &[(String, RankedNeurons)],
    r: usize,
    kind: DcnsScores,
) -> InstanceScores {
    let test = test_neurons.truncated(r);
    let scores: BTreeMap<String, f64> = train_neurons
        .iter()
        .map(|(id, ranked)| (id.clone(), dcns_with(&test, &ranked.truncated(r), r, kind)))
        .collect();
    InstanceScores::new(ScoreMethod::NaInstances, test_id, scores)
}

/// Top-1 neurons of the most influential training instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IaNeurons {
    pub method: ScoreMethod,
    pub test_id: String,
    /// `(train_id, neuron)` for the `r` most influential instances, duplicates kept.
    pub raw: Vec<(String, NeuronId)>,
    /// Walk down the influence ranking keeping only first occurrences, until
    /// `r` distinct neurons are found.
    pub deduped: Vec<(String, NeuronId)>,
    /// Fewer than `r` entries could be produced.
    pub short: bool,
}

impl IaNeurons {
    pub fn neurons(&self) -> Vec<NeuronId> {
        self.deduped.iter().map(|e| e.1).collect()
    }

    pub fn raw_neurons(&self) -> Vec<NeuronId> {
        self.raw.iter().map(|e| e.1).collect()
    }
}

pub fn ia_neurons_from(
    scores: &InstanceScores,
    train_top1: &HashMap<String, NeuronId>,
    r: usize,
) -> Result<IaNeurons> {
    if r == 0 {
        return Err(Error::InvalidArgument("r must be at least 1".into()));
    }
    let lookup = |id: &String| {
        train_top1
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownInstance(id.clone()))
    };
    let raw = scores
        .ranking
        .iter()
        .take(r)
        .map(|id| Ok((id.clone(), lookup(id)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut seen = HashSet::new();
    let mut deduped = Vec::new();
    for id in &scores.ranking {
        if deduped.len() == r {
            break;
        }
        let n = lookup(id)?;
        if seen.insert(n) {
            deduped.push((id.clone(), n));
        }
    }
    Ok(IaNeurons {
        method: scores.method,
        test_id: scores.test_id.clone(),
        short: raw.len() < r || deduped.len() < r,
        raw,
        deduped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(l: usize, u: usize) -> NeuronId {
        NeuronId::new(l, u)
    }

    fn ranked(entries: &[(NeuronId, f64)], normalized: &[f64]) -> RankedNeurons {
        RankedNeurons {
            entries: entries.to_vec(),
            normalized: normalized.to_vec(),
        }
    }

    #[test]
    fn no_common_neurons_scores_zero() {
        let test = ranked(&[(n(0, 0), 1.0)], &[1.0]);
        let train = ranked(&[(n(0, 1), 1.0)], &[1.0]);
        assert_eq!(dcns(&test, &train, 5), 0.0);
    }

    #[test]
    fn single_match_at_rank_one() {
        let test = ranked(&[(n(0, 0), 1.0)], &[1.0]);
        assert_eq!(dcns(&test, &test, 1), 1.0);
    }

    #[test]
    fn worked_example() {
        let (a, b, c, d) = (n(0, 0), n(0, 1), n(0, 2), n(0, 3));
        let test = ranked(&[(a, 3.0), (b, 2.0), (c, 1.0)], &[1.0, 0.5, 0.0]);
        let train = ranked(&[(b, 0.5), (d, 0.9), (a, 0.25)], &[0.5, 0.9, 0.25]);
        let got = dcns(&test, &train, 3);
        let exact = (2f64.sqrt() - 1.0) + (2f64.powf(0.25) - 1.0) / 2.0;
        assert_eq!(got, exact);
        // 0.508818 is the sum of the two terms each rounded to 6 places.
        assert!((got - 0.508818).abs() < 1e-6, "{got}");
    }

    #[test]
    fn identical_all_ones_hits_upper_bound() {
        let list = ranked(&[(n(0, 0), 1.0), (n(0, 1), 1.0), (n(1, 0), 1.0)], &[1.0; 3]);
        let got = dcns(&list, &list, 3);
        assert!((got - 2.13093).abs() < 1e-5);
        assert_eq!(got, dcns_upper_bound(3));
    }

    #[test]
    fn ia_neurons_dedup_pulls_from_next_instance() {
        let scores = InstanceScores::new(
            ScoreMethod::Gs,
            "t",
            [("a", 3.0), ("b", 2.0), ("c", 1.0)]
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
        );
        let top1: HashMap<String, NeuronId> = [("a", n(0, 4)), ("b", n(0, 4)), ("c", n(1, 2))]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let one = ia_neurons_from(&scores, &top1, 1).unwrap();
        assert_eq!(one.neurons(), vec![n(0, 4)]);
        let two = ia_neurons_from(&scores, &top1, 2).unwrap();
        assert_eq!(two.raw_neurons(), vec![n(0, 4), n(0, 4)]);
        assert_eq!(two.neurons(), vec![n(0, 4), n(1, 2)]);
        assert_eq!(two.deduped[1].0, "c");
        assert!(!two.short);
        let five = ia_neurons_from(&scores, &top1, 5).unwrap();
        assert!(five.short);
        assert_eq!(five.raw.len(), 3);
    }
}
