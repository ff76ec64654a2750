//! Overlap, diversity, regression and artifact-detection analytics, plus the
//! table and plot-data writers built on them.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::hash::Hash;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ENTAILS};
use crate::engine::AttributionEngine;
use crate::error::{Error, Result};
use crate::faithfulness::fnv1a;
use crate::instance_attribution::{fraction_count, InstanceScores, ScoreMethod};
use crate::model::{cross_entropy, forward, NeuronId, Parameters};
use crate::neuron_attribution::RankedNeurons;
use crate::retrain_harness::Series;
use crate::tensor::{dot, norm};

/// Size of the union of the per-test-instance lists.
pub fn unique_instance_count<'a, I>(lists: I) -> usize
where
    I: IntoIterator<Item = &'a [String]>,
{
    lists.into_iter().flatten().collect::<HashSet<_>>().len()
}

/// `100·|A∩B| / max(|A|,|B|)` over the distinct elements of each side.
pub fn instance_overlap<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<f64> {
    let sa: HashSet<&T> = a.iter().collect();
    let sb: HashSet<&T> = b.iter().collect();
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::InvalidArgument("overlap of an empty list".into()));
    }
    let common = sa.intersection(&sb).count();
    Ok(100.0 * common as f64 / sa.len().max(sb.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronOverlap {
    pub na_only_pct: f64,
    pub ia_only_pct: f64,
    pub shared_pct: f64,
}

pub fn neuron_overlap_on_union(na: &[NeuronId], ia: &[NeuronId]) -> Result<NeuronOverlap> {
    let a: BTreeSet<_> = na.iter().collect();
    let b: BTreeSet<_> = ia.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return Err(Error::InvalidArgument("both neuron sets are empty".into()));
    }
    let shared = a.intersection(&b).count();
    let u = union as f64;
    Ok(NeuronOverlap {
        na_only_pct: 100.0 * (a.len() - shared) as f64 / u,
        ia_only_pct: 100.0 * (b.len() - shared) as f64 / u,
        shared_pct: 100.0 * shared as f64 / u,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityMetrics {
    /// `None` for a single-instance subset.
    pub mean_pairwise_cosine: Option<f64>,
    pub mean_loss: f64,
    pub vocabulary: usize,
    pub mean_input_length: f64,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

pub fn diversity_metrics(subset: &Dataset, params: &Parameters) -> Result<DiversityMetrics> {
    if subset.is_empty() {
        return Err(Error::InvalidDataset("empty subset".into()));
    }
    let traces = subset
        .instances
        .par_iter()
        .map(|i| forward(params, &i.tokens(), None))
        .collect::<Result<Vec<_>>>()?;
    let n = subset.len();
    let mean_loss = traces
        .iter()
        .zip(subset.iter())
        .map(|(t, i)| cross_entropy(&t.logits, i.label))
        .sum::<f64>()
        / n as f64;
    let mean_pairwise_cosine = (n > 1).then(|| {
        let mut sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                sum += cosine(&traces[i].last_hidden, &traces[j].last_hidden);
            }
        }
        sum / (n * (n - 1) / 2) as f64
    });
    let mut vocab = HashSet::new();
    let mut len_sum = 0usize;
    for inst in subset.iter() {
        let t = inst.tokens();
        len_sum += t.len();
        vocab.extend(t);
    }
    Ok(DiversityMetrics {
        mean_pairwise_cosine,
        mean_loss,
        vocabulary: vocab.len(),
        mean_input_length: len_sum as f64 / n as f64,
    })
}

/// Least-squares slope of `y` on `x` with a fitted intercept.
pub fn regression_coefficient(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "regression needs two equal-length series of at least 2 points (got {} and {})",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("regression predictor is constant".into()));
    }
    Ok(sxy / sxx)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Mean lexical overlap of the top-`k` training instances, over every
/// instance in `scores`.
pub fn mean_top_k_overlap(scores: &[InstanceScores], train: &Dataset, k: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in scores {
        for id in s.top(k) {
            let inst = train
                .get(id)
                .ok_or_else(|| Error::UnknownInstance(id.clone()))?;
            sum += inst.lexical_overlap();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no retrieved instances".into()));
    }
    Ok(sum / n as f64)
}

/// Mean overlap of `k` training instances drawn uniformly (without
/// replacement) per test instance, seeded by `(seed, test id)`.
pub fn random_top_k_overlap(test_ids: &[String], train: &Dataset, k: usize, seed: u64) -> Result<f64> {
    let k = k.min(train.len());
    if test_ids.is_empty() || k == 0 {
        return Err(Error::InvalidArgument("no retrieved instances".into()));
    }
    let mut sum = 0.0;
    for id in test_ids {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(id.as_bytes()));
        for i in rand::seq::index::sample(&mut rng, train.len(), k) {
            sum += train.instances[i].lexical_overlap();
        }
    }
    Ok(sum / (test_ids.len() * k) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRow {
    pub method: String,
    pub k: usize,
    pub mean_overlap: f64,
    /// Per-seed values for the random baseline; empty for attribution methods.
    pub per_seed: Vec<f64>,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactReport {
    pub n_mispredicted: usize,
    /// Set when no instance was mispredicted as entailment.
    pub empty: bool,
    pub mispredicted_ids: Vec<String>,
    pub train_base_rate: f64,
    pub rows: Vec<ArtifactRow>,
}

impl ArtifactReport {
    pub fn row(&self, method: &str, k: usize) -> Option<&ArtifactRow> {
        self.rows.iter().find(|r| r.method == method && r.k == k)
    }

    /// Columns `method,k,mean_overlap,std`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "k", "mean_overlap", "std"])?;
        for r in &self.rows {
            w.write_record([&r.method, &r.k.to_string(), &r.mean_overlap.to_string(), &r.std.to_string()])?;
        }
        w.write_record(["train_base_rate", "", &self.train_base_rate.to_string(), ""])?;
        w.flush()?;
        Ok(())
    }
}

/// Ids of instances predicted as the entails class whose gold label differs.
pub fn mispredicted_as_entails(params: &Parameters, set: &Dataset) -> Result<Vec<String>> {
    let preds = set
        .instances
        .par_iter()
        .map(|i| Ok(forward(params, &i.tokens(), None)?.predicted))
        .collect::<Result<Vec<_>>>()?;
    Ok(set
        .iter()
        .zip(preds)
        .filter(|(i, p)| *p == ENTAILS && i.label != ENTAILS)
        .map(|(i, _)| i.id.clone())
        .collect())
}

/// Lexical overlap of the instances each method retrieves for test
/// instances mispredicted as entailment, against a random baseline.
pub fn artifact_detection(
    engine: &AttributionEngine<'_>,
    heuristic_test: &Dataset,
    methods: &[ScoreMethod],
    ks: &[usize],
    random_seeds: &[u64],
) -> Result<ArtifactReport> {
    let train = engine.train_set();
    let train_base_rate = train.iter().map(|i| i.lexical_overlap()).sum::<f64>() / train.len() as f64;
    let ids = mispredicted_as_entails(engine.params(), heuristic_test)?;
    let mut report = ArtifactReport {
        n_mispredicted: ids.len(),
        empty: ids.is_empty(),
        mispredicted_ids: ids.clone(),
        train_base_rate,
        rows: Vec::new(),
    };
    if ids.is_empty() {
        return Ok(report);
    }
    let subset = heuristic_test.subset(&ids)?;
    for &m in methods {
        let scores = engine.scores_for_set(m, &subset)?;
        for &k in ks {
            report.rows.push(ArtifactRow {
                method: m.as_str().to_string(),
                k,
                mean_overlap: mean_top_k_overlap(&scores, train, k)?,
                per_seed: Vec::new(),
                std: 0.0,
            });
        }
    }
    if !random_seeds.is_empty() {
        for &k in ks {
            let per_seed = random_seeds
                .iter()
                .map(|&s| random_top_k_overlap(&ids, train, k, s))
                .collect::<Result<Vec<_>>>()?;
            let (mean, std) = mean_std(&per_seed);
            report.rows.push(ArtifactRow {
                method: "Random".into(),
                k,
                mean_overlap: mean,
                per_seed,
                std,
            });
        }
    }
    Ok(report)
}

/// Columns `method,unique_instances,n_test`.
pub fn write_table1<W: Write>(out: W, rows: &[(String, Vec<InstanceScores>)], k: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "unique_instances", "n_test"])?;
    for (method, scores) in rows {
        let count = unique_instance_count(scores.iter().map(|s| s.top(k)));
        w.write_record([method.as_str(), &count.to_string(), &scores.len().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// For each pair of methods, the mean per-test-instance overlap of their
/// first n% influential instances.
pub fn fig3_series(methods: &[(String, Vec<InstanceScores>)], fractions: &[f64]) -> Result<Vec<Series>> {
    let mut out = Vec::new();
    for (i, (na, sa)) in methods.iter().enumerate() {
        for (nb, sb) in &methods[i + 1..] {
            let by_id: BTreeMap<&str, &InstanceScores> = sb.iter().map(|s| (s.test_id.as_str(), s)).collect();
            let mut points = Vec::new();
            for &f in fractions {
                let mut sum = 0.0;
                for a in sa {
                    let b = by_id
                        .get(a.test_id.as_str())
                        .ok_or_else(|| Error::UnknownInstance(a.test_id.clone()))?;
                    let ka = fraction_count(f, a.ranking.len())?;
                    let kb = fraction_count(f, b.ranking.len())?;
                    sum += instance_overlap(a.top(ka), b.top(kb))?;
                }
                points.push((f, sum / sa.len() as f64));
            }
            out.push(Series {
                label: format!("{na} vs {nb}"),
                points,
            });
        }
    }
    Ok(out)
}

/// Shares of the union of top-n NA and IA neurons, averaged over instances
/// present in both maps.
pub fn fig4_series(
    na: &BTreeMap<String, RankedNeurons>,
    ia: &BTreeMap<String, Vec<NeuronId>>,
    ns: &[usize],
) -> Result<Vec<Series>> {
    let mut series = [
        Series { label: "NA only".into(), points: vec![] },
        Series { label: "IA only".into(), points: vec![] },
        Series { label: "shared".into(), points: vec![] },
    ];
    for &n in ns {
        let mut acc = [0.0; 3];
        let mut count = 0usize;
        for (id, ranked) in na {
            let Some(ia_list) = ia.get(id) else { continue };
            let a = ranked.truncated(n).neurons();
            let b: Vec<NeuronId> = ia_list.iter().take(n).copied().collect();
            let o = neuron_overlap_on_union(&a, &b)?;
            acc[0] += o.na_only_pct;
            acc[1] += o.ia_only_pct;
            acc[2] += o.shared_pct;
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidArgument("no instances in common between neuron dumps".into()));
        }
        for (s, v) in series.iter_mut().zip(acc) {
            s.points.push((n as f64, v / count as f64));
        }
    }
    Ok(series.to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table3Row {
    pub group: String,
    pub accuracy: f64,
    pub metrics: DiversityMetrics,
}

/// Slope of accuracy on each diversity metric across groups. A metric that
/// is constant or missing in some group yields `None`.
pub fn table3_coefficients(rows: &[Table3Row]) -> BTreeMap<&'static str, Option<f64>> {
    let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let col = |f: &dyn Fn(&DiversityMetrics) -> Option<f64>| -> Option<f64> {
        let x = rows.iter().map(|r| f(&r.metrics)).collect::<Option<Vec<f64>>>()?;
        regression_coefficient(&x, &acc).ok()
    };
    let mut out = BTreeMap::new();
    out.insert("cosine", col(&|m| m.mean_pairwise_cosine));
    out.insert("loss", col(&|m| Some(m.mean_loss)));
    out.insert("vocabulary", col(&|m| Some(m.vocabulary as f64)));
    out.insert("length", col(&|m| Some(m.mean_input_length)));
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Columns `group,accuracy,cosine,loss,vocabulary,length`, then a
/// `coefficient` row.
pub fn write_table3<W: Write>(out: W, rows: &[Table3Row]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group", "accuracy", "cosine", "loss", "vocabulary", "length"])?;
    for r in rows {
        w.write_record([
            r.group.clone(),
            r.accuracy.to_string(),
            opt(r.metrics.mean_pairwise_cosine),
            r.metrics.mean_loss.to_string(),
            r.metrics.vocabulary.to_string(),
            r.metrics.mean_input_length.to_string(),
        ])?;
    }
    let c = table3_coefficients(rows);
    w.write_record([
        "coefficient".to_string(),
        String::new(),
        opt(c["cosine"]),
        opt(c["loss"]),
        opt(c["vocabulary"]),
        opt(c["length"]),
    ])?;
    w.flush()?;
    Ok(())
}
