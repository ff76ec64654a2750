//! Retraining on influential training subsets and the accuracy sweep over
//! subset fractions.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::instance_attribution::{rank_by_score, select_from_ranking, Direction, InstanceScores, ScoreMethod};
use crate::model::{init_model, predictions, train, ModelConfig, Parameters, TrainHparams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SweepMethod {
    #[serde(rename = "IF")]
    If,
    #[serde(rename = "GS")]
    Gs,
    #[serde(rename = "NA_INSTANCES")]
    NaInstances,
    Random,
}

impl SweepMethod {
    pub const ALL: [SweepMethod; 4] = [Self::If, Self::Gs, Self::NaInstances, Self::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepMethod::If => "IF",
            SweepMethod::Gs => "GS",
            SweepMethod::NaInstances => "NA_INSTANCES",
            SweepMethod::Random => "Random",
        }
    }

    pub fn score_method(self) -> Option<ScoreMethod> {
        match self {
            SweepMethod::If => Some(ScoreMethod::If),
            SweepMethod::Gs => Some(ScoreMethod::Gs),
            SweepMethod::NaInstances => Some(ScoreMethod::NaInstances),
            SweepMethod::Random => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Sum,
    Max,
}

/// Everything a retraining run needs besides the subset itself.
pub struct RetrainContext<'a> {
    pub base_config: ModelConfig,
    pub full_train: &'a Dataset,
    pub test_set: &'a Dataset,
    pub hp: TrainHparams,
    /// Predictions of the model trained on the full training set.
    pub reference_predictions: Vec<usize>,
    /// Start every run from these weights instead of a fresh initialization.
    pub init: Option<Parameters>,
}

impl<'a> RetrainContext<'a> {
    pub fn new(
        base_config: ModelConfig,
        full_train: &'a Dataset,
        test_set: &'a Dataset,
        hp: TrainHparams,
        reference: &Parameters,
    ) -> Result<Self> {
        Ok(Self {
            base_config,
            full_train,
            test_set,
            hp,
            reference_predictions: predictions(reference, test_set)?,
            init: None,
        })
    }

    pub fn with_init(mut self, init: Parameters) -> Self {
        self.init = Some(init);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrainResult {
    pub accuracy: f64,
    pub preserved_pct: f64,
}

/// Trains on `subset` (kept in training-set order) with training seed `seed`
/// and scores the result on the test set.
pub fn retrain_eval(ctx: &RetrainContext<'_>, subset: &[String], seed: u64) -> Result<RetrainResult> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("retraining subset is empty".into()));
    }
    let data = ctx.full_train.subset(subset)?;
    let start = match &ctx.init {
        Some(p) => p.clone(),
        None => init_model(&ctx.base_config)?,
    };
    let hp = TrainHparams { seed, ..ctx.hp.clone() };
    let trained = train(&start, &data, &hp)?.params;
    let preds = predictions(&trained, ctx.test_set)?;
    let n = ctx.test_set.len() as f64;
    let correct = preds
        .iter()
        .zip(ctx.test_set.iter())
        .filter(|(p, i)| **p == i.label)
        .count();
    let kept = preds
        .iter()
        .zip(&ctx.reference_predictions)
        .filter(|(a, b)| a == b)
        .count();
    Ok(RetrainResult {
        accuracy: correct as f64 / n,
        preserved_pct: 100.0 * kept as f64 / n,
    })
}

/// Pools per-test-instance scores into one ranking of every training id.
/// Ids never scored get 0 (sum) or −∞ (max).
pub fn global_ranking(scores: &[InstanceScores], train_ids: &[String], aggregation: Aggregation) -> Vec<String> {
    let init = match aggregation {
        Aggregation::Sum => 0.0,
        Aggregation::Max => f64::NEG_INFINITY,
    };
    let mut pooled: BTreeMap<String, f64> = train_ids.iter().map(|id| (id.clone(), init)).collect();
    for s in scores {
        for (id, &v) in &s.scores {
            if let Some(acc) = pooled.get_mut(id) {
                *acc = match aggregation {
                    Aggregation::Sum => *acc + v,
                    Aggregation::Max => acc.max(v),
                };
            }
        }
    }
    rank_by_score(&pooled)
}

/// A seeded permutation of the training ids.
pub fn random_ranking(train_ids: &[String], seed: u64) -> Vec<String> {
    let mut ids = train_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetManifest {
    pub method: SweepMethod,
    pub direction: Direction,
    pub fraction: f64,
    pub seed: u64,
    pub ids: Vec<String>,
}

impl SubsetManifest {
    pub fn file_name(&self) -> String {
        format!(
            "{}_{}_{}_{}.json",
            self.method.as_str(),
            self.direction.as_str(),
            self.fraction,
            self.seed
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub directions: Vec<Direction>,
    pub aggregation: Aggregation,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.1, 0.2, 0.33, 0.5],
            seeds: vec![0, 1, 2],
            directions: vec![Direction::Most, Direction::Least],
            aggregation: Aggregation::Sum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub method: SweepMethod,
    pub direction: Direction,
    pub fraction: f64,
    pub seed: u64,
    pub n_train: usize,
    pub accuracy: f64,
    pub preserved_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub manifests: Vec<SubsetManifest>,
}

/// Runs `retrain_eval` for every (method, direction, fraction, seed).
/// `scores` must hold per-test-instance scores for each non-random method.
pub fn sweep(
    ctx: &RetrainContext<'_>,
    methods: &[SweepMethod],
    scores: &HashMap<ScoreMethod, Vec<InstanceScores>>,
    config: &SweepConfig,
) -> Result<SweepResult> {
    for &f in &config.fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidArgument(format!("fraction {f} outside (0,1]")));
        }
    }
    let train_ids = ctx.full_train.ids();
    let mut manifests = Vec::new();
    for &method in methods {
        let fixed = match method.score_method() {
            Some(sm) => {
                let s = scores.get(&sm).ok_or_else(|| {
                    Error::InvalidArgument(format!("no scores supplied for {}", method.as_str()))
                })?;
                Some(global_ranking(s, &train_ids, config.aggregation))
            }
            None => None,
        };
        for &direction in &config.directions {
            for &fraction in &config.fractions {
                for &seed in &config.seeds {
                    let ranking = match &fixed {
                        Some(r) => r.clone(),
                        None => random_ranking(&train_ids, seed),
                    };
                    manifests.push(SubsetManifest {
                        method,
                        direction,
                        fraction,
                        seed,
                        ids: select_from_ranking(&ranking, fraction, direction)?,
                    });
                }
            }
        }
    }
    let points = manifests
        .par_iter()
        .map(|m| run_manifest(ctx, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { points, manifests })
}

pub fn run_manifest(ctx: &RetrainContext<'_>, m: &SubsetManifest) -> Result<SweepPoint> {
    let r = retrain_eval(ctx, &m.ids, m.seed)?;
    Ok(SweepPoint {
        method: m.method,
        direction: m.direction,
        fraction: m.fraction,
        seed: m.seed,
        n_train: m.ids.len(),
        accuracy: r.accuracy,
        preserved_pct: r.preserved_pct,
    })
}

impl SweepResult {
    /// Columns `method,direction,fraction,seed,accuracy,preserved_pct`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "direction", "fraction", "seed", "accuracy", "preserved_pct"])?;
        for p in &self.points {
            w.write_record([
                p.method.as_str(),
                p.direction.as_str(),
                &p.fraction.to_string(),
                &p.seed.to_string(),
                &p.accuracy.to_string(),
                &p.preserved_pct.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One series per (method, direction): seed-averaged accuracy per fraction.
    pub fn curves(&self) -> Vec<Series> {
        let mut groups: BTreeMap<(SweepMethod, Direction), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
        for p in &self.points {
            groups
                .entry((p.method, p.direction))
                .or_default()
                .entry(p.fraction.to_bits())
                .or_default()
                .push(p.accuracy);
        }
        groups
            .into_iter()
            .map(|((m, d), by_x)| {
                let mut points: Vec<(f64, f64)> = by_x
                    .into_iter()
                    .map(|(x, ys)| (f64::from_bits(x), ys.iter().sum::<f64>() / ys.len() as f64))
                    .collect();
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series {
                    label: format!("{}-{}", m.as_str(), d.as_str()),
                    points,
                }
            })
            .collect()
    }

    pub fn write_manifests(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for m in &self.manifests {
            m.write(&dir.join(m.file_name()))?;
        }
        Ok(())
    }
}

/// Plot-ready line: a label and its (x, y) points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}
