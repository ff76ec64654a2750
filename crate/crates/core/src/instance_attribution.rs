//! Influence-function and gradient-similarity scoring of training instances,
//! both restricted to the classification-head parameters.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gradients::{head_gradient_from, head_state, CholeskyFactor, HeadGradient, HessianMatrix};
use crate::model::Parameters;
use crate::neuron_attribution::TargetClass;
use crate::tensor::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScoreMethod {
    #[serde(rename = "IF")]
    If,
    #[serde(rename = "GS")]
    Gs,
    #[serde(rename = "NA_INSTANCES")]
    NaInstances,
}

impl ScoreMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMethod::If => "IF",
            ScoreMethod::Gs => "GS",
            ScoreMethod::NaInstances => "NA_INSTANCES",
        }
    }
}

impl std::fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scores of every training instance for one test instance. `ranking` is
/// most-influential first, ties broken by train id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScores {
    pub method: ScoreMethod,
    pub test_id: String,
    pub scores: BTreeMap<String, f64>,
    pub ranking: Vec<String>,
}

impl InstanceScores {
    pub fn new(method: ScoreMethod, test_id: impl Into<String>, scores: BTreeMap<String, f64>) -> Self {
        let ranking = rank_by_score(&scores);
        Self {
            method,
            test_id: test_id.into(),
            scores,
            ranking,
        }
    }

    pub fn top(&self, k: usize) -> &[String] {
        &self.ranking[..k.min(self.ranking.len())]
    }
}

pub fn rank_by_score(scores: &BTreeMap<String, f64>) -> Vec<String> {
    let mut ids: Vec<(&String, f64)> = scores.iter().map(|(k, v)| (k, *v)).collect();
    ids.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ids.into_iter().map(|(k, _)| k.clone()).collect()
}

/// Head gradients of every training instance under its gold label.
#[derive(Debug, Clone)]
pub struct TrainGradients {
    pub ids: Vec<String>,
    pub grads: Vec<HeadGradient>,
}

pub fn train_gradients(params: &Parameters, train_set: &Dataset) -> Result<TrainGradients> {
    let grads = train_set
        .instances
        .par_iter()
        .map(|i| {
            let s = head_state(params, &i.tokens())?;
            Ok(head_gradient_from(&s.probs, &s.last_hidden, i.label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainGradients {
        ids: train_set.ids(),
        grads,
    })
}

/// Head gradient of a test input. The label is the model's prediction by
/// default (the loss of the prediction being explained), or the gold label.
pub fn test_gradient(
    params: &Parameters,
    tokens: &[u32],
    gold: usize,
    label: TargetClass,
) -> Result<HeadGradient> {
    let s = head_state(params, tokens)?;
    let y = match label {
        TargetClass::Predicted => argmax(&s.probs),
        TargetClass::Gold => gold,
    };
    Ok(head_gradient_from(&s.probs, &s.last_hidden, y))
}

pub fn gs_scores_from(test_id: &str, test_grad: &HeadGradient, train: &TrainGradients) -> InstanceScores {
    let scores = train
        .ids
        .iter()
        .zip(&train.grads)
        .map(|(id, g)| (id.clone(), test_grad.dot(g)))
        .collect();
    InstanceScores::new(ScoreMethod::Gs, test_id, scores)
}

/// `g_testᵀ H⁻¹ g_train`, computed as `(H⁻¹ g_test) · g_train` (H symmetric).
/// Positive means upweighting the training instance lowers the test loss.
pub fn if_scores_from(
    test_id: &str,
    test_grad: &HeadGradient,
    train: &TrainGradients,
    hessian: &CholeskyFactor,
) -> Result<InstanceScores> {
    let preconditioned = HeadGradient(hessian.solve(test_grad.as_slice())?);
    let scores = train
        .ids
        .iter()
        .zip(&train.grads)
        .map(|(id, g)| (id.clone(), preconditioned.dot(g)))
        .collect();
    Ok(InstanceScores::new(ScoreMethod::If, test_id, scores))
}

pub fn gs_scores(
    params: &Parameters,
    test: &crate::data::Instance,
    train_set: &Dataset,
) -> Result<InstanceScores> {
    let g = test_gradient(params, &test.tokens(), test.label, TargetClass::Predicted)?;
    Ok(gs_scores_from(&test.id, &g, &train_gradients(params, train_set)?))
}

pub fn if_scores(
    params: &Parameters,
    test: &crate::data::Instance,
    train_set: &Dataset,
    hessian: &HessianMatrix,
) -> Result<InstanceScores> {
    let dim = params.config.head_param_len();
    if hessian.dim != dim {
        return Err(Error::ShapeMismatch {
            expected: dim,
            got: hessian.dim,
        });
    }
    let g = test_gradient(params, &test.tokens(), test.label, TargetClass::Predicted)?;
    if_scores_from(
        &test.id,
        &g,
        &train_gradients(params, train_set)?,
        &hessian.cholesky()?,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Most,
    Least,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Most => "most",
            Direction::Least => "least",
        }
    }
}

/// `⌈fraction · n⌉`, robust to representation error in `fraction`.
pub fn fraction_count(fraction: f64, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0,1]")));
    }
    let k = ((fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(k.min(n))
}

/// First (`Most`) or last (`Least`) `⌈fraction·N⌉` ids of a ranking.
pub fn select_from_ranking(ranking: &[String], fraction: f64, direction: Direction) -> Result<Vec<String>> {
    if ranking.is_empty() {
        return Err(Error::InvalidArgument("empty ranking".into()));
    }
    let k = fraction_count(fraction, ranking.len())?;
    Ok(match direction {
        Direction::Most => ranking[..k].to_vec(),
        Direction::Least => ranking[ranking.len() - k..].to_vec(),
    })
}

pub fn select_fraction(scores: &InstanceScores, fraction: f64, direction: Direction) -> Result<Vec<String>> {
    select_from_ranking(&scores.ranking, fraction, direction)
}

/// CSV with columns `test_id,train_id,method,score`, rows in ranking order.
pub fn write_scores_csv<W: Write>(out: W, all: &[InstanceScores]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["test_id", "train_id", "method", "score"])?;
    for s in all {
        for id in &s.ranking {
            w.write_record([
                s.test_id.as_str(),
                id.as_str(),
                s.method.as_str(),
                &format!("{:e}", s.scores[id]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_rankings_json(path: &Path, all: &[InstanceScores]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(all)? + "\n")?;
    Ok(())
}

pub fn read_rankings_json(path: &Path) -> Result<Vec<InstanceScores>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train_grads(vs: &[(&str, Vec<f64>)]) -> TrainGradients {
        TrainGradients {
            ids: vs.iter().map(|(i, _)| i.to_string()).collect(),
            grads: vs.iter().map(|(_, g)| HeadGradient(g.clone())).collect(),
        }
    }

    #[test]
    fn gradient_similarity_is_a_dot_product() {
        let train = train_grads(&[("a", vec![3.0, -1.0]), ("b", vec![1.0, 2.0])]);
        let s = gs_scores_from("t", &HeadGradient(vec![1.0, 2.0]), &train);
        assert_eq!(s.scores["a"], 1.0);
        assert_eq!(s.scores["b"], 5.0);
        assert_eq!(s.ranking, vec!["b", "a"]);
    }

    #[test]
    fn identity_hessian_reduces_to_gradient_similarity() {
        let train = train_grads(&[("a", vec![0.3, -1.1, 2.0]), ("b", vec![-0.7, 0.2, 0.9])]);
        let g = HeadGradient(vec![0.25, 0.5, -0.125]);
        let h = HessianMatrix::identity(3).cholesky().unwrap();
        let if_s = if_scores_from("t", &g, &train, &h).unwrap();
        let gs = gs_scores_from("t", &g, &train);
        assert_eq!(if_s.scores, gs.scores);
        assert_eq!(if_s.ranking, gs.ranking);
    }

    #[test]
    fn orthogonal_gradients_score_zero() {
        let train = train_grads(&[("a", vec![0.0, 1.0]), ("b", vec![0.0, -3.0])]);
        let h = HessianMatrix::from_dense(2, vec![2.0, 0.0, 0.0, 4.0], 0.1).cholesky().unwrap();
        let s = if_scores_from("t", &HeadGradient(vec![1.0, 0.0]), &train, &h).unwrap();
        assert!(s.scores.values().all(|&v| v == 0.0));
        // equal scores: ids ascending
        assert_eq!(s.ranking, vec!["a", "b"]);
    }

    #[test]
    fn fractions_select_head_and_tail() {
        let ranking: Vec<String> = (0..10).map(|i| format!("id{i}")).collect();
        assert_eq!(select_from_ranking(&ranking, 0.2, Direction::Most).unwrap(), vec!["id0", "id1"]);
        assert_eq!(select_from_ranking(&ranking, 0.2, Direction::Least).unwrap(), vec!["id8", "id9"]);
        let mut both = select_from_ranking(&ranking, 0.5, Direction::Most).unwrap();
        both.extend(select_from_ranking(&ranking, 0.5, Direction::Least).unwrap());
        assert_eq!(both, ranking);
        assert_eq!(fraction_count(0.33, 3).unwrap(), 1);
        assert_eq!(fraction_count(0.01, 3).unwrap(), 1);
        assert!(fraction_count(0.0, 3).is_err());
    }

    #[test]
    fn csv_dump_has_one_row_per_pair() {
        let train = train_grads(&[("a", vec![1.0]), ("b", vec![2.0])]);
        let s = gs_scores_from("t", &HeadGradient(vec![1.0]), &train);
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &[s]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "test_id,train_id,method,score\nt,b,GS,2e0\nt,a,GS,1e0\n");
    }
}
