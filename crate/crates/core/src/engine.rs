//! Shared attribution context: one trained model plus its training set, with
//! the expensive per-training-instance quantities (head gradients, Hessian
//! factor, neuron rankings) computed once and reused.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{ia_neurons_from, na_instances_from, DcnsScores, IaNeurons, DEFAULT_ALIGN_R};
use crate::data::{Dataset, Instance};
use crate::error::{Error, Result};
use crate::gradients::{head_hessian, CholeskyFactor, DEFAULT_DAMPING};
use crate::instance_attribution::{
    gs_scores_from, if_scores_from, test_gradient, train_gradients, InstanceScores, ScoreMethod,
    TrainGradients,
};
use crate::model::{NeuronId, Parameters};
use crate::neuron_attribution::{attribute_tokens_with, IgRule, RankedNeurons, TargetClass, DEFAULT_IG_STEPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    /// List length used by NA-Instances and IA-Neurons.
    pub r: usize,
    pub ig_steps: usize,
    pub ig_rule: IgRule,
    /// Class whose probability integrated gradients explains.
    pub target: TargetClass,
    /// Label used for the test-side loss gradient in IF/GS.
    pub test_label: TargetClass,
    pub damping: f64,
    pub dcns_scores: DcnsScores,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            r: DEFAULT_ALIGN_R,
            ig_steps: DEFAULT_IG_STEPS,
            ig_rule: IgRule::Midpoint,
            target: TargetClass::Predicted,
            test_label: TargetClass::Predicted,
            damping: DEFAULT_DAMPING,
            dcns_scores: DcnsScores::Normalized,
        }
    }
}

type RankingKey = (String, Vec<u32>);

pub struct AttributionEngine<'a> {
    params: &'a Parameters,
    train: &'a Dataset,
    config: AttributionConfig,
    train_grads: OnceLock<TrainGradients>,
    hessian: OnceLock<CholeskyFactor>,
    train_neurons: OnceLock<Vec<(String, RankedNeurons)>>,
    rankings: Mutex<HashMap<RankingKey, Arc<RankedNeurons>>>,
}

fn get_or_try<T, F: FnOnce() -> Result<T>>(cell: &OnceLock<T>, f: F) -> Result<&T> {
    if let Some(v) = cell.get() {
        return Ok(v);
    }
    let v = f()?;
    let _ = cell.set(v);
    Ok(cell.get().expect("just set"))
}

impl<'a> AttributionEngine<'a> {
    pub fn new(params: &'a Parameters, train: &'a Dataset, config: AttributionConfig) -> Self {
        Self {
            params,
            train,
            config,
            train_grads: OnceLock::new(),
            hessian: OnceLock::new(),
            train_neurons: OnceLock::new(),
            rankings: Mutex::new(HashMap::new()),
        }
    }

    pub fn params(&self) -> &Parameters {
        self.params
    }

    pub fn train_set(&self) -> &Dataset {
        self.train
    }

    pub fn config(&self) -> &AttributionConfig {
        &self.config
    }

    pub fn train_gradients(&self) -> Result<&TrainGradients> {
        get_or_try(&self.train_grads, || train_gradients(self.params, self.train))
    }

    pub fn hessian_factor(&self) -> Result<&CholeskyFactor> {
        get_or_try(&self.hessian, || {
            head_hessian(self.params, self.train, self.config.damping)?.cholesky()
        })
    }

    /// Full neuron ranking of any instance (cached by id and tokens).
    pub fn neuron_ranking(&self, instance: &Instance) -> Result<Arc<RankedNeurons>> {
        let key = (instance.id.clone(), instance.tokens());
        if let Some(r) = self.rankings.lock().expect("cache lock").get(&key) {
            return Ok(r.clone());
        }
        let c = &self.config;
        let scores = attribute_tokens_with(self.params, &instance.tokens(), instance.label, c.ig_steps, c.target, c.ig_rule)?;
        let ranked = Arc::new(RankedNeurons::from_entries(scores.iter().collect()));
        self.rankings
            .lock()
            .expect("cache lock")
            .insert(key, ranked.clone());
        Ok(ranked)
    }

    pub fn train_neurons(&self) -> Result<&[(String, RankedNeurons)]> {
        get_or_try(&self.train_neurons, || {
            self.train
                .instances
                .par_iter()
                .map(|i| Ok((i.id.clone(), (*self.neuron_ranking(i)?).clone())))
                .collect()
        })
        .map(Vec::as_slice)
    }

    pub fn train_top1(&self) -> Result<HashMap<String, NeuronId>> {
        Ok(self
            .train_neurons()?
            .iter()
            .filter_map(|(id, r)| r.top1().map(|n| (id.clone(), n)))
            .collect())
    }

    pub fn instance_scores(&self, method: ScoreMethod, test: &Instance) -> Result<InstanceScores> {
        match method {
            ScoreMethod::Gs | ScoreMethod::If => {
                let g = test_gradient(self.params, &test.tokens(), test.label, self.config.test_label)?;
                let train = self.train_gradients()?;
                if method == ScoreMethod::Gs {
                    Ok(gs_scores_from(&test.id, &g, train))
                } else {
                    if_scores_from(&test.id, &g, train, self.hessian_factor()?)
                }
            }
            ScoreMethod::NaInstances => {
                let test_rank = self.neuron_ranking(test)?;
                Ok(na_instances_from(
                    &test.id,
                    &test_rank,
                    self.train_neurons()?,
                    self.config.r,
                    self.config.dcns_scores,
                ))
            }
        }
    }

    /// Scores for every instance of `set`, in dataset order.
    pub fn scores_for_set(&self, method: ScoreMethod, set: &Dataset) -> Result<Vec<InstanceScores>> {
        // Warm the shared caches once before fanning out.
        match method {
            ScoreMethod::If => {
                self.train_gradients()?;
                self.hessian_factor()?;
            }
            ScoreMethod::Gs => {
                self.train_gradients()?;
            }
            ScoreMethod::NaInstances => {
                self.train_neurons()?;
            }
        }
        set.instances
            .par_iter()
            .map(|i| self.instance_scores(method, i))
            .collect()
    }

    pub fn ia_neurons(&self, method: ScoreMethod, test: &Instance, r: usize) -> Result<IaNeurons> {
        if method == ScoreMethod::NaInstances {
            return Err(Error::InvalidArgument(
                "IA-Neurons needs an instance attribution method (IF or GS)".into(),
            ));
        }
        let scores = self.instance_scores(method, test)?;
        ia_neurons_from(&scores, &self.train_top1()?, r)
    }
}
