//! Sufficiency and comprehensiveness tests with pluggable neuron selectors.
//!
//! Sufficiency keeps only the selected neurons active; comprehensiveness
//! zeroes them. Both report the percentage of test instances whose
//! prediction is unchanged.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Instance};
use crate::engine::AttributionEngine;
use crate::error::{Error, Result};
use crate::instance_attribution::ScoreMethod;
use crate::model::{forward, InterventionSpec, ModelConfig, NeuronId, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    Sufficiency,
    Comprehensiveness,
}

impl TestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TestKind::Sufficiency => "sufficiency",
            TestKind::Comprehensiveness => "comprehensiveness",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SelectorKind {
    #[serde(rename = "NA")]
    Na,
    #[serde(rename = "IF_Neuron")]
    IfNeuron,
    #[serde(rename = "GS_Neuron")]
    GsNeuron,
    Random,
}

impl SelectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectorKind::Na => "NA",
            SelectorKind::IfNeuron => "IF_Neuron",
            SelectorKind::GsNeuron => "GS_Neuron",
            SelectorKind::Random => "Random",
        }
    }
}

pub trait NeuronSelector: Sync {
    fn kind(&self) -> SelectorKind;

    /// Up to `r` neurons for `instance`. Only seeded selectors look at `seed`.
    fn select(&self, instance: &Instance, r: usize, seed: u64) -> Result<Vec<NeuronId>>;
}

/// Top-r neurons by integrated gradients.
pub struct NaSelector<'e, 'a> {
    pub engine: &'e AttributionEngine<'a>,
}

impl NeuronSelector for NaSelector<'_, '_> {
    fn kind(&self) -> SelectorKind {
        SelectorKind::Na
    }

    fn select(&self, instance: &Instance, r: usize, _seed: u64) -> Result<Vec<NeuronId>> {
        Ok(self.engine.neuron_ranking(instance)?.truncated(r).neurons())
    }
}

/// Deduplicated IA-Neurons under IF or GS.
pub struct IaNeuronSelector<'e, 'a> {
    pub engine: &'e AttributionEngine<'a>,
    pub method: ScoreMethod,
}

impl NeuronSelector for IaNeuronSelector<'_, '_> {
    fn kind(&self) -> SelectorKind {
        match self.method {
            ScoreMethod::If => SelectorKind::IfNeuron,
            _ => SelectorKind::GsNeuron,
        }
    }

    fn select(&self, instance: &Instance, r: usize, _seed: u64) -> Result<Vec<NeuronId>> {
        if r == 0 {
            return Ok(Vec::new());
        }
        Ok(self.engine.ia_neurons(self.method, instance, r)?.neurons())
    }
}

/// Uniform sample without replacement, fresh per instance, reproducible from
/// `(seed, instance id)`.
pub struct RandomSelector {
    pub n_layers: usize,
    pub d_mlp: usize,
}

impl RandomSelector {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            n_layers: config.n_layers,
            d_mlp: config.d_mlp,
        }
    }

    pub fn sample(&self, seed: u64, instance_id: &str, r: usize) -> Result<Vec<NeuronId>> {
        let total = self.n_layers * self.d_mlp;
        if r > total {
            return Err(Error::TooManyNeurons {
                requested: r,
                available: total,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(instance_id.as_bytes()));
        Ok(rand::seq::index::sample(&mut rng, total, r)
            .into_iter()
            .map(|i| NeuronId::new(i / self.d_mlp, i % self.d_mlp))
            .collect())
    }
}

impl NeuronSelector for RandomSelector {
    fn kind(&self) -> SelectorKind {
        SelectorKind::Random
    }

    fn select(&self, instance: &Instance, r: usize, seed: u64) -> Result<Vec<NeuronId>> {
        self.sample(seed, &instance.id, r)
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Selection function for a fixed `(seed, r)`, keyed by instance id.
pub fn random_selector(
    seed: u64,
    r: usize,
    config: &ModelConfig,
) -> Result<impl Fn(&str) -> Vec<NeuronId>> {
    let sel = RandomSelector::new(config);
    sel.sample(seed, "", r)?;
    Ok(move |id: &str| sel.sample(seed, id, r).expect("r checked at construction"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub original: usize,
    pub intervened: usize,
    pub n_selected: usize,
}

impl InstanceRecord {
    pub fn preserved(&self) -> bool {
        self.original == self.intervened
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub preserved_pct: f64,
    pub records: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub test_kind: TestKind,
    pub selector: SelectorKind,
    pub r: usize,
    pub r_requested: usize,
    pub clamped: bool,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedRun>,
    pub mean_preserved_pct: f64,
}

pub fn preserved_pct(records: &[InstanceRecord]) -> f64 {
    let kept = records.iter().filter(|r| r.preserved()).count();
    100.0 * kept as f64 / records.len() as f64
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn run_once(
    kind: TestKind,
    params: &Parameters,
    test_set: &Dataset,
    selector: &dyn NeuronSelector,
    r: usize,
    seed: u64,
) -> Result<SeedRun> {
    let records = test_set
        .instances
        .par_iter()
        .map(|inst| {
            let tokens = inst.tokens();
            let original = forward(params, &tokens, None)?.predicted;
            let chosen = selector.select(inst, r, seed)?;
            let spec = match kind {
                TestKind::Sufficiency => InterventionSpec::allow(chosen.iter().copied()),
                TestKind::Comprehensiveness => InterventionSpec::deny(chosen.iter().copied()),
            };
            let intervened = forward(params, &tokens, Some(&spec))?.predicted;
            Ok(InstanceRecord {
                id: inst.id.clone(),
                original,
                intervened,
                n_selected: chosen.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedRun {
        seed,
        preserved_pct: preserved_pct(&records),
        records,
    })
}

pub fn run_test(
    kind: TestKind,
    params: &Parameters,
    test_set: &Dataset,
    selector: &dyn NeuronSelector,
    r: usize,
    seeds: &[u64],
) -> Result<FaithfulnessReport> {
    let total = params.config.n_neurons();
    if r > total {
        return Err(Error::TooManyNeurons {
            requested: r,
            available: total,
        });
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let runs = seeds
        .iter()
        .map(|&s| run_once(kind, params, test_set, selector, r, s))
        .collect::<Result<Vec<_>>>()?;
    let mean_preserved_pct = mean(&runs.iter().map(|r| r.preserved_pct).collect::<Vec<_>>());
    Ok(FaithfulnessReport {
        test_kind: kind,
        selector: selector.kind(),
        r,
        r_requested: r,
        clamped: false,
        seeds: seeds.to_vec(),
        runs,
        mean_preserved_pct,
    })
}

pub fn sufficiency(
    params: &Parameters,
    test_set: &Dataset,
    selector: &dyn NeuronSelector,
    r: usize,
    seed: u64,
) -> Result<FaithfulnessReport> {
    run_test(TestKind::Sufficiency, params, test_set, selector, r, &[seed])
}

pub fn comprehensiveness(
    params: &Parameters,
    test_set: &Dataset,
    selector: &dyn NeuronSelector,
    r: usize,
    seed: u64,
) -> Result<FaithfulnessReport> {
    run_test(TestKind::Comprehensiveness, params, test_set, selector, r, &[seed])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub sufficiency_r: usize,
    pub comprehensiveness_r: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            sufficiency_r: 1,
            comprehensiveness_r: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolTable {
    pub reports: Vec<FaithfulnessReport>,
}

impl ProtocolTable {
    /// Columns `selector,test_kind,r,seed,preserved_pct`; one row per seed
    /// followed by a `mean` row per (selector, test kind).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["selector", "test_kind", "r", "seed", "preserved_pct"])?;
        for rep in &self.reports {
            for run in &rep.runs {
                w.write_record([
                    rep.selector.as_str(),
                    rep.test_kind.as_str(),
                    &rep.r.to_string(),
                    &run.seed.to_string(),
                    &run.preserved_pct.to_string(),
                ])?;
            }
            w.write_record([
                rep.selector.as_str(),
                rep.test_kind.as_str(),
                &rep.r.to_string(),
                "mean",
                &rep.mean_preserved_pct.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs sufficiency and comprehensiveness for every selector across seeds.
/// A requested `r` at or above the neuron count is clamped to `total − 1`.
pub fn run_protocol(
    params: &Parameters,
    test_set: &Dataset,
    selectors: &[&dyn NeuronSelector],
    seeds: &[u64],
    config: &ProtocolConfig,
) -> Result<ProtocolTable> {
    let total = params.config.n_neurons();
    let mut reports = Vec::new();
    for kind in [TestKind::Sufficiency, TestKind::Comprehensiveness] {
        let requested = match kind {
            TestKind::Sufficiency => config.sufficiency_r,
            TestKind::Comprehensiveness => config.comprehensiveness_r,
        };
        let r = if requested >= total { total - 1 } else { requested };
        for sel in selectors {
            let mut rep = run_test(kind, params, test_set, *sel, r, seeds)?;
            rep.r_requested = requested;
            rep.clamped = r != requested;
            reports.push(rep);
        }
    }
    Ok(ProtocolTable { reports })
}
