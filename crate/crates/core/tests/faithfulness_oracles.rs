mod common;

use std::collections::BTreeMap;

use attrlab::data::Dataset;
use attrlab::engine::{AttributionConfig, AttributionEngine};
use attrlab::faithfulness::{
    comprehensiveness, run_protocol, sufficiency, IaNeuronSelector, NaSelector, NeuronSelector, ProtocolConfig,
    RandomSelector, TestKind,
};
use attrlab::instance_attribution::ScoreMethod;
use attrlab::model::{forward, load_checkpoint, save_checkpoint, Activation, InterventionSpec, NeuronId, Parameters};
use attrlab::neuron_attribution::{attribute_neurons, RankedNeurons, TargetClass};
use common::*;

fn check_identities(params: &Parameters, train: &Dataset, test: &Dataset) {
    let total = params.config.n_neurons();
    let engine = AttributionEngine::new(params, train, AttributionConfig::default());
    let na = NaSelector { engine: &engine };
    let random = RandomSelector::new(&params.config);
    let gs = IaNeuronSelector { engine: &engine, method: ScoreMethod::Gs };
    for sel in [&na as &dyn NeuronSelector, &random] {
        assert_eq!(sufficiency(params, test, sel, total, 0).unwrap().mean_preserved_pct, 100.0);
    }
    for sel in [&na as &dyn NeuronSelector, &random, &gs] {
        assert_eq!(comprehensiveness(params, test, sel, 0, 0).unwrap().mean_preserved_pct, 100.0);
    }
}

#[test]
fn keeping_everything_or_removing_nothing_preserves_all() {
    for draw in 0..3u64 {
        let params = random_model(30 + draw, Activation::Relu);
        let mut r = rng(40 + draw);
        let train = random_dataset(&mut r, "train", 10, &params.config);
        let test = random_dataset(&mut r, "test", 15, &params.config);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&params, &serde_json::Value::Null, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap().params;
        check_identities(&loaded, &train, &test);
    }
    let toy = trained_toy(&small_gen(80, 20), 3, 5);
    check_identities(&toy.params, &toy.data.train, &toy.data.test);
}

#[test]
fn percentages_match_manual_interventions() {
    let params = random_model(50, Activation::Gelu);
    let mut r = rng(51);
    let train = random_dataset(&mut r, "train", 6, &params.config);
    let test = random_dataset(&mut r, "test", 25, &params.config);
    let engine = AttributionEngine::new(&params, &train, AttributionConfig::default());
    let na = NaSelector { engine: &engine };
    for k in [1usize, 3, 5] {
        let mut kept_suff = 0;
        let mut kept_comp = 0;
        for inst in test.iter() {
            let s = attribute_neurons(&params, inst, 20, TargetClass::Predicted).unwrap();
            let top: Vec<NeuronId> = RankedNeurons::from_entries(s.iter().collect()).neurons()[..k].to_vec();
            let tokens = inst.tokens();
            let orig = forward(&params, &tokens, None).unwrap().predicted;
            // Allowlist by hand: deny the complement.
            let mut others = Vec::new();
            for l in 0..params.config.n_layers {
                for u in 0..params.config.d_mlp {
                    let n = NeuronId::new(l, u);
                    if !top.contains(&n) {
                        others.push(n);
                    }
                }
            }
            let allow = InterventionSpec::deny(others);
            if forward(&params, &tokens, Some(&allow)).unwrap().predicted == orig {
                kept_suff += 1;
            }
            if forward(&params, &tokens, Some(&InterventionSpec::deny(top.iter().copied()))).unwrap().predicted == orig {
                kept_comp += 1;
            }
        }
        let suff = sufficiency(&params, &test, &na, k, 0).unwrap();
        let comp = comprehensiveness(&params, &test, &na, k, 0).unwrap();
        assert_eq!(suff.mean_preserved_pct, 100.0 * kept_suff as f64 / 25.0);
        assert_eq!(comp.mean_preserved_pct, 100.0 * kept_comp as f64 / 25.0);
    }
}

#[test]
fn protocol_table_recomputes_from_records() {
    let params = random_model(60, Activation::Relu);
    let mut r = rng(61);
    let train = random_dataset(&mut r, "train", 8, &params.config);
    let test = random_dataset(&mut r, "test", 12, &params.config);
    let engine = AttributionEngine::new(&params, &train, AttributionConfig::default());
    let na = NaSelector { engine: &engine };
    let ifn = IaNeuronSelector { engine: &engine, method: ScoreMethod::If };
    let gsn = IaNeuronSelector { engine: &engine, method: ScoreMethod::Gs };
    let random = RandomSelector::new(&params.config);
    let selectors: [&dyn NeuronSelector; 4] = [&na, &ifn, &gsn, &random];
    let seeds = [0u64, 1, 2];
    let table = run_protocol(&params, &test, &selectors, &seeds, &ProtocolConfig::default()).unwrap();
    assert_eq!(table.reports.len(), 8);

    let total = params.config.n_neurons();
    let mut csv_bytes = Vec::new();
    table.write_csv(&mut csv_bytes).unwrap();
    let mut rdr = csv::Reader::from_reader(csv_bytes.as_slice());
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["selector", "test_kind", "r", "seed", "preserved_pct"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 8 * 4);

    let mut by_key: BTreeMap<(String, String, String), f64> = BTreeMap::new();
    for row in &rows {
        by_key.insert((row[0].to_string(), row[1].to_string(), row[3].to_string()), row[4].parse().unwrap());
    }
    for rep in &table.reports {
        let expected_r = match rep.test_kind {
            TestKind::Sufficiency => 1,
            TestKind::Comprehensiveness => total - 1,
        };
        assert_eq!(rep.r, expected_r);
        assert_eq!(rep.clamped, rep.test_kind == TestKind::Comprehensiveness);
        let mut per_seed = Vec::new();
        for run in &rep.runs {
            assert_eq!(run.records.len(), test.len());
            let kept = run.records.iter().filter(|x| x.original == x.intervened).count();
            let pct = 100.0 * kept as f64 / test.len() as f64;
            let key = (rep.selector.as_str().to_string(), rep.test_kind.as_str().to_string(), run.seed.to_string());
            assert_eq!(by_key[&key], pct);
            per_seed.push(pct);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        let key = (rep.selector.as_str().to_string(), rep.test_kind.as_str().to_string(), "mean".to_string());
        assert_eq!(by_key[&key], mean);
    }
}

#[test]
fn oversized_r_is_rejected_outside_the_protocol() {
    let params = random_model(70, Activation::Relu);
    let mut r = rng(71);
    let test = random_dataset(&mut r, "test", 3, &params.config);
    let random = RandomSelector::new(&params.config);
    let total = params.config.n_neurons();
    assert!(sufficiency(&params, &test, &random, total + 1, 0).is_err());
}
