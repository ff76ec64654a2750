#![allow(dead_code)]

use attrlab::data::{gen_synthetic_nli, Dataset, GenConfig, Instance, SyntheticNli};
use attrlab::model::{init_model, train, Activation, ModelConfig, Parameters, TrainHparams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_config(seed: u64, activation: Activation) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_mlp: 6,
        max_seq_len: 7,
        n_classes: 3,
        activation,
        seed,
    }
}

/// Freshly initialized model with every tensor (gains and biases included)
/// jittered so no parameter sits at a special value.
pub fn random_model(seed: u64, activation: Activation) -> Parameters {
    let mut p = init_model(&small_config(seed, activation)).unwrap();
    let mut r = rng(seed ^ 0x9e37_79b9);
    let noise = Normal::new(0.0, 0.3).unwrap();
    for t in p.tensors_mut() {
        for v in &mut t.data {
            *v += noise.sample(&mut r);
        }
    }
    p
}

pub fn random_tokens(r: &mut ChaCha8Rng, cfg: &ModelConfig) -> Vec<u32> {
    let len = r.gen_range(2..=cfg.max_seq_len);
    (0..len).map(|_| r.gen_range(3..cfg.vocab_size as u32)).collect()
}

pub fn instance(id: &str, tokens: Vec<u32>, label: usize) -> Instance {
    Instance {
        id: id.to_string(),
        premise: tokens,
        hypothesis: None,
        raw_premise: String::new(),
        raw_hypothesis: None,
        label,
    }
}

pub fn random_dataset(r: &mut ChaCha8Rng, prefix: &str, n: usize, cfg: &ModelConfig) -> Dataset {
    let instances = (0..n)
        .map(|i| {
            let label = r.gen_range(0..cfg.n_classes);
            instance(&format!("{prefix}-{i:03}"), random_tokens(r, cfg), label)
        })
        .collect();
    let labels = (0..cfg.n_classes).map(|c| format!("c{c}")).collect();
    Dataset::new(instances, prefix, labels).unwrap()
}

pub fn toy_model_config(vocab_size: usize, max_seq_len: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_mlp: 32,
        max_seq_len,
        n_classes: 2,
        activation: Activation::Relu,
        seed,
    }
}

pub struct Toy {
    pub data: SyntheticNli,
    pub config: ModelConfig,
    pub hp: TrainHparams,
    pub params: Parameters,
}

/// Synthetic NLI data plus a model trained on it.
pub fn trained_toy(gen: &GenConfig, seed: u64, epochs: usize) -> Toy {
    let data = gen_synthetic_nli(gen, seed).unwrap();
    let config = toy_model_config(data.vocab.len(), gen.max_len(), seed);
    let hp = TrainHparams {
        epochs,
        seed,
        ..Default::default()
    };
    let params = train(&init_model(&config).unwrap(), &data.train, &hp).unwrap().params;
    Toy {
        data,
        config,
        hp,
        params,
    }
}

pub fn small_gen(n_train: usize, n_test: usize) -> GenConfig {
    GenConfig {
        n_train,
        n_test,
        n_counterexamples: n_test,
        ..Default::default()
    }
}

/// `‖a − b‖∞ / ‖b‖∞`.
pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    num / den.max(f64::MIN_POSITIVE)
}
