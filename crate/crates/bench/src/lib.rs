//! Fixtures shared by the benchmarks.

use attrlab::data::{gen_synthetic_nli, GenConfig, SyntheticNli};
use attrlab::model::{init_model, Activation, ModelConfig, Parameters};

pub struct Fixture {
    pub data: SyntheticNli,
    pub params: Parameters,
}

/// Synthetic NLI splits and an untrained toy-sized model.
pub fn fixture(n_train: usize) -> Fixture {
    let gen = GenConfig {
        n_train,
        n_test: 20,
        n_counterexamples: 20,
        ..Default::default()
    };
    let data = gen_synthetic_nli(&gen, 0).expect("generator config is valid");
    let config = ModelConfig {
        vocab_size: data.vocab.len(),
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_mlp: 32,
        max_seq_len: gen.max_len(),
        n_classes: 2,
        activation: Activation::Relu,
        seed: 0,
    };
    let params = init_model(&config).expect("model config is valid");
    Fixture { data, params }
}
