use std::path::Path;

use attrlab::data::{FieldSchema, GenConfig, NLI_LABELS};
use attrlab::faithfulness::ProtocolConfig;
use attrlab::model::{Activation, ModelConfig, TrainHparams};
use attrlab::retrain_harness::SweepConfig;
use attrlab::AttributionConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainHparams,
    pub attribution: AttributionConfig,
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub generator: GenConfig,
    pub label_names: Vec<String>,
    pub schema: FieldSchema,
    /// Defaults to the generator's premise + separator + hypothesis length.
    pub max_len: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            generator: GenConfig::default(),
            label_names: NLI_LABELS.iter().map(|s| s.to_string()).collect(),
            schema: FieldSchema::default(),
            max_len: None,
        }
    }
}

impl DataSection {
    pub fn max_len(&self) -> usize {
        self.max_len.unwrap_or_else(|| self.generator.max_len())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_mlp: 32,
            activation: Activation::Relu,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, vocab_size: usize, max_seq_len: usize, n_classes: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_mlp: self.d_mlp,
            max_seq_len,
            n_classes,
            activation: self.activation,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub sweep: SweepConfig,
    pub protocol: ProtocolConfig,
    pub faithfulness_seeds: Vec<u64>,
    /// List length for the unique-instance table.
    pub top_k: usize,
    pub artifact_ks: Vec<usize>,
    pub random_seeds: Vec<u64>,
    pub overlap_fractions: Vec<f64>,
    pub neuron_ns: Vec<usize>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            sweep: SweepConfig::default(),
            protocol: ProtocolConfig::default(),
            faithfulness_seeds: vec![0, 1, 2],
            top_k: 10,
            artifact_ks: vec![1, 10],
            random_seeds: vec![0, 1, 2, 3, 4],
            overlap_fractions: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            neuron_ns: (1..=10).collect(),
        }
    }
}

pub struct LoadedConfig {
    pub config: Config,
    /// Raw bytes of the file, hashed into provenance records.
    pub bytes: Vec<u8>,
}

pub fn load(path: Option<&Path>) -> Result<LoadedConfig, String> {
    match path {
        None => Ok(LoadedConfig {
            config: Config::default(),
            bytes: Vec::new(),
        }),
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            let config: Config =
                serde_json::from_slice(&bytes).map_err(|e| format!("invalid config {}: {e}", p.display()))?;
            Ok(LoadedConfig { config, bytes })
        }
    }
}
