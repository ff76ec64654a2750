//! Instance attribution (influence functions, gradient similarity) and
//! neuron attribution (integrated gradients) on a small transformer
//! classifier, together with the methods that align them, faithfulness
//! tests, retraining sweeps and analysis utilities.

pub mod alignment;
pub mod analysis;
pub mod data;
pub mod engine;
pub mod error;
pub mod faithfulness;
pub mod gradients;
pub mod instance_attribution;
pub mod model;
pub mod neuron_attribution;
pub mod retrain_harness;
pub mod tensor;

pub use error::{Error, Result};
pub use data::{Dataset, Instance, Vocab};
pub use engine::{AttributionConfig, AttributionEngine};
pub use instance_attribution::{Direction, InstanceScores, ScoreMethod};
pub use model::{ModelConfig, NeuronId, Parameters};
pub use neuron_attribution::{RankedNeurons, TargetClass};
