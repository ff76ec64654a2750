//! Decoder-only transformer classifier with per-neuron activation capture
//! and declarative MLP interventions.
//!
//! Pre-norm residual blocks with learned positional embeddings and causal
//! multi-head attention. The classification head reads the final token's
//! normalized hidden state.

mod checkpoint;
mod forward;
mod params;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    FORMAT_VERSION,
};
pub use forward::{
    cross_entropy, forward, forward_patched, loss, loss_gradient, ForwardTrace, InterventionMode,
    InterventionSpec, LossGradient, NeuronAction, NeuronId,
};
pub(crate) use forward::{backward, forward_tape};
pub use params::{init_model, Activation, LayerParams, ModelConfig, Parameters};
pub use train::{accuracy, predictions, train, EpochStats, TrainHparams, TrainOutcome};
