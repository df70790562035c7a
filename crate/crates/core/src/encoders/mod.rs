pub mod checkpoint;
pub mod codec;
pub mod gradcheck;
pub mod graph;
pub mod pipeline;
pub mod sequence;
pub mod token;

use serde::{Deserialize, Serialize};

pub use checkpoint::{encoder_checkpoint, read_checkpoint, restore_checkpoint, write_checkpoint, Manifest, TensorSpec};
pub use codec::{fit_feature_codec, CodecOptions, FeatureCodec, FeatureScheme, DEFAULT_BINS, ID_FEATURE};
pub use gradcheck::grad_check;
pub use graph::{normalized_adjacency, Activation, GraphEncoder};
pub use pipeline::{compose_pipeline, EncodedTraj, EncoderPipeline, Paradigm};
pub use sequence::{time_slot, SeqArch, SequenceEncoder, SequenceShape};
pub use token::TokenEncoder;

/// Encoder hyperparameters shared by every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub graph_layers: usize,
    pub activation: Activation,
    pub seq_arch: SeqArch,
    pub seq_layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub time_slots: usize,
    pub codec: CodecOptions,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            graph_layers: 2,
            activation: Activation::Relu,
            seq_arch: SeqArch::Attention,
            seq_layers: 2,
            heads: 4,
            hidden: 256,
            max_len: 32,
            time_slots: 48,
            codec: CodecOptions::default(),
        }
    }
}
