//! Character-level translation with latent constituency trees.
//!
//! Encoder and decoder are stack-only recurrent neural network grammars:
//! each reads or writes text one character at a time while choosing NT /
//! GEN / REDUCE transitions from its stack summary alone. The decoder
//! builds each new nonterminal from attention over the encoder's phrase
//! embeddings. Tree structure is learned with REINFORCE against tree
//! rewards, next-character losses and a coverage penalty; the output
//! softmax is trained by exact gradients.

pub mod adam;
pub mod checkpoint;
pub mod data;
mod error;
pub mod inference;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod stack;
pub mod tape;
#[cfg(test)]
mod testutil;
pub mod training;
pub mod transducer;
pub mod viz;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{CharVocabulary, ParallelCorpus, Vocabularies};
pub use error::{Error, Result};
pub use inference::{bleu, remove_repeated_bigrams, translate_greedy, TranslationResult};
pub use model::{ModelConfig, ModelParameters, Side};
pub use objective::{BaselineState, RewardConfig};
pub use params::{GradientStore, ParamId, ParamSet};
pub use stack::{Action, Limits, Transition};
pub use tape::{NodeId, Tape};
pub use training::{fit, GradientMode, TrainConfig, Trainer};
pub use transducer::{AttentionMatrix, EncoderNodeTable, PassOptions, Policy, Trajectory, TreeNode};
pub use viz::{render_svg, AttentionDump, SentenceDump, SvgStyle};
