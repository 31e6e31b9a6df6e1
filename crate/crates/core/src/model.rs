//! The full parameter layout of the translator.
//!
//! Encoder and decoder have the same architecture and separate weights.
//! Array names are prefixed `enc.` / `dec.`; the constant encoder
//! nonterminal embedding is `enc.x_enc`. The decoder's output classes are
//! the target vocabulary plus one end-of-sentence class.

use crate::nn::{ActionMlp, Composer, LstmCell, OutputHead, INIT_SCALE};
use crate::params::{ParamId, ParamSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Default hidden size.
pub const DEFAULT_HIDDEN: usize = 384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Source vocabulary size, UNK included.
    pub source_vocab: usize,
    /// Target vocabulary size, UNK included (end-of-sentence excluded).
    pub target_vocab: usize,
}

impl ModelConfig {
    /// Id of the decoder's end-of-sentence class.
    pub fn end_token(&self) -> usize {
        self.target_vocab
    }

    pub fn decoder_classes(&self) -> usize {
        self.target_vocab + 1
    }
}

/// Which half of the model a pass runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Encoder,
    Decoder,
}

impl Side {
    pub fn prefix(self) -> &'static str {
        match self {
            Side::Encoder => "enc",
            Side::Decoder => "dec",
        }
    }
}

/// Parameters of one RNNG (encoder or decoder).
#[derive(Debug, Clone, Copy)]
pub struct SideParams {
    pub char_embeddings: ParamId,
    pub stack: LstmCell,
    pub composer: Composer,
    pub policy: ActionMlp,
    pub output: OutputHead,
}

impl SideParams {
    fn register(set: &mut ParamSet, side: Side, dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let p = side.prefix();
        let char_embeddings =
            set.add_uniform(&format!("{p}.char_embeddings"), vec![classes, dim], INIT_SCALE, rng);
        let stack = LstmCell::register(set, &format!("{p}.stack_lstm"), dim, dim, rng);
        let composer = Composer::register(set, &format!("{p}.composer"), dim, rng);
        let policy = ActionMlp::register(set, &format!("{p}.action_mlp"), dim, dim, rng);
        let output = OutputHead::register(set, &format!("{p}.output_softmax"), dim, classes, rng);
        Self {
            char_embeddings,
            stack,
            composer,
            policy,
            output,
        }
    }

    /// Ids of the output softmax perceptron.
    pub fn output_ids(&self) -> [ParamId; 2] {
        [self.output.w, self.output.b]
    }
}

#[derive(Debug, Clone)]
pub struct ModelParameters {
    config: ModelConfig,
    set: ParamSet,
    pub encoder: SideParams,
    pub decoder: SideParams,
    pub x_enc: ParamId,
}

impl ModelParameters {
    /// Uniform(-0.08, 0.08) weights and embeddings, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let d = config.hidden;
        let encoder = SideParams::register(&mut set, Side::Encoder, d, config.source_vocab, &mut rng);
        let x_enc = set.add_uniform("enc.x_enc", vec![d], INIT_SCALE, &mut rng);
        let decoder =
            SideParams::register(&mut set, Side::Decoder, d, config.decoder_classes(), &mut rng);
        Self {
            config,
            set,
            encoder,
            decoder,
            x_enc,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn side(&self, side: Side) -> &SideParams {
        match side {
            Side::Encoder => &self.encoder,
            Side::Decoder => &self.decoder,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.set
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    /// Ids of both output softmax perceptrons.
    pub fn output_softmax_ids(&self) -> Vec<ParamId> {
        let mut v = self.encoder.output_ids().to_vec();
        v.extend(self.decoder.output_ids());
        v
    }
}
