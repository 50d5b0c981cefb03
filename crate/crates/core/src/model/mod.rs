//! Model assembly: encoder, bottleneck, and gated decoder over one
//! parameter store and one vocabulary.

pub mod bottleneck;
pub mod decoder;
pub mod encoder;
pub mod layers;

pub use bottleneck::{CompressedKnowledge, KnowledgeBottleneck};
pub use decoder::{DecoderCache, DecoderOutput, GatedDecoder};
pub use encoder::{EncodeKnowledge, KnowledgeEncoder};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::SeedTree;
use crate::tensor::tape::Tape;
use crate::tensor::Scalar;
use crate::text::Vocabulary;

pub struct KgModel<S> {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<S>,
    pub encoder: KnowledgeEncoder,
    pub bottleneck: KnowledgeBottleneck,
    pub decoder: GatedDecoder,
    pub seeds: SeedTree,
}

impl<S: Scalar> KgModel<S> {
    /// Construct all parameters from the seed tree. The vocabulary fixes
    /// `vocab_size`; the ablation flags decide which adapter sites exist.
    pub fn build(mut cfg: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        cfg.ablation = cfg.ablation.normalized();
        cfg.vocab_size = vocab.len();
        cfg.validate()?;
        if vocab.marker_count() != cfg.m {
            return Err(Error::config(format!(
                "vocabulary carries {} markers, config wants m = {}",
                vocab.marker_count(),
                cfg.m
            )));
        }
        let seeds = SeedTree::new(seed);
        let mut store = ParamStore::new();
        let encoder = KnowledgeEncoder::build(&cfg.encoder, cfg.vocab_size, &mut store, &seeds);
        let bottleneck = KnowledgeBottleneck::build(&cfg, &mut store, &seeds);
        let decoder = GatedDecoder::build(
            &cfg.decoder,
            cfg.m,
            cfg.vocab_size,
            cfg.ablation.ka_attn_enabled(),
            cfg.ablation.ka_ffn_enabled(),
            &mut store,
            &seeds,
        );
        Ok(KgModel {
            cfg,
            vocab,
            store,
            encoder,
            bottleneck,
            decoder,
            seeds,
        })
    }

    /// Compress a knowledge string: encode, left-truncate to the encoder
    /// window, and run the bottleneck.
    pub fn compress_text(
        &self,
        tape: &mut Tape<S>,
        knowledge: &str,
    ) -> Result<CompressedKnowledge> {
        let mut ids = self.vocab.encode(knowledge);
        if ids.is_empty() {
            return Err(Error::contract("knowledge encodes to zero tokens"));
        }
        let window = self.encoder.config().max_positions;
        if ids.len() > window {
            ids.drain(0..ids.len() - window);
        }
        let mask = vec![true; ids.len()];
        self.bottleneck
            .compress(tape, &self.store, &self.encoder, &ids, &mask)
    }
}
