//! Bidirectional knowledge encoder: token + position embeddings into
//! pre-norm self-attention blocks with a GELU feed-forward. Produces the
//! feature sequence the bottleneck cross-attends into. Frozen in both
//! training phases; pluggable behind `EncodeKnowledge`.

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::layers::{init_normal, multi_head_attention, project_kv, Ffn, MhaWeights, Norm};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::SeedTree;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Scalar;

/// Narrow interface for alternate encoders: (ids, mask) → features.
pub trait EncodeKnowledge<S: Scalar> {
    /// Width of the produced features.
    fn feature_width(&self) -> usize;

    fn encode(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        ids: &[u32],
        mask: &[bool],
    ) -> Result<NodeId>;
}

#[derive(Debug)]
struct EncoderLayer {
    norm1: Norm,
    attn: MhaWeights,
    norm2: Norm,
    ffn: Ffn,
}

#[derive(Debug)]
pub struct KnowledgeEncoder {
    cfg: EncoderConfig,
    vocab_size: usize,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<EncoderLayer>,
    final_norm: Norm,
}

impl KnowledgeEncoder {
    pub fn build<S: Scalar>(
        cfg: &EncoderConfig,
        vocab_size: usize,
        store: &mut ParamStore<S>,
        seeds: &SeedTree,
    ) -> Self {
        let g = ParamGroup::Encoder;
        let d = cfg.width;
        let tok_emb = init_normal(store, seeds, "encoder.tok_emb", g, vocab_size, d, 0.02);
        let pos_emb = init_normal(store, seeds, "encoder.pos_emb", g, cfg.max_positions, d, 0.02);
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("encoder.layer{i}");
                EncoderLayer {
                    norm1: Norm::build(store, &format!("{p}.norm1"), g, d),
                    attn: MhaWeights::build(store, seeds, &format!("{p}.attn"), g, d),
                    norm2: Norm::build(store, &format!("{p}.norm2"), g, d),
                    ffn: Ffn::build(store, seeds, &format!("{p}.ffn"), g, d, cfg.ffn_mult),
                }
            })
            .collect();
        let final_norm = Norm::build(store, "encoder.final_norm", g, d);
        KnowledgeEncoder {
            cfg: cfg.clone(),
            vocab_size,
            tok_emb,
            pos_emb,
            layers,
            final_norm,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }
}

impl<S: Scalar> EncodeKnowledge<S> for KnowledgeEncoder {
    fn feature_width(&self) -> usize {
        self.cfg.width
    }

    /// Last-layer hidden states, one row per input position. Masked
    /// positions are excluded as attention keys so they cannot influence
    /// unmasked rows.
    fn encode(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        ids: &[u32],
        mask: &[bool],
    ) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::contract("encoder input is empty"));
        }
        if ids.len() != mask.len() {
            return Err(Error::contract(format!(
                "encoder mask length {} differs from input length {}",
                mask.len(),
                ids.len()
            )));
        }
        if ids.len() > self.cfg.max_positions {
            return Err(Error::Length(format!(
                "encoder input of {} tokens exceeds {} positions",
                ids.len(),
                self.cfg.max_positions
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }

        let tok = tape.leaf(store, self.tok_emb);
        let pos = tape.leaf(store, self.pos_emb);
        let id_rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let pos_rows: Vec<usize> = (0..ids.len()).collect();
        let tok_rows = tape.gather_rows(tok, &id_rows)?;
        let pos_rows = tape.gather_rows(pos, &pos_rows)?;
        let mut x = tape.add(tok_rows, pos_rows)?;

        for layer in &self.layers {
            let a_in = layer.norm1.apply(tape, store, x)?;
            let (keys, values) = project_kv(tape, store, &layer.attn, a_in)?;
            let attn = multi_head_attention(
                tape,
                store,
                &layer.attn,
                self.cfg.heads,
                a_in,
                keys,
                values,
                Some(mask),
                None,
            )?;
            x = tape.add(x, attn)?;
            let f_in = layer.norm2.apply(tape, store, x)?;
            let ffn = layer.ffn.apply_gelu(tape, store, f_in)?;
            x = tape.add(x, ffn)?;
        }
        self.final_norm.apply(tape, store, x)
    }
}
