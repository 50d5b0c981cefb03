//! Query-transformer bottleneck: m learnable query vectors attend over
//! the encoder features through L blocks (self-attention, cross-attention
//! into the features, feed-forward), then a projection maps the result to
//! the decoder width. Output shape is m×d2 regardless of input length.

use crate::config::{BottleneckConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::model::encoder::EncodeKnowledge;
use crate::model::layers::{
    init_normal, multi_head_attention, project_kv, Ffn, MhaWeights, Norm,
};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::SeedTree;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Scalar;

/// Compressed knowledge on the tape: the m×d2 matrix and its row mean.
#[derive(Debug, Clone, Copy)]
pub struct CompressedKnowledge {
    pub z: NodeId,
    pub z_bar: NodeId,
}

#[derive(Debug)]
struct QFormerBlock {
    norm1: Norm,
    self_attn: MhaWeights,
    norm2: Norm,
    cross_attn: MhaWeights,
    norm3: Norm,
    ffn: Ffn,
}

#[derive(Debug)]
pub struct KnowledgeBottleneck {
    cfg: BottleneckConfig,
    m: usize,
    query_width: usize,
    out_width: usize,
    /// The m learnable knowledge queries, m×d1.
    queries: ParamId,
    blocks: Vec<QFormerBlock>,
    /// Projection to the decoder width, stored d2×d1.
    projection: ParamId,
}

impl KnowledgeBottleneck {
    pub fn build<S: Scalar>(
        cfg: &ModelConfig,
        store: &mut ParamStore<S>,
        seeds: &SeedTree,
    ) -> Self {
        let d1 = cfg.encoder.width;
        let d2 = cfg.decoder.width;
        let queries = init_normal(
            store,
            seeds,
            "bottleneck.queries",
            ParamGroup::BottleneckQueries,
            cfg.m,
            d1,
            0.02,
        );
        let g = ParamGroup::BottleneckBlocks;
        let blocks = (0..cfg.bottleneck.blocks)
            .map(|i| {
                let p = format!("bottleneck.block{i}");
                QFormerBlock {
                    norm1: Norm::build(store, &format!("{p}.norm1"), g, d1),
                    self_attn: MhaWeights::build(store, seeds, &format!("{p}.self"), g, d1),
                    norm2: Norm::build(store, &format!("{p}.norm2"), g, d1),
                    cross_attn: MhaWeights::build(store, seeds, &format!("{p}.cross"), g, d1),
                    norm3: Norm::build(store, &format!("{p}.norm3"), g, d1),
                    ffn: Ffn::build(store, seeds, &format!("{p}.ffn"), g, d1, cfg.bottleneck.ffn_mult),
                }
            })
            .collect();
        let projection = init_normal(
            store,
            seeds,
            "bottleneck.wz",
            ParamGroup::BottleneckProjection,
            d2,
            d1,
            0.02,
        );
        KnowledgeBottleneck {
            cfg: cfg.bottleneck.clone(),
            m: cfg.m,
            query_width: d1,
            out_width: d2,
            queries,
            blocks,
            projection,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// One block: self-attention over the queries, cross-attention with
    /// keys/values from the features, then the feed-forward; residual and
    /// norm around each sublayer.
    pub fn block_forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        block_idx: usize,
        z_prev: NodeId,
        features: NodeId,
        feature_mask: &[bool],
    ) -> Result<NodeId> {
        let block = &self.blocks[block_idx];
        if tape.value(z_prev).cols() != self.query_width {
            return Err(Error::dimension(format!(
                "query width {} does not match block width {}",
                tape.value(z_prev).cols(),
                self.query_width
            )));
        }
        if tape.value(features).cols() != self.query_width {
            return Err(Error::dimension(format!(
                "feature width {} does not match block width {}",
                tape.value(features).cols(),
                self.query_width
            )));
        }
        if feature_mask.iter().all(|&m| !m) {
            return Err(Error::Mask("cross-attention over fully-masked features".into()));
        }

        let s_in = block.norm1.apply(tape, store, z_prev)?;
        let (sk, sv) = project_kv(tape, store, &block.self_attn, s_in)?;
        let self_out = multi_head_attention(
            tape,
            store,
            &block.self_attn,
            self.cfg.heads,
            s_in,
            sk,
            sv,
            None,
            None,
        )?;
        let z = tape.add(z_prev, self_out)?;

        let c_in = block.norm2.apply(tape, store, z)?;
        let (ck, cv) = project_kv(tape, store, &block.cross_attn, features)?;
        let cross_out = multi_head_attention(
            tape,
            store,
            &block.cross_attn,
            self.cfg.heads,
            c_in,
            ck,
            cv,
            Some(feature_mask),
            None,
        )?;
        let z = tape.add(z, cross_out)?;

        let f_in = block.norm3.apply(tape, store, z)?;
        let ffn = block.ffn.apply_gelu(tape, store, f_in)?;
        tape.add(z, ffn)
    }

    /// Encoder → L blocks from the learnable queries → projection.
    /// Differentiable end-to-end into the queries, block weights, and the
    /// projection.
    pub fn compress<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        encoder: &dyn EncodeKnowledge<S>,
        ids: &[u32],
        mask: &[bool],
    ) -> Result<CompressedKnowledge> {
        let features = encoder.encode(tape, store, ids, mask)?;
        let mut z = tape.leaf(store, self.queries);
        for i in 0..self.blocks.len() {
            z = self.block_forward(tape, store, i, z, features, mask)?;
        }
        let wz = tape.leaf(store, self.projection);
        let wz_t = tape.transpose(wz);
        let z = tape.matmul(z, wz_t)?;
        debug_assert_eq!(tape.value(z).shape(), (self.m, self.out_width));
        let z_bar = tape.mean_rows(z)?;
        Ok(CompressedKnowledge { z, z_bar })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::gradcheck::check_gradients;
    use crate::model::encoder::KnowledgeEncoder;
    use crate::params::Phase;
    use crate::tensor::Tensor;

    fn micro() -> (ModelConfig, KnowledgeEncoder, KnowledgeBottleneck, ParamStore<f64>) {
        let mut cfg = ModelConfig::micro();
        cfg.vocab_size = 24;
        let seeds = SeedTree::new(9);
        let mut store = ParamStore::new();
        let enc = KnowledgeEncoder::build(&cfg.encoder, cfg.vocab_size, &mut store, &seeds);
        let bn = KnowledgeBottleneck::build(&cfg, &mut store, &seeds);
        (cfg, enc, bn, store)
    }

    #[test]
    fn output_shape_is_independent_of_input_length() {
        let (cfg, enc, bn, store) = micro();
        for len in [1usize, 16, 64] {
            let ids: Vec<u32> = (0..len).map(|i| (i % 20) as u32).collect();
            let mask = vec![true; len];
            let mut tape = Tape::new();
            let out = bn.compress(&mut tape, &store, &enc, &ids, &mask).unwrap();
            assert_eq!(tape.value(out.z).shape(), (cfg.m, cfg.decoder.width));
            assert_eq!(tape.value(out.z_bar).shape(), (1, cfg.decoder.width));
        }
    }

    #[test]
    fn fully_masked_features_are_rejected() {
        let (_cfg, enc, bn, store) = micro();
        let mut tape = Tape::new();
        let err = bn
            .compress(&mut tape, &store, &enc, &[1, 2], &[false, false])
            .unwrap_err();
        assert!(matches!(err, Error::Mask(_)));
    }

    #[test]
    fn zero_projection_gives_zero_output_and_mean() {
        let (cfg, enc, bn, mut store) = micro();
        let wz = store.by_name("bottleneck.wz").unwrap();
        let (r, c) = store.value(wz).shape();
        store.load_value(wz, Tensor::zeros(r, c)).unwrap();
        let mut tape = Tape::new();
        let out = bn
            .compress(&mut tape, &store, &enc, &[1, 2, 3], &[true; 3])
            .unwrap();
        assert!(tape.value(out.z).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(out.z_bar).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(out.z).shape(), (cfg.m, cfg.decoder.width));
    }

    #[test]
    fn mean_is_column_mean_of_z() {
        let (_cfg, enc, bn, store) = micro();
        let mut tape = Tape::new();
        let out = bn
            .compress(&mut tape, &store, &enc, &[3, 1, 4], &[true; 3])
            .unwrap();
        let z = tape.value(out.z).clone();
        let zbar = tape.value(out.z_bar);
        for c in 0..z.cols() {
            let mean: f64 = (0..z.rows()).map(|r| z.at(r, c)).sum::<f64>() / z.rows() as f64;
            assert!((zbar.at(0, c) - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn sum_of_z_gradient_wrt_queries_matches_finite_differences() {
        let (_cfg, enc, bn, mut store) = micro();
        store.set_phase(Phase::KnowledgeCompression);
        let queries = store.by_name("bottleneck.queries").unwrap();
        let ids = [2u32, 5, 7];
        let mask = [true; 3];
        let mut loss_fn = |store: &mut ParamStore<f64>, with_backward: bool| {
            let mut tape = Tape::new();
            let out = bn.compress(&mut tape, store, &enc, &ids, &mask)?;
            let loss = tape.sum_all(out.z);
            let v = tape.value(loss).item()?;
            if with_backward {
                tape.backward(loss, store)?;
            }
            Ok(v)
        };
        let report = check_gradients(&mut store, &[queries], 1e-4, &mut loss_fn).unwrap();
        assert!(
            report.passes(1e-4),
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn compress_is_deterministic_for_a_fixed_seed() {
        let run = || {
            let (_cfg, enc, bn, store) = micro();
            let mut tape = Tape::new();
            let out = bn
                .compress(&mut tape, &store, &enc, &[1, 2, 3, 4], &[true; 4])
                .unwrap();
            tape.value(out.z).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn phase1_gradients_reach_only_bottleneck_groups() {
        let (_cfg, enc, bn, mut store) = micro();
        store.set_phase(Phase::KnowledgeCompression);
        let mut tape = Tape::new();
        let out = bn
            .compress(&mut tape, &store, &enc, &[1, 2, 3], &[true; 3])
            .unwrap();
        let loss = tape.sum_all(out.z);
        tape.backward(loss, &mut store).unwrap();
        for (_, p) in store.iter() {
            match p.group {
                ParamGroup::BottleneckQueries
                | ParamGroup::BottleneckBlocks
                | ParamGroup::BottleneckProjection => {}
                _ => assert!(p.grad.is_none(), "{} must stay gradient-free", p.name),
            }
        }
    }
}
