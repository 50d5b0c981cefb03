//! Shared transformer building blocks: parameter initialization, layer
//! norm wrappers, and multi-head attention on the tape.

use crate::error::Result;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::SeedTree;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Gaussian-initialized matrix parameter.
pub fn init_normal<S: Scalar>(
    store: &mut ParamStore<S>,
    seeds: &SeedTree,
    name: &str,
    group: ParamGroup,
    rows: usize,
    cols: usize,
    std_dev: f64,
) -> ParamId {
    let data = seeds.normal_f64(name, rows * cols, std_dev);
    let tensor = Tensor::from_f64(rows, cols, &data).expect("sized draw");
    store.register(name, group, tensor)
}

/// Fan-in scaled init for linear maps applied as x·W (fan-in = rows).
pub fn init_linear<S: Scalar>(
    store: &mut ParamStore<S>,
    seeds: &SeedTree,
    name: &str,
    group: ParamGroup,
    rows: usize,
    cols: usize,
) -> ParamId {
    init_normal(store, seeds, name, group, rows, cols, 1.0 / (rows as f64).sqrt())
}

pub fn init_zeros<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    group: ParamGroup,
    rows: usize,
    cols: usize,
) -> ParamId {
    store.register(name, group, Tensor::zeros(rows, cols))
}

/// Layer-norm gain and bias.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        group: ParamGroup,
        width: usize,
    ) -> Self {
        let ones = Tensor::new(1, width, vec![S::one(); width]).expect("sized");
        let gain = store.register(format!("{name}.gain"), group, ones);
        let bias = init_zeros(store, &format!("{name}.bias"), group, 1, width);
        Norm { gain, bias }
    }

    pub fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: NodeId,
    ) -> Result<NodeId> {
        let g = tape.leaf(store, self.gain);
        let b = tape.leaf(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Query/key/value/output projections, all width×width, applied as x·W.
#[derive(Debug, Clone)]
pub struct MhaWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MhaWeights {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        seeds: &SeedTree,
        name: &str,
        group: ParamGroup,
        width: usize,
    ) -> Self {
        MhaWeights {
            wq: init_linear(store, seeds, &format!("{name}.wq"), group, width, width),
            wk: init_linear(store, seeds, &format!("{name}.wk"), group, width, width),
            wv: init_linear(store, seeds, &format!("{name}.wv"), group, width, width),
            wo: init_linear(store, seeds, &format!("{name}.wo"), group, width, width),
        }
    }
}

/// Multi-head scaled dot-product attention.
///
/// Queries come from `q_input`, keys/values from `kv`; `key_mask` excludes
/// key positions, `causal_offset` additionally limits query row i to key
/// columns ≤ i + offset. Head outputs are concatenated and projected.
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    weights: &MhaWeights,
    heads: usize,
    q_input: NodeId,
    keys: NodeId,
    values: NodeId,
    key_mask: Option<&[bool]>,
    causal_offset: Option<usize>,
) -> Result<NodeId> {
    let wq = tape.leaf(store, weights.wq);
    let q = tape.matmul(q_input, wq)?;
    attention_with_q(
        tape,
        store,
        weights.wo,
        heads,
        q,
        keys,
        values,
        key_mask,
        causal_offset,
    )
}

/// Attention body for callers that already projected the queries (the
/// decoder reuses its Q for the prefix correction).
pub fn attention_with_q<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    wo: ParamId,
    heads: usize,
    q: NodeId,
    keys: NodeId,
    values: NodeId,
    key_mask: Option<&[bool]>,
    causal_offset: Option<usize>,
) -> Result<NodeId> {
    let width = tape.value(q).cols();
    debug_assert_eq!(width % heads, 0);
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let wo = tape.leaf(store, wo);
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let start = h * head_dim;
        let qh = tape.slice_cols(q, start, head_dim)?;
        let kh = tape.slice_cols(keys, start, head_dim)?;
        let vh = tape.slice_cols(values, start, head_dim)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale_const(scores, scale);
        let probs = tape.softmax_rows(scaled, key_mask, causal_offset)?;
        head_outputs.push(tape.matmul(probs, vh)?);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    tape.matmul(merged, wo)
}

/// Project an input onto keys and values with the shared weights. Kept
/// separate from the attention proper so decoding can cache the results.
pub fn project_kv<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    weights: &MhaWeights,
    kv_input: NodeId,
) -> Result<(NodeId, NodeId)> {
    let wk = tape.leaf(store, weights.wk);
    let wv = tape.leaf(store, weights.wv);
    let k = tape.matmul(kv_input, wk)?;
    let v = tape.matmul(kv_input, wv)?;
    Ok((k, v))
}

/// Two-matrix feed-forward with an activation between.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub w_in: ParamId,
    pub w_out: ParamId,
}

impl Ffn {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        seeds: &SeedTree,
        name: &str,
        group: ParamGroup,
        width: usize,
        mult: usize,
    ) -> Self {
        Ffn {
            w_in: init_linear(store, seeds, &format!("{name}.w_in"), group, width, width * mult),
            w_out: init_linear(store, seeds, &format!("{name}.w_out"), group, width * mult, width),
        }
    }

    pub fn apply_gelu<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w_in = tape.leaf(store, self.w_in);
        let w_out = tape.leaf(store, self.w_out);
        let hidden = tape.matmul(x, w_in)?;
        let act = tape.gelu(hidden);
        tape.matmul(act, w_out)
    }
}
