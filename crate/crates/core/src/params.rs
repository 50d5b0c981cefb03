//! Named parameter storage with per-phase freeze management.
//!
//! Every tensor the models own lives here. Groups partition the store:
//! phase switching flips trainable flags per group, the optimizer walks
//! trainable entries, and accounting/hashing enumerate by group.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use sha2::{Digest, Sha256};
use std::fmt;

/// Handle into the store. Stable for the lifetime of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ownership partition of all parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    BottleneckQueries,
    BottleneckBlocks,
    BottleneckProjection,
    DecoderFrozen,
    KaAdapter,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Encoder,
        ParamGroup::BottleneckQueries,
        ParamGroup::BottleneckBlocks,
        ParamGroup::BottleneckProjection,
        ParamGroup::DecoderFrozen,
        ParamGroup::KaAdapter,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::BottleneckQueries => "bottleneck.queries",
            ParamGroup::BottleneckBlocks => "bottleneck.blocks",
            ParamGroup::BottleneckProjection => "bottleneck.wz",
            ParamGroup::DecoderFrozen => "decoder.frozen",
            ParamGroup::KaAdapter => "decoder.ka_adapter",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Training phase, in the two-step pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Phase 1: knowledge compression. Trains queries, blocks, projection.
    KnowledgeCompression,
    /// Phase 2: dialogue tuning. Trains the adapters plus the projection.
    DialogueTuning,
}

impl Phase {
    pub fn trainable_groups(&self) -> &'static [ParamGroup] {
        match self {
            Phase::KnowledgeCompression => &[
                ParamGroup::BottleneckQueries,
                ParamGroup::BottleneckBlocks,
                ParamGroup::BottleneckProjection,
            ],
            Phase::DialogueTuning => &[
                ParamGroup::KaAdapter,
                ParamGroup::BottleneckProjection,
            ],
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Phase::KnowledgeCompression => "kc",
            Phase::DialogueTuning => "dialog",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
    pub trainable: bool,
}

/// Arena of all model parameters, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Tensor<S>,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            group,
            value,
            grad: None,
            trainable: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Flip trainable flags for the given phase. Everything outside the
    /// phase's groups is frozen.
    pub fn set_phase(&mut self, phase: Phase) {
        let groups = phase.trainable_groups();
        for p in &mut self.params {
            p.trainable = groups.contains(&p.group);
        }
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Accumulate `delta` into the parameter's gradient slot.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor<S>) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.value.shape(), delta.shape());
        match &mut p.grad {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data().iter()) {
                    *gi = *gi + *di;
                }
            }
            None => p.grad = Some(delta.clone()),
        }
    }

    /// Element count per group, by enumeration of the stored tensors.
    pub fn count_group(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn count_total(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// SHA-256 over the canonical encoding of every parameter in the group,
    /// in registration order. Bitwise freeze checks compare these.
    pub fn hash_group(&self, group: ParamGroup) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            hasher.update(p.name.as_bytes());
            hasher.update(p.value.canonical_bytes());
        }
        hex_string(&hasher.finalize())
    }

    pub fn hash_param(&self, id: ParamId) -> String {
        let p = &self.params[id.0];
        let mut hasher = Sha256::new();
        hasher.update(p.value.canonical_bytes());
        hex_string(&hasher.finalize())
    }

    /// Overwrite a parameter's value, shape-checked.
    pub fn load_value(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dimension(format!(
                "parameter {} expects shape {:?}, checkpoint holds {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
