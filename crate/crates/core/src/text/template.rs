//! Instruction-template assembly.
//!
//! Three tasks share one role-header layout. The system segment carries
//! either raw knowledge text (k2z) or the m vector markers (z2k, dialog);
//! the assistant target is the markers (k2z), the knowledge text (z2k),
//! or the final response (dialog). The loss mask covers exactly the
//! assistant target.

use crate::error::{Error, Result};
use crate::text::dataset::{DialogueExample, Speaker};
use crate::text::vocab::{Vocabulary, BOS, EOT, HDR_ASSISTANT, HDR_SYSTEM, HDR_USER};

pub const SYSTEM_PROMPT: &str =
    "You are a knowledge assistant. Ground your replies in the knowledge given here:";
pub const K2Z_PROMPT: &str = "Condense the knowledge above into its key points.";
pub const Z2K_PROMPT: &str = "Write out the knowledge contained above in full.";

/// Knowledge token budget inside a template.
pub const MAX_KNOWLEDGE_TOKENS: usize = 256;
/// Whole-sequence budget for dialogue templates.
pub const MAX_DIALOGUE_TOKENS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    System,
    User,
    Assistant,
    ZMarker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateTask {
    /// Knowledge in the system segment; the assistant target is the markers.
    K2z,
    /// Markers in the system segment; the assistant target is the knowledge.
    Z2k,
    /// Markers in the system segment; the assistant target is the response.
    Dialog,
}

#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub roles: Vec<Role>,
    pub loss_mask: Vec<bool>,
    /// Marker indices, in `<Z_1>…<Z_m>` order; empty when absent.
    pub z_positions: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.ids.len() != self.roles.len() || self.ids.len() != self.loss_mask.len() {
            return Err(Error::contract("ids/roles/loss_mask lengths differ"));
        }
        if !self.z_positions.is_empty() && self.z_positions.len() != m {
            return Err(Error::contract(format!(
                "z_positions holds {} markers, expected {m}",
                self.z_positions.len()
            )));
        }
        for &p in &self.z_positions {
            if p >= self.ids.len() || self.roles[p] != Role::ZMarker {
                return Err(Error::contract(format!(
                    "z_position {p} does not point at a marker token"
                )));
            }
        }
        if self.loss_mask.first().copied().unwrap_or(false) {
            return Err(Error::contract("position 0 cannot carry loss"));
        }
        for (i, &masked) in self.loss_mask.iter().enumerate() {
            if masked && !matches!(self.roles[i], Role::Assistant | Role::ZMarker) {
                return Err(Error::contract(format!(
                    "loss mask covers non-target position {i}"
                )));
            }
        }
        Ok(())
    }

    /// Next-token pairs for the masked span: target ids and the logits row
    /// (one position earlier) that predicts each.
    pub fn lm_targets(&self) -> (Vec<u32>, Vec<usize>) {
        let mut targets = Vec::new();
        let mut positions = Vec::new();
        for (i, &masked) in self.loss_mask.iter().enumerate() {
            if masked {
                debug_assert!(i > 0);
                targets.push(self.ids[i]);
                positions.push(i - 1);
            }
        }
        (targets, positions)
    }
}

struct Builder {
    ids: Vec<u32>,
    roles: Vec<Role>,
    loss_mask: Vec<bool>,
    z_positions: Vec<usize>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            ids: vec![BOS],
            roles: vec![Role::System],
            loss_mask: vec![false],
            z_positions: Vec::new(),
        }
    }

    fn push(&mut self, id: u32, role: Role, masked: bool) {
        self.ids.push(id);
        self.roles.push(role);
        self.loss_mask.push(masked);
    }

    fn push_all(&mut self, ids: &[u32], role: Role, masked: bool) {
        for &id in ids {
            self.push(id, role, masked);
        }
    }

    fn push_markers(&mut self, vocab: &Vocabulary, role_segment: Role, masked: bool) {
        let _ = role_segment;
        for i in 0..vocab.marker_count() {
            self.z_positions.push(self.ids.len());
            self.push(vocab.z_id(i), Role::ZMarker, masked);
        }
    }

    fn finish(self) -> TokenSequence {
        TokenSequence {
            ids: self.ids,
            roles: self.roles,
            loss_mask: self.loss_mask,
            z_positions: self.z_positions,
        }
    }
}

/// Keep the trailing `max` tokens.
fn truncate_left(ids: Vec<u32>, max: usize) -> Vec<u32> {
    if ids.len() > max {
        ids[ids.len() - max..].to_vec()
    } else {
        ids
    }
}

fn encode_knowledge(vocab: &Vocabulary, knowledge: &str) -> Result<Vec<u32>> {
    if knowledge.trim().is_empty() {
        return Err(Error::Schema {
            line: 0,
            msg: "knowledge text is empty".into(),
        });
    }
    Ok(truncate_left(vocab.encode(knowledge), MAX_KNOWLEDGE_TOKENS))
}

/// k2z: system carries the knowledge; assistant target is the m markers.
pub fn assemble_k2z(vocab: &Vocabulary, knowledge: &str) -> Result<TokenSequence> {
    let know_ids = encode_knowledge(vocab, knowledge)?;
    let mut b = Builder::new();
    b.push(HDR_SYSTEM, Role::System, false);
    b.push_all(&vocab.encode(SYSTEM_PROMPT), Role::System, false);
    b.push_all(&know_ids, Role::System, false);
    b.push(EOT, Role::System, false);
    b.push(HDR_USER, Role::User, false);
    b.push_all(&vocab.encode(K2Z_PROMPT), Role::User, false);
    b.push(EOT, Role::User, false);
    b.push(HDR_ASSISTANT, Role::Assistant, false);
    b.push_markers(vocab, Role::Assistant, true);
    b.push(EOT, Role::Assistant, false);
    let seq = b.finish();
    seq.validate(vocab.marker_count())?;
    Ok(seq)
}

/// z2k: system carries the markers; assistant target is the knowledge.
pub fn assemble_z2k(vocab: &Vocabulary, knowledge: &str) -> Result<TokenSequence> {
    let know_ids = encode_knowledge(vocab, knowledge)?;
    let mut b = Builder::new();
    b.push(HDR_SYSTEM, Role::System, false);
    b.push_all(&vocab.encode(SYSTEM_PROMPT), Role::System, false);
    b.push_markers(vocab, Role::System, false);
    b.push(EOT, Role::System, false);
    b.push(HDR_USER, Role::User, false);
    b.push_all(&vocab.encode(Z2K_PROMPT), Role::User, false);
    b.push(EOT, Role::User, false);
    b.push(HDR_ASSISTANT, Role::Assistant, false);
    b.push_all(&know_ids, Role::Assistant, true);
    b.push(EOT, Role::Assistant, true);
    let seq = b.finish();
    seq.validate(vocab.marker_count())?;
    Ok(seq)
}

/// dialog: markers in the system segment, alternating turns, response (when
/// given) as the masked final assistant turn. `response: None` leaves the
/// sequence open after the assistant header, ready for generation.
pub fn assemble_dialog(
    vocab: &Vocabulary,
    context: &[(Speaker, String)],
    response: Option<&str>,
    max_len: usize,
) -> Result<TokenSequence> {
    let probe = DialogueExample {
        context: context.to_vec(),
        knowledge: Vec::new(),
        response: response.unwrap_or("pending").to_string(),
    };
    probe.validate().map_err(|e| Error::Schema {
        line: 0,
        msg: e.to_string(),
    })?;

    let mut turns: Vec<(Speaker, String)> = context.to_vec();
    loop {
        let seq = assemble_dialog_unchecked(vocab, &turns, response);
        if seq.len() <= max_len {
            seq.validate(vocab.marker_count())?;
            return Ok(seq);
        }
        // Drop the oldest user/assistant pair; a lone over-long turn fails.
        if turns.len() >= 3 {
            turns.drain(0..2);
        } else {
            return Err(Error::Length(format!(
                "dialogue needs {} tokens even after left truncation (budget {max_len})",
                seq.len()
            )));
        }
    }
}

fn assemble_dialog_unchecked(
    vocab: &Vocabulary,
    context: &[(Speaker, String)],
    response: Option<&str>,
) -> TokenSequence {
    let mut b = Builder::new();
    b.push(HDR_SYSTEM, Role::System, false);
    b.push_all(&vocab.encode(SYSTEM_PROMPT), Role::System, false);
    b.push_markers(vocab, Role::System, false);
    b.push(EOT, Role::System, false);
    for (speaker, text) in context {
        let (hdr, role) = match speaker {
            Speaker::User => (HDR_USER, Role::User),
            Speaker::Assistant => (HDR_ASSISTANT, Role::Assistant),
        };
        b.push(hdr, role, false);
        b.push_all(&vocab.encode(text), role, false);
        b.push(EOT, role, false);
    }
    b.push(HDR_ASSISTANT, Role::Assistant, false);
    if let Some(resp) = response {
        b.push_all(&vocab.encode(resp), Role::Assistant, true);
        b.push(EOT, Role::Assistant, true);
    }
    b.finish()
}

/// Join retrieved pieces into the single knowledge string fed to the
/// encoder and the templates.
pub fn join_knowledge(pieces: &[String]) -> String {
    pieces.join("\n")
}
