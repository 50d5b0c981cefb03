//! Two-phase training: knowledge-compression steps (reconstruction +
//! alignment through the frozen decoder) and dialogue fine-tuning steps
//! (response NLL through the adapters), with freeze management, metrics
//! logging, accounting, and checkpointing.

pub mod accounting;
pub mod checkpoint;
pub mod gradsuite;

use crate::config::{ScheduleKind, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{CompressedKnowledge, KgModel};
use crate::params::Phase;
use crate::tensor::adamw::{AdamW, AdamWConfig, Schedule};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};
use crate::text::dataset::DialogueExample;
use crate::text::template::{self, MAX_DIALOGUE_TOKENS};
use serde::Serialize;
use std::io::Write;

/// Mean next-token NLL of the masked span of a z2k sequence, with Z
/// injected at the system-segment markers. Runs the plain frozen decoder
/// (phase 1 precedes adapter integration), so gradients reach only the
/// bottleneck through Z.
pub fn recon_loss<S: Scalar>(
    model: &KgModel<S>,
    tape: &mut Tape<S>,
    seq: &crate::text::TokenSequence,
    z: &CompressedKnowledge,
) -> Result<NodeId> {
    if seq.z_positions.is_empty() {
        return Err(Error::contract("reconstruction template carries no markers"));
    }
    let out = model
        .decoder
        .forward_logits(tape, &model.store, seq, Some(z), false)?;
    let (targets, positions) = seq.lm_targets();
    if targets.is_empty() {
        return Err(Error::contract("reconstruction template has no target span"));
    }
    tape.lm_nll(out.logits, &targets, &positions)
}

/// Final hidden states of the plain frozen decoder at the marker
/// positions of a k2z sequence, detached from any graph.
pub fn compute_z_hat<S: Scalar>(
    model: &KgModel<S>,
    seq: &crate::text::TokenSequence,
) -> Result<Tensor<S>> {
    let m = model.cfg.m;
    if seq.z_positions.len() != m {
        return Err(Error::contract(format!(
            "k2z template carries {} markers, expected {m}",
            seq.z_positions.len()
        )));
    }
    let mut local = Tape::new();
    let out = model
        .decoder
        .forward_logits(&mut local, &model.store, seq, None, false)?;
    let hidden = local.value(out.final_hidden);
    let d2 = hidden.cols();
    let mut rows = Vec::with_capacity(m * d2);
    for &p in &seq.z_positions {
        rows.extend_from_slice(hidden.row_slice(p));
    }
    Tensor::new(m, d2, rows)
}

/// Mean squared error between Z and its decoder-side reconstruction.
/// Divides by every entry by default; `per_vector` divides by m only.
pub fn align_loss<S: Scalar>(
    tape: &mut Tape<S>,
    z: NodeId,
    z_hat: &Tensor<S>,
    per_vector: bool,
) -> Result<NodeId> {
    let (m, d2) = tape.value(z).shape();
    if z_hat.shape() != (m, d2) {
        return Err(Error::dimension(format!(
            "alignment shapes differ: {m}x{d2} vs {}x{}",
            z_hat.rows(),
            z_hat.cols()
        )));
    }
    let divisor = if per_vector { m as f64 } else { (m * d2) as f64 };
    let target = tape.constant(z_hat.clone());
    tape.mse_loss(z, target, divisor)
}

/// Mean response NLL for one dialogue example, with adapters active and
/// Z injected.
pub fn gen_loss<S: Scalar>(
    model: &KgModel<S>,
    tape: &mut Tape<S>,
    example: &DialogueExample,
) -> Result<NodeId> {
    let knowledge = template::join_knowledge(&example.knowledge);
    let z = model.compress_text(tape, &knowledge)?;
    let budget = MAX_DIALOGUE_TOKENS.min(model.decoder.config().max_positions);
    let seq = template::assemble_dialog(
        &model.vocab,
        &example.context,
        Some(&example.response),
        budget,
    )?;
    let out = model
        .decoder
        .forward_logits(tape, &model.store, &seq, Some(&z), true)?;
    let (targets, positions) = seq.lm_targets();
    tape.lm_nll(out.logits, &targets, &positions)
}

/// Combined phase-1 loss node for one knowledge text, plus the scalar
/// reconstruction and alignment values: compress, reconstruct under the
/// plain frozen decoder, align against the decoder-side reconstruction,
/// and sum as recon + beta·align.
pub fn kc_example_loss<S: Scalar>(
    model: &KgModel<S>,
    tape: &mut Tape<S>,
    knowledge: &str,
    beta: f64,
    no_align: bool,
    align_per_vector: bool,
) -> Result<(NodeId, f64, f64)> {
    let z = model.compress_text(tape, knowledge)?;
    let z2k = template::assemble_z2k(&model.vocab, knowledge)?;
    let recon = recon_loss(model, tape, &z2k, &z)?;
    let recon_value = tape.value(recon).item()?.as_f64();
    if no_align {
        return Ok((recon, recon_value, 0.0));
    }
    let k2z = template::assemble_k2z(&model.vocab, knowledge)?;
    let z_hat = compute_z_hat(model, &k2z)?;
    let align = align_loss(tape, z.z, &z_hat, align_per_vector)?;
    let align_value = tape.value(align).item()?.as_f64();
    let combined = tape.add_scaled(recon, align, beta)?;
    Ok((combined, recon_value, align_value))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct KcMetrics {
    pub recon: f64,
    pub align: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GenMetrics {
    pub gen: f64,
}

/// One line of the step log.
#[derive(Debug, Serialize)]
pub struct StepRecord<'a, L: Serialize> {
    pub phase: &'a str,
    pub step: u64,
    pub losses: L,
    pub lr: f64,
    pub timestamp: u64,
}

fn now_secs() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub struct Trainer<S> {
    pub model: KgModel<S>,
    pub phase: Phase,
    pub step: u64,
    train_cfg: TrainConfig,
    optimizer: AdamW<S>,
    schedule: Schedule,
}

impl<S: Scalar> Trainer<S> {
    /// Flip the store to the phase's trainable set and build the
    /// optimizer from the phase's hyperparameters. `total_steps` feeds the
    /// cosine schedule.
    pub fn new(
        mut model: KgModel<S>,
        phase: Phase,
        train_cfg: TrainConfig,
        total_steps: u64,
    ) -> Result<Self> {
        train_cfg.validate()?;
        model.store.set_phase(phase);
        let hyper = match phase {
            Phase::KnowledgeCompression => &train_cfg.phase1,
            Phase::DialogueTuning => &train_cfg.phase2,
        };
        let optimizer = AdamW::new(AdamWConfig {
            learning_rate: hyper.learning_rate,
            weight_decay: hyper.weight_decay,
            ..AdamWConfig::default()
        });
        let schedule = match hyper.schedule {
            ScheduleKind::ConstantWithWarmup => Schedule::ConstantWithWarmup {
                warmup_steps: hyper.warmup_steps,
            },
            ScheduleKind::Cosine => Schedule::Cosine {
                warmup_steps: hyper.warmup_steps,
                total_steps,
            },
        };
        Ok(Trainer {
            model,
            phase,
            step: 0,
            train_cfg,
            optimizer,
            schedule,
        })
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train_cfg
    }

    pub fn current_lr(&self) -> f64 {
        self.optimizer.config().learning_rate * self.schedule.scale(self.step)
    }

    fn no_align(&self) -> bool {
        self.model.cfg.ablation.no_align
    }

    fn kc_example(
        &self,
        tape: &mut Tape<S>,
        knowledge: &str,
    ) -> Result<(NodeId, f64, f64)> {
        kc_example_loss(
            &self.model,
            tape,
            knowledge,
            self.train_cfg.beta,
            self.no_align(),
            self.train_cfg.align_per_vector,
        )
    }

    /// Losses over a batch without touching parameters.
    pub fn kc_eval(&self, batch: &[String]) -> Result<KcMetrics> {
        self.require_phase(Phase::KnowledgeCompression)?;
        let mut tape = Tape::new();
        let (_, metrics) = self.kc_batch(&mut tape, batch)?;
        Ok(metrics)
    }

    fn kc_batch(&self, tape: &mut Tape<S>, batch: &[String]) -> Result<(NodeId, KcMetrics)> {
        if batch.is_empty() {
            return Err(Error::contract("empty knowledge batch"));
        }
        let mut sum_node: Option<NodeId> = None;
        let mut recon_sum = 0.0;
        let mut align_sum = 0.0;
        for text in batch {
            let (node, recon, align) = self.kc_example(tape, text)?;
            recon_sum += recon;
            align_sum += align;
            sum_node = Some(match sum_node {
                None => node,
                Some(prev) => tape.add(prev, node)?,
            });
        }
        let n = batch.len() as f64;
        let mean = tape.scale_const(sum_node.expect("non-empty batch"), 1.0 / n);
        let metrics = KcMetrics {
            recon: recon_sum / n,
            align: align_sum / n,
            total: tape.value(mean).item()?.as_f64(),
        };
        Ok((mean, metrics))
    }

    /// One phase-1 update on a batch of knowledge texts.
    pub fn kc_step(&mut self, batch: &[String]) -> Result<KcMetrics> {
        self.require_phase(Phase::KnowledgeCompression)?;
        let mut tape = Tape::new();
        let (loss, metrics) = self.kc_batch(&mut tape, batch)?;
        self.model.store.zero_grads();
        tape.backward(loss, &mut self.model.store)?;
        let scale = self.schedule.scale(self.step);
        self.optimizer.step(&mut self.model.store, scale)?;
        self.step += 1;
        Ok(metrics)
    }

    fn gen_batch(&self, tape: &mut Tape<S>, batch: &[DialogueExample]) -> Result<(NodeId, GenMetrics)> {
        if batch.is_empty() {
            return Err(Error::contract("empty dialogue batch"));
        }
        let mut sum_node: Option<NodeId> = None;
        for example in batch {
            let node = gen_loss(&self.model, tape, example)?;
            sum_node = Some(match sum_node {
                None => node,
                Some(prev) => tape.add(prev, node)?,
            });
        }
        let mean = tape.scale_const(sum_node.expect("non-empty batch"), 1.0 / batch.len() as f64);
        let metrics = GenMetrics {
            gen: tape.value(mean).item()?.as_f64(),
        };
        Ok((mean, metrics))
    }

    pub fn gen_eval(&self, batch: &[DialogueExample]) -> Result<GenMetrics> {
        self.require_phase(Phase::DialogueTuning)?;
        let mut tape = Tape::new();
        let (_, metrics) = self.gen_batch(&mut tape, batch)?;
        Ok(metrics)
    }

    /// One phase-2 update on a batch of dialogue examples.
    pub fn gen_step(&mut self, batch: &[DialogueExample]) -> Result<GenMetrics> {
        self.require_phase(Phase::DialogueTuning)?;
        let mut tape = Tape::new();
        let (loss, metrics) = self.gen_batch(&mut tape, batch)?;
        self.model.store.zero_grads();
        tape.backward(loss, &mut self.model.store)?;
        let scale = self.schedule.scale(self.step);
        self.optimizer.step(&mut self.model.store, scale)?;
        self.step += 1;
        Ok(metrics)
    }

    fn require_phase(&self, phase: Phase) -> Result<()> {
        if self.phase != phase {
            return Err(Error::contract(format!(
                "trainer is in phase {:?}, operation needs {:?}",
                self.phase, phase
            )));
        }
        Ok(())
    }

    /// Deterministic epoch permutation from the model's seed tree.
    fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let name = format!("shuffle.{}.epoch{epoch}", self.phase.label());
        let draws = self.model.seeds.uniform_u32(&name, n, u32::MAX);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = (draws[i] as usize) % (i + 1);
            order.swap(i, j);
        }
        order
    }

    /// Full phase-1 run over the corpus, logging one JSON object per step.
    pub fn train_kc(&mut self, texts: &[String], log: &mut dyn Write) -> Result<Vec<KcMetrics>> {
        let hyper = self.train_cfg.phase1.clone();
        let mut history = Vec::new();
        for epoch in 0..hyper.epochs {
            let order = self.epoch_order(texts.len(), epoch);
            for chunk in order.chunks(hyper.batch_size) {
                let batch: Vec<String> = chunk.iter().map(|&i| texts[i].clone()).collect();
                let lr = self.current_lr();
                let metrics = self.kc_step(&batch)?;
                let record = StepRecord {
                    phase: self.phase.label(),
                    step: self.step,
                    losses: metrics,
                    lr,
                    timestamp: now_secs(),
                };
                writeln!(log, "{}", serde_json::to_string(&record).expect("serializable"))?;
                history.push(metrics);
            }
        }
        Ok(history)
    }

    /// Full phase-2 run over the dialogue set.
    pub fn train_dialog(
        &mut self,
        examples: &[DialogueExample],
        log: &mut dyn Write,
    ) -> Result<Vec<GenMetrics>> {
        let hyper = self.train_cfg.phase2.clone();
        let mut history = Vec::new();
        for epoch in 0..hyper.epochs {
            let order = self.epoch_order(examples.len(), epoch);
            for chunk in order.chunks(hyper.batch_size) {
                let batch: Vec<DialogueExample> =
                    chunk.iter().map(|&i| examples[i].clone()).collect();
                let lr = self.current_lr();
                let metrics = self.gen_step(&batch)?;
                let record = StepRecord {
                    phase: self.phase.label(),
                    step: self.step,
                    losses: metrics,
                    lr,
                    timestamp: now_secs(),
                };
                writeln!(log, "{}", serde_json::to_string(&record).expect("serializable"))?;
                history.push(metrics);
            }
        }
        Ok(history)
    }

    /// Planned optimizer steps for a corpus of `n` items under the phase's
    /// batch/epoch settings.
    pub fn planned_steps(hyper_batch: usize, hyper_epochs: usize, n: usize) -> u64 {
        let per_epoch = n.div_ceil(hyper_batch);
        (per_epoch * hyper_epochs) as u64
    }
}
