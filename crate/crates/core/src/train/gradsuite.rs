//! Finite-difference verification of the four pipeline losses on a micro
//! configuration, over every phase-trainable parameter element.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::gradcheck::{relative_error, GradCheckReport};
use crate::model::KgModel;
use crate::params::{ParamId, Phase};
use crate::synth;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;
use crate::text::template;
use crate::train::{align_loss, compute_z_hat, gen_loss, recon_loss};

pub const FD_EPS: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug)]
pub struct SuiteEntry {
    pub loss: String,
    pub report: GradCheckReport,
}

#[derive(Debug)]
pub struct GradSuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub tolerance: f64,
}

impl GradSuiteReport {
    pub fn passes(&self) -> bool {
        self.entries.iter().all(|e| e.report.passes(self.tolerance))
    }
}

/// FD loop over whole-model losses. The closure rebuilds the forward pass
/// from current parameter values and populates gradients when asked.
fn fd_check<F>(
    model: &mut KgModel<f64>,
    ids: &[ParamId],
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut KgModel<f64>, bool) -> Result<f64>,
{
    model.store.zero_grads();
    loss_fn(model, true)?;
    let analytic: Vec<(ParamId, Vec<f64>)> = ids
        .iter()
        .map(|&id| {
            let p = model.store.get(id);
            let g = p
                .grad
                .as_ref()
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; p.value.numel()]);
            (id, g)
        })
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (id, grads) in analytic {
        let n = model.store.get(id).value.numel();
        for i in 0..n {
            let original = model.store.get(id).value.data()[i];
            model.store.get_mut(id).value.data_mut()[i] = original + FD_EPS;
            let plus = loss_fn(model, false)?;
            model.store.get_mut(id).value.data_mut()[i] = original - FD_EPS;
            let minus = loss_fn(model, false)?;
            model.store.get_mut(id).value.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            let err = relative_error(grads[i], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{}[{i}]", model.store.get(id).name);
            }
        }
    }
    Ok(report)
}

/// Overwrite every parameter in the listed groups with small random
/// values so no gradient path is degenerate (the up-projection starts at
/// zero in real training, which nulls its partner's gradient).
fn randomize_trainables(model: &mut KgModel<f64>) {
    let ids: Vec<ParamId> = model.store.trainable_ids();
    for id in ids {
        let (rows, cols) = model.store.get(id).value.shape();
        let name = format!("gradsuite.{}", model.store.get(id).name);
        let data = model.seeds.normal_f64(&name, rows * cols, 0.05);
        let t = Tensor::from_f64(rows, cols, &data).expect("sized");
        model.store.load_value(id, t).expect("same shape");
    }
}

/// Build the micro model, randomize the phase-trainable parameters, and
/// check analytic gradients of the reconstruction, alignment, combined,
/// and generation losses against central finite differences.
pub fn run_micro_suite(seed: u64) -> Result<GradSuiteReport> {
    let cfg = ModelConfig::micro();
    let knowledge = synth::knowledge_corpus(1, seed)[0].clone();
    let dialogue = synth::dialogue_set(1, seed).remove(0);
    let mut texts: Vec<&str> = vec![knowledge.as_str()];
    texts.push(dialogue.context[0].1.as_str());
    texts.push(dialogue.response.as_str());
    let vocab = synth::vocab_over(cfg.m, texts.into_iter(), None);
    let mut model = KgModel::<f64>::build(cfg, vocab, seed)?;
    let beta = 0.5;

    let mut entries = Vec::new();

    // Phase 1: reconstruction, alignment, and the combined objective.
    model.store.set_phase(Phase::KnowledgeCompression);
    randomize_trainables(&mut model);
    let phase1_ids = model.store.trainable_ids();

    let k_text = knowledge.clone();
    let recon_fn = move |model: &mut KgModel<f64>, with_backward: bool| {
        let mut tape = Tape::new();
        let z = model.compress_text(&mut tape, &k_text)?;
        let seq = template::assemble_z2k(&model.vocab, &k_text)?;
        let loss = recon_loss(model, &mut tape, &seq, &z)?;
        let v = tape.value(loss).item()?;
        if with_backward {
            tape.backward(loss, &mut model.store)?;
        }
        Ok(v)
    };
    entries.push(SuiteEntry {
        loss: "recon".into(),
        report: fd_check(&mut model, &phase1_ids, recon_fn)?,
    });

    // The decoder-side reconstruction depends only on frozen weights and
    // the text, so one evaluation serves every FD perturbation.
    let k2z = template::assemble_k2z(&model.vocab, &knowledge)?;
    let z_hat = compute_z_hat(&model, &k2z)?;

    let k_text = knowledge.clone();
    let zh = z_hat.clone();
    let align_fn = move |model: &mut KgModel<f64>, with_backward: bool| {
        let mut tape = Tape::new();
        let z = model.compress_text(&mut tape, &k_text)?;
        let loss = align_loss(&mut tape, z.z, &zh, false)?;
        let v = tape.value(loss).item()?;
        if with_backward {
            tape.backward(loss, &mut model.store)?;
        }
        Ok(v)
    };
    entries.push(SuiteEntry {
        loss: "align".into(),
        report: fd_check(&mut model, &phase1_ids, align_fn)?,
    });

    let k_text = knowledge.clone();
    let zh = z_hat.clone();
    let kc_fn = move |model: &mut KgModel<f64>, with_backward: bool| {
        let mut tape = Tape::new();
        let z = model.compress_text(&mut tape, &k_text)?;
        let z2k = template::assemble_z2k(&model.vocab, &k_text)?;
        let recon = recon_loss(model, &mut tape, &z2k, &z)?;
        let align = align_loss(&mut tape, z.z, &zh, false)?;
        let loss = tape.add_scaled(recon, align, beta)?;
        let v = tape.value(loss).item()?;
        if with_backward {
            tape.backward(loss, &mut model.store)?;
        }
        Ok(v)
    };
    entries.push(SuiteEntry {
        loss: "kc".into(),
        report: fd_check(&mut model, &phase1_ids, kc_fn)?,
    });

    // Phase 2: generation loss over the adapter + projection set.
    model.store.set_phase(Phase::DialogueTuning);
    randomize_trainables(&mut model);
    let phase2_ids = model.store.trainable_ids();
    let gen_fn = move |model: &mut KgModel<f64>, with_backward: bool| {
        let mut tape = Tape::new();
        let loss = gen_loss(model, &mut tape, &dialogue)?;
        let v = tape.value(loss).item()?;
        if with_backward {
            tape.backward(loss, &mut model.store)?;
        }
        Ok(v)
    };
    entries.push(SuiteEntry {
        loss: "gen".into(),
        report: fd_check(&mut model, &phase2_ids, gen_fn)?,
    });

    Ok(GradSuiteReport {
        entries,
        tolerance: FD_TOL,
    })
}

// The suite itself is exercised end-to-end by the acceptance tests.
