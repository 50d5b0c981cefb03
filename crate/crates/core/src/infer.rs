//! Autoregressive response generation conditioned on the dialogue context
//! and the compressed knowledge.

use crate::config::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::{CompressedKnowledge, KgModel};
use crate::tensor::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::text::dataset::Speaker;
use crate::text::template;
use crate::text::vocab::EOT;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct GenerationResult {
    /// Detokenized assistant span, end token excluded.
    pub text: String,
    /// Every sampled token, end token included when one was produced.
    pub token_ids: Vec<u32>,
    pub prompt_len: usize,
}

/// Pick the next token from a logits row. Control tokens (padding, begin
/// marker, role headers, vector markers) never leave the sampler; the end
/// token stays available as the stop signal.
fn pick_token<S: Scalar>(
    model: &KgModel<S>,
    row: &[S],
    cfg: &DecodeConfig,
    rng: &mut impl Rng,
) -> u32 {
    let allowed = |id: u32| -> bool { id == EOT || !model.vocab.is_special(id) };
    if cfg.greedy {
        let mut best: Option<(u32, f64)> = None;
        for (id, v) in row.iter().enumerate() {
            let id = id as u32;
            if !allowed(id) {
                continue;
            }
            let v = v.as_f64();
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((id, v)),
            }
        }
        best.expect("vocabulary has non-special tokens").0
    } else {
        let t = cfg.temperature;
        let scaled: Vec<(u32, f64)> = row
            .iter()
            .enumerate()
            .filter(|(id, _)| allowed(*id as u32))
            .map(|(id, v)| (id as u32, v.as_f64() / t))
            .collect();
        let max = scaled.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scaled.iter().map(|(_, v)| (v - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut draw = rng.gen_range(0.0..1.0) * total;
        for ((id, _), w) in scaled.iter().zip(weights.iter()) {
            draw -= w;
            if draw <= 0.0 {
                return *id;
            }
        }
        scaled.last().expect("non-empty").0
    }
}

/// Compress the knowledge once, assemble the open dialogue template, and
/// decode until the end token or the budget. With `use_cache` each step
/// feeds only the new token through per-layer key/value caches; otherwise
/// every step recomputes the whole sequence.
pub fn generate<S: Scalar>(
    model: &KgModel<S>,
    context: &[(Speaker, String)],
    knowledge: &[String],
    cfg: &DecodeConfig,
    use_cache: bool,
) -> Result<GenerationResult> {
    cfg.validate()?;
    let joined = template::join_knowledge(knowledge);
    let z_values = {
        let mut tape = Tape::new();
        let z = model.compress_text(&mut tape, &joined)?;
        (
            tape.value(z.z).clone(),
            tape.value(z.z_bar).clone(),
        )
    };

    let max_positions = model.decoder.config().max_positions;
    if cfg.max_new_tokens >= max_positions {
        return Err(Error::config(format!(
            "max_new_tokens {} exceeds the {max_positions}-position window",
            cfg.max_new_tokens
        )));
    }
    let budget = max_positions - cfg.max_new_tokens;
    let prompt = template::assemble_dialog(&model.vocab, context, None, budget)?;
    let prompt_len = prompt.len();

    let mut rng = model
        .seeds
        .stream(&format!("decode.{}", cfg.seed));
    let mut sampled: Vec<u32> = Vec::new();

    let constants = |tape: &mut Tape<S>| -> Result<CompressedKnowledge> {
        let z = tape.constant(z_values.0.clone());
        let z_bar = tape.constant(z_values.1.clone());
        Ok(CompressedKnowledge { z, z_bar })
    };

    if use_cache {
        let mut cache = model.decoder.new_cache::<S>();
        let mut tape = Tape::new();
        let z = constants(&mut tape)?;
        let out = model.decoder.forward_chunk(
            &mut tape,
            &model.store,
            &prompt.ids,
            &prompt.z_positions,
            Some(&z),
            true,
            &mut cache,
        )?;
        let mut last_row: Vec<S> =
            tape.value(out.logits).row_slice(prompt_len - 1).to_vec();
        loop {
            let next = pick_token(model, &last_row, cfg, &mut rng);
            sampled.push(next);
            if next == EOT || sampled.len() >= cfg.max_new_tokens {
                break;
            }
            let mut step_tape = Tape::new();
            let z = constants(&mut step_tape)?;
            let out = model.decoder.forward_chunk(
                &mut step_tape,
                &model.store,
                &[next],
                &[],
                Some(&z),
                true,
                &mut cache,
            )?;
            last_row = step_tape.value(out.logits).row_slice(0).to_vec();
        }
    } else {
        let mut ids = prompt.ids.clone();
        loop {
            let mut tape = Tape::new();
            let z = constants(&mut tape)?;
            let mut cache = model.decoder.new_cache::<S>();
            let out = model.decoder.forward_chunk(
                &mut tape,
                &model.store,
                &ids,
                &prompt.z_positions,
                Some(&z),
                true,
                &mut cache,
            )?;
            let row: Vec<S> = tape.value(out.logits).row_slice(ids.len() - 1).to_vec();
            let next = pick_token(model, &row, cfg, &mut rng);
            sampled.push(next);
            ids.push(next);
            if next == EOT || sampled.len() >= cfg.max_new_tokens {
                break;
            }
        }
    }

    let visible: Vec<u32> = sampled.iter().copied().filter(|&id| id != EOT).collect();
    Ok(GenerationResult {
        text: model.vocab.decode(&visible),
        token_ids: sampled,
        prompt_len,
    })
}

/// Logit values the sampler sees, for probing the sampling distribution.
pub fn last_logits<S: Scalar>(
    model: &KgModel<S>,
    context: &[(Speaker, String)],
    knowledge: &[String],
) -> Result<Tensor<S>> {
    let joined = template::join_knowledge(knowledge);
    let mut tape = Tape::new();
    let z = model.compress_text(&mut tape, &joined)?;
    let prompt = template::assemble_dialog(
        &model.vocab,
        context,
        None,
        model.decoder.config().max_positions,
    )?;
    let out = model
        .decoder
        .forward_logits(&mut tape, &model.store, &prompt, Some(&z), true)?;
    let rows = tape.value(out.logits);
    let last = rows.row_slice(rows.rows() - 1).to_vec();
    Tensor::new(1, last.len(), last)
}
