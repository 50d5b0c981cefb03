//! Automatic generation metrics: unigram F1, averaged BLEU-1..4 with
//! brevity penalty, averaged ROUGE-1/2/L, and the dataset runner.

use crate::config::DecodeConfig;
use crate::error::{Error, Result};
use crate::infer::generate;
use crate::model::KgModel;
use crate::tensor::Scalar;
use crate::text::dataset::DialogueExample;
use crate::text::vocab::split_units;
use serde::Serialize;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

/// Metric tokenization: lowercase word/punctuation units.
pub fn metric_tokens(text: &str) -> Vec<String> {
    split_units(&text.to_lowercase())
}

fn counts<T: std::hash::Hash + Eq + Clone>(items: &[T]) -> HashMap<T, usize> {
    let mut map = HashMap::new();
    for item in items {
        *map.entry(item.clone()).or_insert(0) += 1;
    }
    map
}

fn clipped_overlap<T: std::hash::Hash + Eq + Clone>(cand: &[T], reference: &[T]) -> usize {
    let ref_counts = counts(reference);
    let cand_counts = counts(cand);
    cand_counts
        .into_iter()
        .map(|(item, c)| c.min(ref_counts.get(&item).copied().unwrap_or(0)))
        .sum()
}

fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Harmonic mean of clipped unigram precision and recall; 0 when either
/// side is empty.
pub fn unigram_f1(candidate: &str, reference: &str) -> f64 {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let overlap = clipped_overlap(&c, &r) as f64;
    f_measure(overlap / c.len() as f64, overlap / r.len() as f64)
}

fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    tokens.windows(n).map(|w| w.to_vec()).collect()
}

/// Corpus BLEU-k for cumulative k = 1..=4, then the mean of the four.
/// Clipped n-gram counts pool over the corpus before the precision
/// quotient; the brevity penalty uses total lengths.
pub fn bleu_avg(candidates: &[String], references: &[String]) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::Eval(format!(
            "need matched non-empty corpora, got {} candidates and {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (c, r) in candidates.iter().zip(references.iter()) {
        let ct = metric_tokens(c);
        let rt = metric_tokens(r);
        cand_len += ct.len();
        ref_len += rt.len();
        for n in 1..=4 {
            let cn = ngrams(&ct, n);
            let rn = ngrams(&rt, n);
            matches[n - 1] += clipped_overlap(&cn, &rn);
            totals[n - 1] += cn.len();
        }
    }
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let precisions: Vec<f64> = (0..4)
        .map(|i| {
            if totals[i] == 0 {
                0.0
            } else {
                matches[i] as f64 / totals[i] as f64
            }
        })
        .collect();
    let mut sum = 0.0;
    for k in 1..=4usize {
        let score = if precisions[..k].iter().any(|&p| p == 0.0) {
            0.0
        } else {
            let log_mean: f64 =
                precisions[..k].iter().map(|p| p.ln()).sum::<f64>() / k as f64;
            bp * log_mean.exp()
        };
        sum += score;
    }
    Ok(sum / 4.0)
}

/// Sentence-level variant: the corpus formula applied to a single pair.
pub fn bleu_avg_sentence(candidate: &str, reference: &str) -> f64 {
    bleu_avg(
        std::slice::from_ref(&candidate.to_string()),
        std::slice::from_ref(&reference.to_string()),
    )
    .unwrap_or(0.0)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            table[i][j] = if a[i - 1] == b[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    table[a.len()][b.len()]
}

fn rouge_n(cand: &[String], reference: &[String], n: usize) -> f64 {
    let cn = ngrams(cand, n);
    let rn = ngrams(reference, n);
    if cn.is_empty() || rn.is_empty() {
        return 0.0;
    }
    let overlap = clipped_overlap(&cn, &rn) as f64;
    f_measure(overlap / cn.len() as f64, overlap / rn.len() as f64)
}

/// Mean of the ROUGE-1, ROUGE-2, and ROUGE-L F-measures.
pub fn rouge_avg(candidate: &str, reference: &str) -> f64 {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let r1 = rouge_n(&c, &r, 1);
    let r2 = rouge_n(&c, &r, 2);
    let lcs = lcs_len(&c, &r) as f64;
    let rl = f_measure(lcs / c.len() as f64, lcs / r.len() as f64);
    (r1 + r2 + rl) / 3.0
}

#[derive(Debug, Clone, Serialize)]
pub struct ExampleScore {
    pub context: String,
    pub reference: String,
    pub candidate: String,
    pub f1: f64,
    pub bleu: f64,
    pub rouge: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub f1: f64,
    pub bleu: f64,
    pub rouge: f64,
    pub example_count: usize,
    #[serde(skip)]
    pub per_example: Vec<ExampleScore>,
}

/// Generate a response per example and score the three metrics. F1 and
/// ROUGE means are arithmetic over examples; BLEU is corpus-level unless
/// `sentence_bleu` is set.
pub fn evaluate_dataset<S: Scalar>(
    model: &KgModel<S>,
    examples: &[DialogueExample],
    decode: &DecodeConfig,
    sentence_bleu: bool,
) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::Eval("empty evaluation set".into()));
    }
    let mut per_example = Vec::with_capacity(examples.len());
    let mut candidates = Vec::with_capacity(examples.len());
    let mut references = Vec::with_capacity(examples.len());
    for example in examples {
        let result = generate(model, &example.context, &example.knowledge, decode, true)?;
        let context_text = example
            .context
            .iter()
            .map(|(_, t)| t.as_str())
            .collect::<Vec<_>>()
            .join(" | ");
        per_example.push(ExampleScore {
            context: context_text,
            reference: example.response.clone(),
            candidate: result.text.clone(),
            f1: unigram_f1(&result.text, &example.response),
            bleu: bleu_avg_sentence(&result.text, &example.response),
            rouge: rouge_avg(&result.text, &example.response),
        });
        candidates.push(result.text);
        references.push(example.response.clone());
    }
    let n = per_example.len() as f64;
    let f1 = per_example.iter().map(|e| e.f1).sum::<f64>() / n;
    let rouge = per_example.iter().map(|e| e.rouge).sum::<f64>() / n;
    let bleu = if sentence_bleu {
        per_example.iter().map(|e| e.bleu).sum::<f64>() / n
    } else {
        bleu_avg(&candidates, &references)?
    };
    Ok(MetricReport {
        f1,
        bleu,
        rouge,
        example_count: per_example.len(),
        per_example,
    })
}

/// Corpus means plus provenance, as a single JSON file.
pub fn write_report(path: &Path, report: &MetricReport, config_hash: &str) -> Result<()> {
    let body = serde_json::json!({
        "f1": report.f1,
        "bleu": report.bleu,
        "rouge": report.rouge,
        "n": report.example_count,
        "config_hash": config_hash,
    });
    std::fs::write(path, serde_json::to_string_pretty(&body).expect("serializable"))?;
    Ok(())
}

/// One JSON object per example.
pub fn write_trace(path: &Path, report: &MetricReport) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for e in &report.per_example {
        writeln!(f, "{}", serde_json::to_string(e).expect("serializable"))?;
    }
    Ok(())
}
