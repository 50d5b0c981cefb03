//! TF-IDF retrieval over a small knowledge corpus.
//!
//! Weights are tf · (ln((1+|D|)/(1+df)) + 1), L2-normalized; queries are
//! scored by cosine similarity with ties broken by corpus order.

use crate::error::{Error, Result};
use crate::text::vocab::split_units;
use std::collections::BTreeMap;

fn term_counts(text: &str) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    for unit in split_units(&text.to_lowercase()) {
        *counts.entry(unit).or_insert(0.0) += 1.0;
    }
    counts
}

#[derive(Debug, Clone)]
pub struct TfIdfIndex {
    doc_vectors: Vec<BTreeMap<String, f64>>,
    doc_freq: BTreeMap<String, f64>,
    corpus_size: usize,
}

impl TfIdfIndex {
    pub fn build(corpus: &[String]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Retrieval("empty knowledge corpus".into()));
        }
        let mut doc_freq: BTreeMap<String, f64> = BTreeMap::new();
        let raw: Vec<BTreeMap<String, f64>> = corpus.iter().map(|d| term_counts(d)).collect();
        for counts in &raw {
            for term in counts.keys() {
                *doc_freq.entry(term.clone()).or_insert(0.0) += 1.0;
            }
        }
        let n = corpus.len();
        let idx = TfIdfIndex {
            doc_vectors: Vec::new(),
            doc_freq,
            corpus_size: n,
        };
        let doc_vectors = raw.into_iter().map(|c| idx.weigh(c)).collect();
        Ok(TfIdfIndex {
            doc_vectors,
            ..idx
        })
    }

    fn idf(&self, term: &str) -> f64 {
        let df = self.doc_freq.get(term).copied().unwrap_or(0.0);
        ((1.0 + self.corpus_size as f64) / (1.0 + df)).ln() + 1.0
    }

    fn weigh(&self, counts: BTreeMap<String, f64>) -> BTreeMap<String, f64> {
        let mut vec: BTreeMap<String, f64> = counts
            .into_iter()
            .map(|(term, tf)| {
                let w = tf * self.idf(&term);
                (term, w)
            })
            .collect();
        let norm: f64 = vec.values().map(|w| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for w in vec.values_mut() {
                *w /= norm;
            }
        }
        vec
    }

    fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
        // both sides are already L2-normalized
        a.iter()
            .filter_map(|(term, w)| b.get(term).map(|v| w * v))
            .sum()
    }

    /// Indices of the top-n documents for the query, ties broken by
    /// corpus order. Returns min(n, corpus size) entries.
    pub fn retrieve(&self, query: &str, n: usize) -> Vec<usize> {
        let qvec = self.weigh(term_counts(query));
        let mut scored: Vec<(usize, f64)> = self
            .doc_vectors
            .iter()
            .enumerate()
            .map(|(i, d)| (i, Self::cosine(&qvec, d)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        scored.into_iter().take(n).map(|(i, _)| i).collect()
    }
}

/// Top-n knowledge pieces for a context, by TF-IDF cosine.
pub fn tfidf_retrieve(context_text: &str, corpus: &[String], n: usize) -> Result<Vec<String>> {
    let index = TfIdfIndex::build(corpus)?;
    Ok(index
        .retrieve(context_text, n)
        .into_iter()
        .map(|i| corpus[i].clone())
        .collect())
}
