//! Word-level vocabulary with byte fallback and the reserved control
//! tokens: pad/bos/eot, role headers, and the `m` compressed-vector
//! markers `<Z_1>…<Z_m>`.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOT: u32 = 2;
pub const HDR_SYSTEM: u32 = 3;
pub const HDR_USER: u32 = 4;
pub const HDR_ASSISTANT: u32 = 5;
/// First marker id; the m marker ids are contiguous from here.
pub const Z_BASE: u32 = 6;

const FIXED_TOKENS: [&str; 6] = ["<pad>", "<|bos|>", "<|eot|>", "<|system|>", "<|user|>", "<|assistant|>"];

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    m: usize,
}

impl Vocabulary {
    /// Reserved + byte-fallback skeleton; words appended afterwards.
    fn skeleton(m: usize) -> Self {
        let mut tokens: Vec<String> = FIXED_TOKENS.iter().map(|s| s.to_string()).collect();
        for i in 1..=m {
            tokens.push(format!("<Z_{i}>"));
        }
        for b in 0..=255u8 {
            tokens.push(format!("<0x{b:02X}>"));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index, m }
    }

    /// Build from a corpus: unique word units in first-occurrence order,
    /// optionally capped.
    pub fn build<'a>(
        m: usize,
        corpus: impl Iterator<Item = &'a str>,
        max_words: Option<usize>,
    ) -> Self {
        let mut v = Vocabulary::skeleton(m);
        for text in corpus {
            for unit in split_units(text) {
                if let Some(cap) = max_words {
                    if v.tokens.len() >= v.word_base() + cap {
                        return v;
                    }
                }
                v.intern(&unit);
            }
        }
        v
    }

    fn intern(&mut self, unit: &str) {
        if !self.index.contains_key(unit) {
            self.index.insert(unit.to_string(), self.tokens.len() as u32);
            self.tokens.push(unit.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn marker_count(&self) -> usize {
        self.m
    }

    /// Id of `<Z_{i+1}>` for 0-based i.
    pub fn z_id(&self, i: usize) -> u32 {
        debug_assert!(i < self.m);
        Z_BASE + i as u32
    }

    fn byte_base(&self) -> usize {
        FIXED_TOKENS.len() + self.m
    }

    fn word_base(&self) -> usize {
        self.byte_base() + 256
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.byte_base()
    }

    pub fn is_marker(&self, id: u32) -> bool {
        id >= Z_BASE && (id as usize) < Z_BASE as usize + self.m
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Word-level encoding with byte fallback; total on any input.
    /// Adjacent fallback units get a space byte between them so unit
    /// boundaries survive decoding.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let byte_base = self.byte_base();
        let mut ids: Vec<u32> = Vec::new();
        let mut last_was_bytes = false;
        for unit in split_units(text) {
            match self.index.get(unit.as_str()) {
                Some(&id) => {
                    ids.push(id);
                    last_was_bytes = false;
                }
                None => {
                    if last_was_bytes {
                        ids.push((byte_base + b' ' as usize) as u32);
                    }
                    for b in unit.bytes() {
                        ids.push((byte_base + b as usize) as u32);
                    }
                    last_was_bytes = true;
                }
            }
        }
        ids
    }

    /// Units joined by single spaces; byte runs reassembled first.
    pub fn decode(&self, ids: &[u32]) -> String {
        let byte_base = self.byte_base() as u32;
        let word_base = self.word_base() as u32;
        let mut units: Vec<String> = Vec::new();
        let mut pending_bytes: Vec<u8> = Vec::new();
        for &id in ids {
            if id >= byte_base && id < word_base {
                pending_bytes.push((id - byte_base) as u8);
                continue;
            }
            if !pending_bytes.is_empty() {
                units.push(String::from_utf8_lossy(&pending_bytes).into_owned());
                pending_bytes.clear();
            }
            if let Some(tok) = self.token(id) {
                units.push(tok.to_string());
            }
        }
        if !pending_bytes.is_empty() {
            units.push(String::from_utf8_lossy(&pending_bytes).into_owned());
        }
        units.join(" ")
    }

    /// Newline-delimited token file, reserved tokens first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path, m: usize) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut v = Vocabulary::skeleton(m);
        let expected_reserved = v.word_base();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let token = line?;
            if i < expected_reserved {
                if v.tokens[i] != token {
                    return Err(Error::Load(format!(
                        "vocabulary reserved slot {i} holds {token:?}, expected {:?}",
                        v.tokens[i]
                    )));
                }
            } else {
                v.intern(&token);
            }
        }
        Ok(v)
    }
}

/// Split into word and punctuation units. Word characters are
/// alphanumerics plus `_` and `'`; everything else that is not
/// whitespace becomes a single-character unit.
pub fn split_units(text: &str) -> Vec<String> {
    let mut units = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c == '_' || c == '\'' {
            word.push(c);
        } else {
            if !word.is_empty() {
                units.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                units.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        units.push(word);
    }
    units
}

/// Whitespace-canonical form: units joined by single spaces.
pub fn canonicalize(text: &str) -> String {
    split_units(text).join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_over(texts: &[&str]) -> Vocabulary {
        Vocabulary::build(4, texts.iter().copied(), None)
    }

    #[test]
    fn empty_text_roundtrips_to_empty() {
        let v = vocab_over(&[]);
        let ids = v.encode("");
        assert!(ids.is_empty());
        assert_eq!(v.decode(&ids), "");
    }

    #[test]
    fn two_word_roundtrip_identity() {
        let v = vocab_over(&["hello world"]);
        let ids = v.encode("hello world");
        assert_eq!(ids.len(), 2);
        assert_eq!(v.decode(&ids), "hello world");
    }

    #[test]
    fn unknown_words_fall_back_to_bytes() {
        let v = vocab_over(&["known"]);
        let ids = v.encode("zebra");
        assert_eq!(ids.len(), 5);
        assert_eq!(v.decode(&ids), "zebra");
        // id-level roundtrip
        assert_eq!(v.encode(&v.decode(&ids)), ids);
    }

    #[test]
    fn random_printable_strings_roundtrip_under_canonical_whitespace() {
        // Scripted comparison over 100 generated strings.
        let mut state = 0x12345678u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as u32
        };
        let v = vocab_over(&["the quick brown fox"]);
        for _ in 0..100 {
            let len = (next() % 40) as usize;
            let s: String = (0..len)
                .map(|_| {
                    let c = (next() % 95 + 32) as u8 as char;
                    c
                })
                .collect();
            let canonical = canonicalize(&s);
            let ids = v.encode(&s);
            assert_eq!(v.decode(&ids), canonical, "input {s:?}");
            // and once canonical, the roundtrip is exact
            assert_eq!(v.decode(&v.encode(&canonical)), canonical);
        }
    }

    #[test]
    fn reserved_ids_are_dense_and_markers_contiguous() {
        let v = vocab_over(&["a"]);
        assert_eq!(v.id_of("<pad>"), Some(PAD));
        assert_eq!(v.id_of("<|bos|>"), Some(BOS));
        assert_eq!(v.id_of("<|eot|>"), Some(EOT));
        assert_eq!(v.id_of("<Z_1>"), Some(Z_BASE));
        assert_eq!(v.id_of("<Z_4>"), Some(Z_BASE + 3));
        assert!(v.is_marker(Z_BASE + 3));
        assert!(!v.is_marker(Z_BASE + 4));
        for i in 0..v.len() as u32 {
            assert!(v.token(i).is_some());
        }
    }

    #[test]
    fn save_load_preserves_everything() {
        let dir = std::env::temp_dir().join("knack_vocab_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        let v = vocab_over(&["alpha beta gamma"]);
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path, 4).unwrap();
        assert_eq!(loaded.len(), v.len());
        assert_eq!(loaded.encode("alpha gamma"), v.encode("alpha gamma"));
        std::fs::remove_file(&path).ok();
    }
}
