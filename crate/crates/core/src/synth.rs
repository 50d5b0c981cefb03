//! Deterministic toy corpora for tests, probes, and demos. Word pools are
//! small enough that a full corpus stays under 200 vocabulary types.

use crate::error::Result;
use crate::text::dataset::{DialogueExample, Speaker};
use crate::text::template;
use crate::text::Vocabulary;
use std::io::Write;
use std::path::Path;

const ADJECTIVES: [&str; 8] = [
    "red", "old", "quiet", "bright", "heavy", "small", "warm", "swift",
];
const SUBJECTS: [&str; 12] = [
    "fox", "river", "engine", "garden", "clock", "signal", "mill", "comet",
    "harbor", "lantern", "meadow", "glacier",
];
const VERBS: [&str; 8] = [
    "feeds", "turns", "follows", "guards", "crosses", "carries", "warms", "finds",
];
const OBJECTS: [&str; 12] = [
    "valley", "wheel", "bridge", "cellar", "tower", "furnace", "orchard", "channel",
    "market", "summit", "archive", "coast",
];

fn pick<'a>(pool: &[&'a str], index: usize, salt: usize) -> &'a str {
    pool[(index * 7 + salt) % pool.len()]
}

/// `n` distinct knowledge sentences with pool entries drawn from the
/// seeded stream; duplicates are skipped.
pub fn knowledge_corpus(n: usize, seed: u64) -> Vec<String> {
    let tree = crate::rng::SeedTree::new(seed);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    let mut round = 0usize;
    while out.len() < n {
        let need = n - out.len();
        let draws = tree.uniform_u32(&format!("synth.knowledge.{round}"), need * 4, u32::MAX);
        for chunk in draws.chunks(4) {
            let text = format!(
                "the {} {} {} the {}",
                ADJECTIVES[chunk[0] as usize % ADJECTIVES.len()],
                SUBJECTS[chunk[1] as usize % SUBJECTS.len()],
                VERBS[chunk[2] as usize % VERBS.len()],
                OBJECTS[chunk[3] as usize % OBJECTS.len()],
            );
            if seen.insert(text.clone()) && out.len() < n {
                out.push(text);
            }
        }
        round += 1;
    }
    out
}

/// `n` single-turn dialogues whose responses restate their knowledge.
pub fn dialogue_set(n: usize, seed: u64) -> Vec<DialogueExample> {
    let salt = seed as usize;
    (0..n)
        .map(|i| {
            let subject = pick(&SUBJECTS, i, salt + 5);
            let fact = format!(
                "the {subject} {} the {}",
                pick(&VERBS, i, salt + 1),
                pick(&OBJECTS, i, salt + 2),
            );
            DialogueExample {
                context: vec![(
                    Speaker::User,
                    format!("tell me about the {subject}"),
                )],
                knowledge: vec![fact.clone()],
                response: fact,
            }
        })
        .collect()
}

/// Vocabulary covering the template prompts plus the given texts.
pub fn vocab_over<'a>(
    m: usize,
    texts: impl Iterator<Item = &'a str>,
    max_words: Option<usize>,
) -> Vocabulary {
    let prompts = [
        template::SYSTEM_PROMPT,
        template::K2Z_PROMPT,
        template::Z2K_PROMPT,
        "tell me about the",
    ];
    let all: Vec<&str> = prompts.into_iter().chain(texts).collect();
    Vocabulary::build(m, all.into_iter(), max_words)
}

/// Vocabulary for a dialogue set, covering contexts, knowledge, responses.
pub fn vocab_for_dialogues(m: usize, examples: &[DialogueExample]) -> Vocabulary {
    let mut texts: Vec<&str> = Vec::new();
    for e in examples {
        for (_, t) in &e.context {
            texts.push(t);
        }
        for k in &e.knowledge {
            texts.push(k);
        }
        texts.push(&e.response);
    }
    vocab_over(m, texts.into_iter(), None)
}

pub fn write_knowledge_file(path: &Path, texts: &[String]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for t in texts {
        writeln!(f, "{}", serde_json::json!({ "text": t }))?;
    }
    Ok(())
}

pub fn write_dialogue_file(path: &Path, examples: &[DialogueExample]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for e in examples {
        let context: Vec<_> = e
            .context
            .iter()
            .map(|(s, t)| {
                serde_json::json!({
                    "speaker": match s { Speaker::User => "user", Speaker::Assistant => "assistant" },
                    "text": t,
                })
            })
            .collect();
        writeln!(
            f,
            "{}",
            serde_json::json!({
                "context": context,
                "knowledge": e.knowledge,
                "response": e.response,
            })
        )?;
    }
    Ok(())
}
