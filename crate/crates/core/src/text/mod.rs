//! Tokenization, datasets, retrieval, and instruction templates.

pub mod dataset;
pub mod template;
pub mod tfidf;
pub mod vocab;

pub use dataset::{load_dialogue_dataset, load_knowledge_dataset, DialogueExample, Speaker};
pub use template::{
    assemble_dialog, assemble_k2z, assemble_z2k, join_knowledge, Role, TemplateTask,
    TokenSequence,
};
pub use tfidf::{tfidf_retrieve, TfIdfIndex};
pub use vocab::{canonicalize, split_units, Vocabulary};
