//! Corpus parsing, tokenization, vocabularies and padded batches.

mod batch;
mod corpus;
mod tokenize;
mod vocab;

pub use batch::{
    batchify, batchify_ordered, masks_consistent, tokenize_examples, truncate_example, Batches,
    ExampleInput, Grid, Limits, SentenceBlock, TokenizedBatch, TruncatedExample,
};
pub use corpus::{
    load_corpus, parse_jsonl, parse_personachat, parse_personachat_str, write_jsonl,
    DialogueExample, PersonaSide, PersonaVersion,
};
pub use tokenize::tokenize;
pub use vocab::{build_vocab, TokenTable, Vocab, PAD, PAD_TOKEN, UNK, UNK_TOKEN};
