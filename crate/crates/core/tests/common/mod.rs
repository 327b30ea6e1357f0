#![allow(dead_code)]

use dim_core::embedding::EmbeddingConfig;
use dim_core::model::{ModelConfig, Variant};
use dim_core::text::{
    build_vocab, tokenize_examples, DialogueExample, ExampleInput, Limits, PersonaSide,
    PersonaVersion, SentenceBlock, Vocab, PAD,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 24] = [
    "i", "love", "my", "dog", "cats", "run", "every", "morning", "you", "like", "pizza", "red",
    "car", "work", "at", "a", "bank", "play", "guitar", "on", "weekends", "blue", "sky", "tea",
];

pub fn sentence(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let n = rng.gen_range(lo..=hi);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Random dialogues with a self persona and `candidates` distinct candidates.
pub fn synthetic_corpus(n: usize, candidates: usize, seed: u64) -> Vec<DialogueExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let turns = rng.gen_range(1..=3);
            let context = (0..turns).map(|_| sentence(&mut rng, 2, 5)).collect();
            let persona = (0..3).map(|_| sentence(&mut rng, 2, 4)).collect();
            let mut cands: Vec<String> = Vec::new();
            while cands.len() < candidates {
                let s = sentence(&mut rng, 1, 5);
                if !cands.contains(&s) {
                    cands.push(s);
                }
            }
            DialogueExample {
                context,
                persona,
                candidates: cands,
                positive_index: rng.gen_range(0..candidates),
                persona_side: PersonaSide::Own,
                persona_version: PersonaVersion::Original,
            }
        })
        .collect()
}

pub fn micro_limits() -> Limits {
    Limits {
        max_chars: 6,
        max_utterance_words: 6,
        max_utterances: 3,
        max_response_words: 6,
        max_profile_words: 5,
        max_profiles: 3,
    }
}

/// Word width 8, two units per LSTM direction.
pub fn micro_config(variant: Variant, vocab: &Vocab, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        embedding: EmbeddingConfig {
            pretrained_dim: 2,
            task_dim: 2,
            char_windows: vec![2, 3],
            char_filters: 2,
            char_embed_dim: 2,
            freeze_pretrained: false,
            freeze_task: false,
        },
        hidden: 2,
        mlp_hidden: 4,
        vocab_size: vocab.words.len(),
        char_vocab_size: vocab.chars.len(),
        seed,
    }
}

pub fn vocab_of(examples: &[DialogueExample]) -> Vocab {
    build_vocab(examples, 1).unwrap()
}

pub fn inputs(examples: &[DialogueExample], vocab: &Vocab, limits: &Limits) -> Vec<ExampleInput> {
    let group: Vec<(usize, &DialogueExample)> = examples.iter().enumerate().collect();
    let batch = tokenize_examples(&group, vocab, limits).unwrap();
    (0..batch.len()).map(|b| batch.example(b).unwrap()).collect()
}

/// Moves every parameter off its structured initial value (zero biases put
/// ReLUs exactly on their kink, where finite differences are meaningless).
pub fn jitter(model: &mut dim_core::model::Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params().names().map(String::from).collect();
    for name in names {
        for v in model.params_mut().get_mut(&name).unwrap().data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

/// `block` with `extra_words` pad slots appended to every sentence and
/// `extra_sentences` all-pad sentences appended at the end.
pub fn pad_block(block: &SentenceBlock, extra_words: usize, extra_sentences: usize) -> SentenceBlock {
    let (len, mc) = (block.len, block.max_chars);
    let new_len = len + extra_words;
    let count = block.count + extra_sentences;
    let mut out = SentenceBlock {
        ids: vec![PAD; count * new_len],
        chars: vec![PAD; count * new_len * mc],
        word_mask: vec![0.0; count * new_len],
        count,
        len: new_len,
        max_chars: mc,
    };
    for s in 0..block.count {
        out.ids[s * new_len..s * new_len + len].copy_from_slice(&block.ids[s * len..(s + 1) * len]);
        out.word_mask[s * new_len..s * new_len + len]
            .copy_from_slice(&block.word_mask[s * len..(s + 1) * len]);
        out.chars[s * new_len * mc..(s * new_len + len) * mc]
            .copy_from_slice(&block.chars[s * len * mc..(s + 1) * len * mc]);
    }
    out
}

pub fn pad_input(ex: &ExampleInput, extra_words: usize, extra_sentences: usize) -> ExampleInput {
    ExampleInput {
        example_id: ex.example_id,
        context: pad_block(&ex.context, extra_words, extra_sentences),
        persona: ex.persona.as_ref().map(|p| pad_block(p, extra_words, extra_sentences)),
        candidates: pad_block(&ex.candidates, extra_words, 0),
        positive_index: ex.positive_index,
    }
}
