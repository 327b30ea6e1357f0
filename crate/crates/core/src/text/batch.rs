use serde::{Deserialize, Serialize};

use super::vocab::{PAD, UNK_TOKEN};
use super::{tokenize, DialogueExample, Vocab};
use crate::error::{Error, Result};

/// Truncation limits for one batch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub max_chars: usize,
    pub max_utterance_words: usize,
    pub max_utterances: usize,
    pub max_response_words: usize,
    pub max_profile_words: usize,
    pub max_profiles: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_chars: 18,
            max_utterance_words: 20,
            max_utterances: 15,
            max_response_words: 20,
            max_profile_words: 15,
            max_profiles: 5,
        }
    }
}

impl Limits {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.max_chars,
            self.max_utterance_words,
            self.max_utterances,
            self.max_response_words,
            self.max_profile_words,
            self.max_profiles,
        ];
        if all.contains(&0) {
            return Err(Error::Config(format!("limits must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Dense row-major grid of ids or mask bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy + Default> Grid<T> {
    fn new(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::default(); n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Contiguous cells under a leading index prefix.
    pub fn block(&self, prefix: &[usize]) -> &[T] {
        let inner: usize = self.shape[prefix.len()..].iter().product();
        let mut full = prefix.to_vec();
        full.resize(self.shape.len(), 0);
        let start = self.offset(&full);
        &self.data[start..start + inner]
    }
}

/// Token lists of one example after every truncation rule has been applied.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedExample {
    pub context: Vec<Vec<String>>,
    pub persona: Vec<Vec<String>>,
    pub candidates: Vec<Vec<String>>,
    pub positive_index: usize,
}

fn sentence(text: &str, max_words: usize) -> Vec<String> {
    let mut tokens = tokenize(text);
    tokens.truncate(max_words);
    if tokens.is_empty() {
        tokens.push(UNK_TOKEN.to_string());
    }
    tokens
}

/// Keeps the last utterances of the context and the leading words of every
/// sentence. Empty sentences become a single unk token.
pub fn truncate_example(ex: &DialogueExample, limits: &Limits) -> Result<TruncatedExample> {
    ex.validate()?;
    let skip = ex.context.len().saturating_sub(limits.max_utterances);
    Ok(TruncatedExample {
        context: ex.context[skip..]
            .iter()
            .map(|u| sentence(u, limits.max_utterance_words))
            .collect(),
        persona: ex
            .persona
            .iter()
            .take(limits.max_profiles)
            .map(|p| sentence(p, limits.max_profile_words))
            .collect(),
        candidates: ex
            .candidates
            .iter()
            .map(|c| sentence(c, limits.max_response_words))
            .collect(),
        positive_index: ex.positive_index,
    })
}

/// Padded id grids and masks for a group of examples.
///
/// Grids: context `[B x U x T]` (chars `[B x U x T x W]`), persona
/// `[B x P x Tp]`, candidates `[B x C x Tr]`. Padded cells hold id 0 and mask 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedBatch {
    pub example_ids: Vec<usize>,
    pub context_ids: Grid<u32>,
    pub context_char_ids: Grid<u32>,
    pub context_word_mask: Grid<u8>,
    pub context_utterance_mask: Grid<u8>,
    pub persona_ids: Grid<u32>,
    pub persona_char_ids: Grid<u32>,
    pub persona_word_mask: Grid<u8>,
    pub persona_profile_mask: Grid<u8>,
    pub candidate_ids: Grid<u32>,
    pub candidate_char_ids: Grid<u32>,
    pub candidate_word_mask: Grid<u8>,
    pub candidate_mask: Grid<u8>,
    pub positive_index: Vec<usize>,
}

struct SentenceGrids {
    ids: Grid<u32>,
    chars: Grid<u32>,
    word_mask: Grid<u8>,
    sentence_mask: Grid<u8>,
}

impl SentenceGrids {
    fn new(batch: usize, sentences: usize, words: usize, chars: usize) -> Self {
        Self {
            ids: Grid::new(vec![batch, sentences, words]),
            chars: Grid::new(vec![batch, sentences, words, chars]),
            word_mask: Grid::new(vec![batch, sentences, words]),
            sentence_mask: Grid::new(vec![batch, sentences]),
        }
    }

    fn fill(&mut self, b: usize, sentences: &[Vec<String>], vocab: &Vocab) {
        let max_chars = self.chars.shape()[3];
        for (s, tokens) in sentences.iter().enumerate() {
            self.sentence_mask.set(&[b, s], 1);
            for (w, tok) in tokens.iter().enumerate() {
                self.ids.set(&[b, s, w], vocab.word_id(tok) as u32);
                self.word_mask.set(&[b, s, w], 1);
                for (c, id) in vocab.char_ids(tok).into_iter().take(max_chars).enumerate() {
                    self.chars.set(&[b, s, w, c], id as u32);
                }
            }
        }
    }
}

/// Tokenizes, truncates, and pads `examples` (paired with their corpus ids)
/// into one batch.
pub fn tokenize_examples(
    examples: &[(usize, &DialogueExample)],
    vocab: &Vocab,
    limits: &Limits,
) -> Result<TokenizedBatch> {
    limits.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let truncated: Vec<TruncatedExample> = examples
        .iter()
        .map(|(_, ex)| truncate_example(ex, limits))
        .collect::<Result<_>>()?;
    let b = examples.len();
    let max_candidates = truncated.iter().map(|t| t.candidates.len()).max().unwrap();

    let mut context = SentenceGrids::new(b, limits.max_utterances, limits.max_utterance_words, limits.max_chars);
    let mut persona = SentenceGrids::new(b, limits.max_profiles, limits.max_profile_words, limits.max_chars);
    let mut candidates =
        SentenceGrids::new(b, max_candidates, limits.max_response_words, limits.max_chars);
    for (i, t) in truncated.iter().enumerate() {
        context.fill(i, &t.context, vocab);
        persona.fill(i, &t.persona, vocab);
        candidates.fill(i, &t.candidates, vocab);
    }

    Ok(TokenizedBatch {
        example_ids: examples.iter().map(|(id, _)| *id).collect(),
        context_ids: context.ids,
        context_char_ids: context.chars,
        context_word_mask: context.word_mask,
        context_utterance_mask: context.sentence_mask,
        persona_ids: persona.ids,
        persona_char_ids: persona.chars,
        persona_word_mask: persona.word_mask,
        persona_profile_mask: persona.sentence_mask,
        candidate_ids: candidates.ids,
        candidate_char_ids: candidates.chars,
        candidate_word_mask: candidates.word_mask,
        candidate_mask: candidates.sentence_mask,
        positive_index: truncated.iter().map(|t| t.positive_index).collect(),
    })
}

/// The real sentences of one example group, as flat buffers: `count`
/// sentences of `len` word slots, each word with `max_chars` char slots.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceBlock {
    pub ids: Vec<usize>,
    pub chars: Vec<usize>,
    pub word_mask: Vec<f64>,
    pub count: usize,
    pub len: usize,
    pub max_chars: usize,
}

impl SentenceBlock {
    pub fn rows(&self) -> usize {
        self.count * self.len
    }

    /// Number of real words in sentence `s`.
    pub fn length_of(&self, s: usize) -> usize {
        self.word_mask[s * self.len..(s + 1) * self.len]
            .iter()
            .filter(|&&m| m > 0.0)
            .count()
    }

    /// The block without sentences that have no real word.
    pub fn without_empty(&self) -> Self {
        let keep: Vec<usize> = (0..self.count).filter(|&s| self.length_of(s) > 0).collect();
        if keep.len() == self.count {
            return self.clone();
        }
        let (len, w) = (self.len, self.len * self.max_chars);
        let mut out = Self {
            ids: Vec::with_capacity(keep.len() * len),
            chars: Vec::with_capacity(keep.len() * w),
            word_mask: Vec::with_capacity(keep.len() * len),
            count: keep.len(),
            len,
            max_chars: self.max_chars,
        };
        for s in keep {
            out.ids.extend_from_slice(&self.ids[s * len..(s + 1) * len]);
            out.chars.extend_from_slice(&self.chars[s * w..(s + 1) * w]);
            out.word_mask.extend_from_slice(&self.word_mask[s * len..(s + 1) * len]);
        }
        out
    }

    fn from_grids(
        ids: &Grid<u32>,
        chars: &Grid<u32>,
        word_mask: &Grid<u8>,
        sentence_mask: &Grid<u8>,
        b: usize,
    ) -> Option<Self> {
        let len = ids.shape()[2];
        let max_chars = chars.shape()[3];
        let real: Vec<usize> = (0..ids.shape()[1])
            .filter(|&s| sentence_mask.get(&[b, s]) == 1)
            .collect();
        if real.is_empty() {
            return None;
        }
        let mut block = Self {
            ids: Vec::with_capacity(real.len() * len),
            chars: Vec::with_capacity(real.len() * len * max_chars),
            word_mask: Vec::with_capacity(real.len() * len),
            count: real.len(),
            len,
            max_chars,
        };
        for &s in &real {
            block.ids.extend(ids.block(&[b, s]).iter().map(|&i| i as usize));
            block.chars.extend(chars.block(&[b, s]).iter().map(|&i| i as usize));
            block
                .word_mask
                .extend(word_mask.block(&[b, s]).iter().map(|&m| m as f64));
        }
        Some(block)
    }
}

/// Everything the model reads for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleInput {
    pub example_id: usize,
    pub context: SentenceBlock,
    pub persona: Option<SentenceBlock>,
    pub candidates: SentenceBlock,
    pub positive_index: usize,
}

impl TokenizedBatch {
    pub fn len(&self) -> usize {
        self.example_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.example_ids.is_empty()
    }

    pub fn example(&self, b: usize) -> Result<ExampleInput> {
        let context = SentenceBlock::from_grids(
            &self.context_ids,
            &self.context_char_ids,
            &self.context_word_mask,
            &self.context_utterance_mask,
            b,
        )
        .ok_or_else(|| Error::Data(format!("example {} has no utterances", self.example_ids[b])))?;
        let candidates = SentenceBlock::from_grids(
            &self.candidate_ids,
            &self.candidate_char_ids,
            &self.candidate_word_mask,
            &self.candidate_mask,
            b,
        )
        .ok_or_else(|| Error::Data(format!("example {} has no candidates", self.example_ids[b])))?;
        let persona = SentenceBlock::from_grids(
            &self.persona_ids,
            &self.persona_char_ids,
            &self.persona_word_mask,
            &self.persona_profile_mask,
            b,
        );
        Ok(ExampleInput {
            example_id: self.example_ids[b],
            context,
            persona,
            candidates,
            positive_index: self.positive_index[b],
        })
    }
}

/// Lazily tokenizes consecutive groups of examples.
pub struct Batches<'a> {
    examples: &'a [DialogueExample],
    vocab: &'a Vocab,
    limits: Limits,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl Iterator for Batches<'_> {
    type Item = Result<TokenizedBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let group: Vec<(usize, &DialogueExample)> = self.order[self.next..end]
            .iter()
            .map(|&i| (i, &self.examples[i]))
            .collect();
        self.next = end;
        Some(tokenize_examples(&group, self.vocab, &self.limits))
    }
}

/// Batches in corpus order.
pub fn batchify<'a>(
    examples: &'a [DialogueExample],
    vocab: &'a Vocab,
    limits: Limits,
    batch_size: usize,
) -> Result<Batches<'a>> {
    batchify_ordered(examples, vocab, limits, batch_size, (0..examples.len()).collect())
}

/// Batches following an explicit example order (e.g. a shuffled epoch).
pub fn batchify_ordered<'a>(
    examples: &'a [DialogueExample],
    vocab: &'a Vocab,
    limits: Limits,
    batch_size: usize,
    order: Vec<usize>,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    limits.validate()?;
    if let Some(&bad) = order.iter().find(|&&i| i >= examples.len()) {
        return Err(Error::Index(format!("example {bad} out of range")));
    }
    Ok(Batches {
        examples,
        vocab,
        limits,
        order,
        batch_size,
        next: 0,
    })
}

/// True when every grid cell has `mask == 0` exactly where `id == pad`.
pub fn masks_consistent(ids: &Grid<u32>, mask: &Grid<u8>) -> bool {
    ids.data()
        .iter()
        .zip(mask.data())
        .all(|(&id, &m)| (m == 0) == (id as usize == PAD))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{build_vocab, PersonaSide, PersonaVersion};

    fn example(context: usize, profiles: usize, words: usize) -> DialogueExample {
        let sentence = |tag: &str, i: usize| {
            (0..words)
                .map(|w| format!("{tag}{i}w{w}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        DialogueExample {
            context: (1..=context).map(|i| sentence("u", i)).collect(),
            persona: (1..=profiles).map(|i| sentence("p", i)).collect(),
            candidates: vec!["right answer".into(), "wrong one".into(), "".into()],
            positive_index: 0,
            persona_side: PersonaSide::Own,
            persona_version: PersonaVersion::Original,
        }
    }

    #[test]
    fn keeps_last_fifteen_utterances() {
        let ex = example(17, 3, 2);
        let t = truncate_example(&ex, &Limits::default()).unwrap();
        assert_eq!(t.context.len(), 15);
        assert_eq!(t.context[0][0], "u3w0");
        assert_eq!(t.context[14][0], "u17w0");
    }

    #[test]
    fn long_sentences_are_right_truncated() {
        let ex = example(1, 3, 25);
        let t = truncate_example(&ex, &Limits::default()).unwrap();
        assert_eq!(t.context[0].len(), 20);
        assert_eq!(t.context[0][19], "u1w19");
        assert_eq!(t.persona[0].len(), 15);
        assert_eq!(t.candidates[2], vec![UNK_TOKEN.to_string()]);
    }

    #[test]
    fn short_persona_pads_profile_slots() {
        let ex = example(2, 3, 4);
        let vocab = build_vocab(std::slice::from_ref(&ex), 1).unwrap();
        let batch = tokenize_examples(&[(0, &ex)], &vocab, &Limits::default()).unwrap();
        assert_eq!(batch.persona_ids.shape(), &[1, 5, 15]);
        assert_eq!(batch.context_char_ids.shape(), &[1, 15, 20, 18]);
        for slot in 3..5 {
            assert_eq!(batch.persona_profile_mask.get(&[0, slot]), 0);
            assert!(batch.persona_ids.block(&[0, slot]).iter().all(|&i| i == 0));
        }
        assert!(masks_consistent(&batch.context_ids, &batch.context_word_mask));
        assert!(masks_consistent(&batch.persona_ids, &batch.persona_word_mask));
        assert!(masks_consistent(&batch.candidate_ids, &batch.candidate_word_mask));

        let input = batch.example(0).unwrap();
        assert_eq!(input.context.count, 2);
        assert_eq!(input.persona.as_ref().unwrap().count, 3);
        assert_eq!(input.candidates.count, 3);
        assert_eq!(input.context.length_of(0), 4);
    }

    #[test]
    fn long_words_keep_eighteen_chars() {
        let mut ex = example(1, 1, 1);
        ex.context = vec!["a".repeat(30)];
        let vocab = build_vocab(std::slice::from_ref(&ex), 1).unwrap();
        let batch = tokenize_examples(&[(0, &ex)], &vocab, &Limits::default()).unwrap();
        let chars = batch.context_char_ids.block(&[0, 0, 0]);
        assert!(chars.iter().all(|&c| c != 0));
        assert_eq!(chars.len(), 18);
    }

    #[test]
    fn batches_cover_corpus_in_order() {
        let corpus: Vec<_> = (0..5).map(|i| example(i + 1, 3, 2)).collect();
        let vocab = build_vocab(&corpus, 1).unwrap();
        let batches: Vec<_> = batchify(&corpus, &vocab, Limits::default(), 2)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].example_ids, vec![4]);
        assert!(batchify(&corpus, &vocab, Limits::default(), 0).is_err());
    }

    #[test]
    fn zero_candidates_is_a_data_error() {
        let mut ex = example(1, 3, 2);
        ex.candidates.clear();
        let vocab = build_vocab(&[example(1, 3, 2)], 1).unwrap();
        assert!(matches!(
            tokenize_examples(&[(0, &ex)], &vocab, &Limits::default()),
            Err(Error::Data(_))
        ));
    }
}
