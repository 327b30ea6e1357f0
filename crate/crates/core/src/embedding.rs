//! Word representations: a pretrained table, a task-specific table, and
//! character-convolution features, concatenated per word.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{concat, ParamStore, ParamVars, PoolKind, Tensor, Var};
use crate::text::{TokenTable, PAD};

pub const PRETRAINED: &str = "embed.pretrained";
pub const TASK: &str = "embed.task";
pub const CHARS: &str = "embed.chars";

/// Range for rows that have no pretrained vector.
const MISSING_ROW_BOUND: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub pretrained_dim: usize,
    pub task_dim: usize,
    pub char_windows: Vec<usize>,
    pub char_filters: usize,
    pub char_embed_dim: usize,
    pub freeze_pretrained: bool,
    /// Set when the task table is loaded from a file rather than learned.
    pub freeze_task: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            pretrained_dim: 300,
            task_dim: 100,
            char_windows: vec![3, 4, 5],
            char_filters: 50,
            char_embed_dim: 16,
            freeze_pretrained: true,
            freeze_task: false,
        }
    }
}

impl EmbeddingConfig {
    pub fn char_dim(&self) -> usize {
        self.char_windows.len() * self.char_filters
    }

    /// Width of one word vector.
    pub fn word_dim(&self) -> usize {
        self.pretrained_dim + self.task_dim + self.char_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.word_dim() == 0 {
            return Err(Error::Config("word representation has zero width".into()));
        }
        if self.char_windows.contains(&0) {
            return Err(Error::Config("character windows must be positive".into()));
        }
        if self.char_dim() > 0 && self.char_embed_dim == 0 {
            return Err(Error::Config("character embedding width must be positive".into()));
        }
        Ok(())
    }
}

fn conv_weight(window: usize) -> String {
    format!("embed.conv{window}.weight")
}

fn conv_bias(window: usize) -> String {
    format!("embed.conv{window}.bias")
}

/// Reads `<token> <f1> ... <fD>` lines into a `V x dim` table aligned with
/// `vocab`. Rows for tokens absent from the file are drawn from
/// `uniform(-0.1, 0.1)`; the pad row is zero.
pub fn load_pretrained<R: Rng + ?Sized>(
    path: &Path,
    vocab: &TokenTable,
    dim: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let mut table = Tensor::uniform(
        &[vocab.len(), dim],
        -MISSING_ROW_BOUND,
        MISSING_ROW_BOUND,
        rng,
    );
    table.data_mut()[PAD * dim..(PAD + 1) * dim].fill(0.0);
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if values.len() != dim {
            return Err(Error::Format(format!(
                "{}:{}: expected {dim} values, found {}",
                path.display(),
                i + 1,
                values.len()
            )));
        }
        if !vocab.contains(token) {
            continue;
        }
        let id = vocab.id(token);
        if id == PAD {
            continue;
        }
        table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
    }
    Ok(table)
}

/// Adds every embedding-layer tensor to `store`. `pretrained` and `task`
/// replace the random tables when given.
pub fn init_params(
    store: &mut ParamStore,
    cfg: &EmbeddingConfig,
    vocab_size: usize,
    char_vocab_size: usize,
    pretrained: Option<Tensor>,
    task: Option<Tensor>,
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    let table = |name: &str, dim: usize, given: Option<Tensor>| -> Result<Tensor> {
        let t = match given {
            Some(t) => t,
            None => {
                let mut t = init::uniform(seed, name, &[vocab_size, dim], MISSING_ROW_BOUND);
                t.data_mut()[..dim].fill(0.0);
                t
            }
        };
        if t.shape() != [vocab_size, dim] {
            return Err(Error::Dimension(format!(
                "{name}: table is {:?}, expected [{vocab_size}, {dim}]",
                t.shape()
            )));
        }
        Ok(t)
    };
    if cfg.pretrained_dim > 0 {
        let t = table(PRETRAINED, cfg.pretrained_dim, pretrained)?;
        store.insert(PRETRAINED, t);
        store.set_frozen(PRETRAINED, cfg.freeze_pretrained);
    }
    if cfg.task_dim > 0 {
        let t = table(TASK, cfg.task_dim, task)?;
        store.insert(TASK, t);
        store.set_frozen(TASK, cfg.freeze_task);
    }
    if cfg.char_dim() > 0 {
        let e = cfg.char_embed_dim;
        store.insert(
            CHARS,
            init::uniform(seed, CHARS, &[char_vocab_size, e], MISSING_ROW_BOUND),
        );
        for &w in &cfg.char_windows {
            let bound = 1.0 / ((w * e) as f64).sqrt();
            store.insert(
                conv_weight(w),
                init::uniform(seed, &conv_weight(w), &[w * e, cfg.char_filters], bound),
            );
            store.insert(conv_bias(w), Tensor::zeros(&[1, cfg.char_filters]));
        }
    }
    Ok(())
}

struct CharFilter<'g> {
    window: usize,
    weight: Var<'g>,
    bias: Var<'g>,
}

/// Bound embedding tables and character filter banks.
pub struct WordRepr<'g> {
    pretrained: Option<Var<'g>>,
    task: Option<Var<'g>>,
    chars: Option<Var<'g>>,
    filters: Vec<CharFilter<'g>>,
    word_dim: usize,
}

impl<'g> WordRepr<'g> {
    pub fn bind(vars: &ParamVars<'g>, cfg: &EmbeddingConfig) -> Result<Self> {
        let opt = |name: &str, on: bool| on.then(|| vars.get(name)).transpose();
        let has_chars = cfg.char_dim() > 0;
        let filters = if has_chars {
            cfg.char_windows
                .iter()
                .map(|&w| {
                    Ok(CharFilter {
                        window: w,
                        weight: vars.get(&conv_weight(w))?,
                        bias: vars.get(&conv_bias(w))?,
                    })
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            pretrained: opt(PRETRAINED, cfg.pretrained_dim > 0)?,
            task: opt(TASK, cfg.task_dim > 0)?,
            chars: opt(CHARS, has_chars)?,
            filters,
            word_dim: cfg.word_dim(),
        })
    }

    pub fn word_dim(&self) -> usize {
        self.word_dim
    }
}

/// Character features of `words` words, each stored as `max_chars` char
/// ids (0 = pad). Per window: convolution over the zero-padded char
/// embeddings, ReLU, max over positions. Returns `words x (filters * windows)`.
pub fn char_conv<'g>(
    repr: &WordRepr<'g>,
    char_ids: &[usize],
    words: usize,
    max_chars: usize,
) -> Result<Var<'g>> {
    let table = repr
        .chars
        .ok_or_else(|| Error::Config("character features are disabled".into()))?;
    if char_ids.len() != words * max_chars {
        return Err(Error::Dimension(format!(
            "char_conv: {} char ids for {words} words of {max_chars}",
            char_ids.len()
        )));
    }
    let char_at = |n: usize, p: usize| -> Option<usize> {
        (p < max_chars)
            .then(|| char_ids[n * max_chars + p])
            .filter(|&id| id != PAD)
    };
    let positions = vec![1.0; words * max_chars];
    let mut features = Vec::with_capacity(repr.filters.len());
    for f in &repr.filters {
        let mut index = Vec::with_capacity(words * max_chars * f.window);
        for n in 0..words {
            for p in 0..max_chars {
                for o in 0..f.window {
                    index.push(char_at(n, p + o));
                }
            }
        }
        let e = table.shape()[1];
        let windows = table
            .gather_rows(&index)?
            .reshape(&[words * max_chars, f.window * e])?;
        let activations = windows.matmul(f.weight)?.add_row(f.bias)?.relu()?;
        features.push(activations.pool_seqs(words, max_chars, &positions, PoolKind::Max)?);
    }
    concat(&features, 1)
}

/// Word vectors for a flat list of word slots: `[pretrained; task; chars]`
/// per word, with padded slots (`word_mask == 0`) set to zero.
pub fn embed_words<'g>(
    repr: &WordRepr<'g>,
    ids: &[usize],
    char_ids: &[usize],
    max_chars: usize,
    word_mask: &[f64],
) -> Result<Var<'g>> {
    if word_mask.len() != ids.len() {
        return Err(Error::Dimension(format!(
            "embed_words: {} mask entries for {} ids",
            word_mask.len(),
            ids.len()
        )));
    }
    let index: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
    let mut parts = Vec::with_capacity(3);
    for table in [repr.pretrained, repr.task].into_iter().flatten() {
        let rows = table.shape()[0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!(
                "word id {bad} out of range for vocabulary of {rows}"
            )));
        }
        parts.push(table.gather_rows(&index)?);
    }
    if repr.chars.is_some() {
        parts.push(char_conv(repr, char_ids, ids.len(), max_chars)?);
    }
    concat(&parts, 1)?.scale_rows(word_mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use crate::text::{build_vocab, DialogueExample, PersonaSide, PersonaVersion};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> EmbeddingConfig {
        EmbeddingConfig {
            pretrained_dim: 2,
            task_dim: 3,
            char_windows: vec![2, 3],
            char_filters: 2,
            char_embed_dim: 2,
            freeze_pretrained: true,
            freeze_task: false,
        }
    }

    fn store(cfg: &EmbeddingConfig) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(&mut s, cfg, 6, 5, None, None, 3).unwrap();
        s
    }

    #[test]
    fn full_width_is_550() {
        assert_eq!(EmbeddingConfig::default().word_dim(), 550);
    }

    #[test]
    fn pad_words_embed_to_zero() {
        let cfg = tiny_cfg();
        let s = store(&cfg);
        let g = Graph::new();
        let vars = s.bind(&g);
        let repr = WordRepr::bind(&vars, &cfg).unwrap();
        let out = embed_words(&repr, &[0, 0, 0], &[0; 9], 3, &[0.0; 3]).unwrap();
        assert_eq!(out.value(), Tensor::zeros(&[3, cfg.word_dim()]));
        assert!(matches!(
            embed_words(&repr, &[7], &[0; 3], 3, &[1.0]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn all_pad_word_gives_relu_of_bias() {
        let cfg = tiny_cfg();
        let mut s = store(&cfg);
        s.insert(conv_bias(2), Tensor::row(&[0.3, -0.4]));
        s.insert(conv_bias(3), Tensor::row(&[-1.0, 2.0]));
        let g = Graph::new();
        let vars = s.bind(&g);
        let repr = WordRepr::bind(&vars, &cfg).unwrap();
        let out = char_conv(&repr, &[0; 4], 1, 4).unwrap().value();
        assert_eq!(out.data(), &[0.3, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn pad_char_row_content_is_ignored() {
        let cfg = tiny_cfg();
        let mut s = store(&cfg);
        let ids = [2, 3, 0, 0, 4, 0, 0, 0];
        let run = |s: &ParamStore| {
            let g = Graph::new();
            let vars = s.bind(&g);
            let repr = WordRepr::bind(&vars, &cfg).unwrap();
            char_conv(&repr, &ids, 2, 4).unwrap().value()
        };
        let before = run(&s);
        let chars = s.get_mut(CHARS).unwrap();
        chars.data_mut()[0] = 9.0;
        chars.data_mut()[1] = -9.0;
        assert_eq!(run(&s), before);
    }

    #[test]
    fn one_char_word_is_valid_for_wide_windows() {
        let mut cfg = tiny_cfg();
        cfg.char_windows = vec![3, 4, 5];
        let s = store(&cfg);
        let g = Graph::new();
        let vars = s.bind(&g);
        let repr = WordRepr::bind(&vars, &cfg).unwrap();
        let out = char_conv(&repr, &[2, 0, 0], 1, 3).unwrap().value();
        assert_eq!(out.shape(), &[1, 6]);
        assert!(out.is_finite());
    }

    #[test]
    fn pretrained_file_fills_known_rows() {
        let ex = DialogueExample {
            context: vec!["a b".into()],
            persona: vec![],
            candidates: vec!["a".into()],
            positive_index: 0,
            persona_side: PersonaSide::None,
            persona_version: PersonaVersion::Original,
        };
        let vocab = build_vocab(&[ex], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.txt");
        fs::write(&path, "a 1.0 2.0\nzzz 5 5\n").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = load_pretrained(&path, &vocab.words, 2, &mut rng).unwrap();
        assert_eq!(table.row_slice(vocab.word_id("a")), &[1.0, 2.0]);
        assert_eq!(table.row_slice(PAD), &[0.0, 0.0]);
        let b = table.row_slice(vocab.word_id("b"));
        assert!(b.iter().all(|v| v.abs() < 0.1));

        // Same seed reproduces the random rows.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let again = load_pretrained(&path, &vocab.words, 2, &mut rng).unwrap();
        assert_eq!(again, table);

        fs::write(&path, "a 1.0 2.0\nb 1.0\n").unwrap();
        assert!(matches!(
            load_pretrained(&path, &vocab.words, 2, &mut rng),
            Err(Error::Format(_))
        ));
    }
}
