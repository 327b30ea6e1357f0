use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{tokenize, DialogueExample};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// A token table with `pad = 0` and `unk = 1` reserved.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTable {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

impl TokenTable {
    /// Orders entries by count descending, then lexicographically.
    fn from_counts(counts: BTreeMap<String, u64>, min_count: u64) -> Self {
        let mut entries: Vec<(String, u64)> =
            counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut table = Self {
            tokens: vec![PAD_TOKEN.into(), UNK_TOKEN.into()],
            counts: vec![0, 0],
            index: HashMap::new(),
        };
        for (tok, count) in entries {
            table.tokens.push(tok);
            table.counts.push(count);
        }
        table.reindex();
        table
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, falling back to unk.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }
}

/// Word vocabulary plus a character vocabulary derived from its entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    pub words: TokenTable,
    pub chars: TokenTable,
}

impl Vocab {
    fn from_words(words: TokenTable) -> Self {
        let mut char_counts: BTreeMap<String, u64> = BTreeMap::new();
        for (tok, &count) in words.tokens.iter().zip(&words.counts).skip(2) {
            for ch in tok.chars() {
                *char_counts.entry(ch.to_string()).or_default() += count;
            }
        }
        let chars = TokenTable::from_counts(char_counts, 1);
        Self { words, chars }
    }

    pub fn word_id(&self, token: &str) -> usize {
        self.words.id(token)
    }

    /// Character ids of a token; reserved tokens have no characters.
    pub fn char_ids(&self, token: &str) -> Vec<usize> {
        if token == PAD_TOKEN || token == UNK_TOKEN {
            return Vec::new();
        }
        token
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.chars.id(c.encode_utf8(&mut buf))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, (tok, count)) in self.words.tokens.iter().zip(&self.words.counts).enumerate() {
            writeln!(out, "{tok} {id} {count}").expect("writing to a String");
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let parse_err = |line: usize, message: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: message.to_string(),
        };
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 3 {
                return Err(parse_err(i + 1, "expected \"<token> <id> <count>\""));
            }
            let id: usize = parts[1]
                .parse()
                .map_err(|_| parse_err(i + 1, "bad id"))?;
            let count: u64 = parts[2]
                .parse()
                .map_err(|_| parse_err(i + 1, "bad count"))?;
            if id != tokens.len() {
                return Err(parse_err(i + 1, "ids must be consecutive from 0"));
            }
            tokens.push(parts[0].to_string());
            counts.push(count);
        }
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Format(format!(
                "{}: vocab must start with {PAD_TOKEN} and {UNK_TOKEN}",
                path.display()
            )));
        }
        let mut words = TokenTable {
            tokens,
            counts,
            index: HashMap::new(),
        };
        words.reindex();
        if words.index.len() != words.tokens.len() {
            return Err(Error::Format(format!(
                "{}: duplicate tokens",
                path.display()
            )));
        }
        Ok(Self::from_words(words))
    }
}

/// Counts every token of every context, persona and candidate sentence.
pub fn build_vocab(examples: &[DialogueExample], min_count: u64) -> Result<Vocab> {
    if examples.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from no examples".into()));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for ex in examples {
        for sentence in ex.context.iter().chain(&ex.persona).chain(&ex.candidates) {
            for tok in tokenize(sentence) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    Ok(Vocab::from_words(TokenTable::from_counts(counts, min_count.max(1))))
}
