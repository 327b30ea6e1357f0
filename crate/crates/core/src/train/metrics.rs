use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 1-based rank of `scores[positive]`. Candidates scoring equal to the
/// positive are ranked ahead of it.
pub fn rank_of(scores: &[f64], positive: usize) -> Result<usize> {
    let target = *scores.get(positive).ok_or_else(|| {
        Error::Index(format!(
            "positive index {positive} out of range for {} candidates",
            scores.len()
        ))
    })?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN candidate score".into()));
    }
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != positive && s >= target)
        .count();
    Ok(ahead + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRank {
    pub id: usize,
    pub rank: usize,
    pub reciprocal_rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub hits_at_1: f64,
    pub mrr: f64,
    pub count: usize,
    pub ranks: Vec<ExampleRank>,
}

impl EvalReport {
    /// Aggregates `(example id, rank)` pairs.
    pub fn from_ranks(ranks: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let ranks: Vec<ExampleRank> = ranks
            .into_iter()
            .map(|(id, rank)| ExampleRank {
                id,
                rank,
                reciprocal_rank: 1.0 / rank as f64,
            })
            .collect();
        if ranks.is_empty() {
            return Err(Error::Data("no examples to evaluate".into()));
        }
        let n = ranks.len() as f64;
        let hits = ranks.iter().filter(|r| r.rank == 1).count() as f64;
        let rr: f64 = ranks.iter().map(|r| r.reciprocal_rank).sum();
        Ok(Self {
            hits_at_1: hits / n,
            mrr: rr / n,
            count: ranks.len(),
            ranks,
        })
    }

    pub fn summary(&self) -> String {
        format!(
            "examples {}\nhits@1 {:.6}\nmrr {:.6}\n",
            self.count, self.hits_at_1, self.mrr
        )
    }

    /// One JSON object per example.
    pub fn jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.ranks {
            writeln!(out, "{}", serde_json::to_string(r)?).expect("writing to a String");
        }
        Ok(out)
    }

    /// Writes `<stem>.txt` and `<stem>.jsonl` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::write(dir.join(format!("{stem}.txt")), self.summary())?;
        fs::write(dir.join(format!("{stem}.jsonl")), self.jsonl()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_rank_positive_last() {
        assert_eq!(rank_of(&[1.0, 3.0, 2.0], 1).unwrap(), 1);
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 0).unwrap(), 3);
        assert_eq!(rank_of(&[2.0, 5.0, 2.0], 2).unwrap(), 3);
        assert!(rank_of(&[1.0], 1).is_err());
        assert!(rank_of(&[f64::NAN, 1.0], 1).is_err());
    }

    #[test]
    fn second_place_everywhere() {
        let r = EvalReport::from_ranks([(0, 2), (1, 2)]).unwrap();
        assert_eq!(r.hits_at_1, 0.0);
        assert_eq!(r.mrr, 0.5);
        let line = r.jsonl().unwrap();
        assert!(line.starts_with("{\"id\":0,\"rank\":2,\"reciprocal_rank\":0.5}\n"));
    }
}
