//! Command-line flags merged over an optional `key=value` config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use clap::Args;

/// Every option any command understands. Flags win over config-file values.
#[derive(Args, Clone, Debug, Default)]
pub struct Settings {
    /// Plain-text `key=value` file; keys are flag names without the leading dashes.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train_file: Option<PathBuf>,
    #[arg(long)]
    pub dev_file: Option<PathBuf>,
    #[arg(long)]
    pub test_file: Option<PathBuf>,
    /// Pretrained word vectors, one `<token> <values...>` per line.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Precomputed task-specific vectors, same format; frozen when given.
    #[arg(long)]
    pub task_embeddings: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// imn, imn-ctx, imn-utr, dim, dim-persona or dim-context.
    #[arg(long)]
    pub variant: Option<String>,
    /// self, their or none.
    #[arg(long)]
    pub persona_side: Option<String>,
    /// original or revised.
    #[arg(long)]
    pub persona_version: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// LSTM units per direction.
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Pretrained and task-specific embedding widths, e.g. `300,100`.
    #[arg(long)]
    pub embed_dims: Option<String>,
    #[arg(long)]
    pub char_filters: Option<usize>,
    /// Character CNN window sizes, e.g. `3,4,5`.
    #[arg(long)]
    pub char_windows: Option<String>,
    #[arg(long)]
    pub char_embed_dim: Option<usize>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    #[arg(long)]
    pub min_count: Option<u64>,
    /// Truncation limits `chars,utterance words,utterances,response words,profile words,profiles`.
    #[arg(long)]
    pub limits: Option<String>,
    #[arg(long)]
    pub example_id: Option<usize>,
    /// Candidate to dump attention for (default: the true response).
    #[arg(long)]
    pub candidate: Option<usize>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("config key {key}: cannot parse {value:?}: {e}"))
}

macro_rules! fill {
    ($slot:expr, $key:expr, $value:expr) => {
        if $slot.is_none() {
            $slot = Some(parse($key, $value)?);
        }
    };
}

impl Settings {
    /// Reads `self.config`, if set, filling every option not given as a
    /// flag. Errors are usage errors.
    pub fn merge_config_file(&mut self) -> Result<(), String> {
        let Some(path) = self.config.clone() else {
            return Ok(());
        };
        let text = fs::read_to_string(&path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                format!("{}:{}: expected key=value", path.display(), i + 1)
            })?;
            entries.insert(k.trim().replace('_', "-"), v.trim().to_string());
        }
        for (key, value) in &entries {
            let (k, v) = (key.as_str(), value.as_str());
            match k {
                "train-file" => fill!(self.train_file, k, v),
                "dev-file" => fill!(self.dev_file, k, v),
                "test-file" => fill!(self.test_file, k, v),
                "embeddings" => fill!(self.embeddings, k, v),
                "task-embeddings" => fill!(self.task_embeddings, k, v),
                "vocab" => fill!(self.vocab, k, v),
                "checkpoint" => fill!(self.checkpoint, k, v),
                "output-dir" => fill!(self.output_dir, k, v),
                "variant" => fill!(self.variant, k, v),
                "persona-side" => fill!(self.persona_side, k, v),
                "persona-version" => fill!(self.persona_version, k, v),
                "seed" => fill!(self.seed, k, v),
                "batch-size" => fill!(self.batch_size, k, v),
                "lr" => fill!(self.lr, k, v),
                "epochs" => fill!(self.epochs, k, v),
                "max-steps" => fill!(self.max_steps, k, v),
                "dropout" => fill!(self.dropout, k, v),
                "hidden-dim" => fill!(self.hidden_dim, k, v),
                "embed-dims" => fill!(self.embed_dims, k, v),
                "char-filters" => fill!(self.char_filters, k, v),
                "char-windows" => fill!(self.char_windows, k, v),
                "char-embed-dim" => fill!(self.char_embed_dim, k, v),
                "mlp-hidden" => fill!(self.mlp_hidden, k, v),
                "min-count" => fill!(self.min_count, k, v),
                "limits" => fill!(self.limits, k, v),
                "example-id" => fill!(self.example_id, k, v),
                "candidate" => fill!(self.candidate, k, v),
                _ => return Err(format!("{}: unknown config key {key:?}", path.display())),
            }
        }
        Ok(())
    }

    /// Every input path that was given must exist.
    pub fn check_inputs(&self) -> Result<(), String> {
        let inputs = [
            ("train-file", &self.train_file),
            ("dev-file", &self.dev_file),
            ("test-file", &self.test_file),
            ("embeddings", &self.embeddings),
            ("task-embeddings", &self.task_embeddings),
            ("checkpoint", &self.checkpoint),
        ];
        for (flag, path) in inputs {
            if let Some(p) = path.as_ref().filter(|p| !p.is_file()) {
                return Err(format!("--{flag}: no such file {}", p.display()));
            }
        }
        Ok(())
    }
}

/// Comma-separated list of positive integers.
pub fn parse_list(flag: &str, text: &str) -> Result<Vec<usize>, String> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("--{flag}: bad entry {p:?} in {text:?}"))
        })
        .collect()
}
