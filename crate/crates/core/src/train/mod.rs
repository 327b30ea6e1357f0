//! Training loop, evaluation, checkpoints and the ablation / transfer
//! experiments.

mod attention;
mod checkpoint;
mod experiments;
mod metrics;

pub use attention::{attention_dump, AttentionDump, AttentionMatrix};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use experiments::{ablate, fit, transfer_eval, Tables, TransferCell, TransferData};
pub use metrics::{rank_of, EvalReport, ExampleRank};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{adam_step, AdamState, Dropout, Graph};
use crate::text::{batchify, batchify_ordered, DialogueExample, Limits, PersonaSide, PersonaVersion, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub decay_rate: f64,
    pub decay_steps: u64,
    pub dropout: f64,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub limits: Limits,
    pub persona_side: PersonaSide,
    pub persona_version: PersonaVersion,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-3,
            decay_rate: 0.96,
            decay_steps: 5000,
            dropout: 0.2,
            epochs: 10,
            max_steps: None,
            seed: 0,
            limits: Limits::default(),
            persona_side: PersonaSide::Own,
            persona_version: PersonaVersion::Original,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.decay_steps == 0 {
            return Err(Error::Config(
                "batch size, epochs and decay steps must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.decay_rate > 0.0) {
            return Err(Error::Config("learning rate and decay must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.limits.validate()
    }

    /// Staircase decay: `lr * decay_rate ^ floor(step / decay_steps)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        lr_schedule(self.lr, self.decay_rate, self.decay_steps, step)
    }
}

pub fn lr_schedule(lr0: f64, decay_rate: f64, decay_steps: u64, step: u64) -> f64 {
    let k = (step / decay_steps) as i32;
    lr0 * decay_rate.powi(k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub dev_hits_at_1: Option<f64>,
    pub dev_mrr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

#[derive(Debug)]
pub struct Trained {
    /// The parameters of the epoch with the best dev hits@1, or the final
    /// ones when there is no dev set.
    pub model: Model,
    pub log: TrainLog,
}

fn with_position(e: Error, step: u64, batch: usize, ids: &[usize]) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!(
            "step {step}, batch {batch} (examples {ids:?}): {msg}"
        )),
        other => other,
    }
}

/// One optimizer step on a batch; returns the mean loss.
fn train_step(
    model: &mut Model,
    batch: &[crate::text::ExampleInput],
    dropout: &mut Dropout<'_>,
    adam: &mut AdamState,
    lr: f64,
) -> Result<f64> {
    let graph = Graph::new();
    let vars = model.params().bind(&graph);
    let mut total = None;
    for ex in batch {
        let (loss, _) = model.loss(&vars, ex, dropout)?;
        total = Some(match total {
            None => loss,
            Some(t) => loss.add(t)?,
        });
    }
    let total = total.ok_or_else(|| Error::Data("empty batch".into()))?;
    let mean = total.scale(1.0 / batch.len() as f64)?;
    let value = mean.value().item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let grads = vars.collect_grads(&graph.backward(mean)?);
    adam_step(model.params_mut(), &grads, adam, lr)?;
    Ok(value)
}

/// Trains `model` with Adam on `train`, evaluating on `dev` after each
/// epoch and keeping the best parameters by dev hits@1.
pub fn train(
    mut model: Model,
    cfg: &TrainConfig,
    vocab: &Vocab,
    train: &[DialogueExample],
    dev: Option<&[DialogueExample]>,
) -> Result<Trained> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    let mut adam = AdamState::default();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Model)> = None;
    let mut step = 0u64;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        let mut stopped = false;
        for (b, batch) in batchify_ordered(train, vocab, cfg.limits, cfg.batch_size, order)?.enumerate() {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                stopped = true;
                break;
            }
            let batch = batch?;
            let inputs = (0..batch.len())
                .map(|i| batch.example(i))
                .collect::<Result<Vec<_>>>()?;
            let lr = cfg.lr_at(step);
            let mut dropout = if cfg.dropout > 0.0 {
                Dropout::On {
                    rate: cfg.dropout,
                    rng: &mut dropout_rng,
                }
            } else {
                Dropout::Off
            };
            let loss = train_step(&mut model, &inputs, &mut dropout, &mut adam, lr)
                .map_err(|e| with_position(e, step, b, &batch.example_ids))?;
            log.steps.push(StepRecord {
                step,
                epoch,
                batch: b,
                loss,
                lr,
            });
            epoch_loss += loss;
            epoch_batches += 1;
            step += 1;
        }
        if epoch_batches == 0 {
            break;
        }
        let dev_report = dev
            .map(|d| evaluate(&model, vocab, d, cfg.limits, cfg.batch_size))
            .transpose()?;
        log.epochs.push(EpochRecord {
            epoch,
            step,
            mean_loss: epoch_loss / epoch_batches as f64,
            dev_hits_at_1: dev_report.as_ref().map(|r| r.hits_at_1),
            dev_mrr: dev_report.as_ref().map(|r| r.mrr),
        });
        if let Some(r) = dev_report {
            if best.as_ref().is_none_or(|(h, _)| r.hits_at_1 > *h) {
                best = Some((r.hits_at_1, model.clone()));
                log.best_epoch = epoch;
            }
        } else {
            log.best_epoch = epoch;
        }
        if stopped {
            break 'epochs;
        }
    }
    let model = match best {
        Some((_, m)) => m,
        None => model,
    };
    Ok(Trained { model, log })
}

/// Candidate logits of every example, dropout off.
pub fn score_corpus(
    model: &Model,
    vocab: &Vocab,
    examples: &[DialogueExample],
    limits: Limits,
    batch_size: usize,
) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let mut out = Vec::with_capacity(examples.len());
    for batch in batchify(examples, vocab, limits, batch_size)? {
        let batch = batch?;
        for i in 0..batch.len() {
            let ex = batch.example(i)?;
            out.push((ex.example_id, ex.positive_index, model.scores(&ex)?));
        }
    }
    Ok(out)
}

/// hits@1 and MRR over `examples`, ties ranked pessimistically.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    examples: &[DialogueExample],
    limits: Limits,
    batch_size: usize,
) -> Result<EvalReport> {
    check_vocab(model, vocab)?;
    let scored = score_corpus(model, vocab, examples, limits, batch_size)?;
    let ranks = scored
        .iter()
        .map(|(id, pos, s)| Ok((*id, rank_of(s, *pos)?)))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_ranks(ranks)
}

/// Fails when the vocabulary sizes differ from the ones the model was built
/// with.
pub fn check_vocab(model: &Model, vocab: &Vocab) -> Result<()> {
    let cfg = model.config();
    if cfg.vocab_size != vocab.words.len() || cfg.char_vocab_size != vocab.chars.len() {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} words / {} chars, model expects {} / {}",
            vocab.words.len(),
            vocab.chars.len(),
            cfg.vocab_size,
            cfg.char_vocab_size
        )));
    }
    Ok(())
}
