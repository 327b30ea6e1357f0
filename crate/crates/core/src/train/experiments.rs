use serde::{Deserialize, Serialize};

use super::{evaluate, train, EvalReport, TrainConfig, Trained};
use crate::error::Result;
use crate::model::{Model, ModelConfig, Variant};
use crate::tensor::Tensor;
use crate::text::{DialogueExample, PersonaVersion, Vocab};

/// Embedding tables read from files, shared by every model an experiment
/// trains.
#[derive(Clone, Copy, Debug, Default)]
pub struct Tables<'a> {
    pub pretrained: Option<&'a Tensor>,
    pub task: Option<&'a Tensor>,
}

impl Tables<'_> {
    fn init(&self, config: ModelConfig) -> Result<Model> {
        Model::init(config, self.pretrained.cloned(), self.task.cloned())
    }
}

/// Initializes `config`, trains it, and evaluates the selected parameters on
/// `test`.
pub fn fit(
    config: ModelConfig,
    tables: Tables<'_>,
    cfg: &TrainConfig,
    vocab: &Vocab,
    train_set: &[DialogueExample],
    dev: Option<&[DialogueExample]>,
    test: &[DialogueExample],
) -> Result<(Trained, EvalReport)> {
    let model = tables.init(config)?;
    let trained = train(model, cfg, vocab, train_set, dev)?;
    let report = evaluate(&trained.model, vocab, test, cfg.limits, cfg.batch_size)?;
    Ok((trained, report))
}

/// Trains and evaluates the two reduced models: without persona-response
/// matching and without context-response matching.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    base: &ModelConfig,
    tables: Tables<'_>,
    cfg: &TrainConfig,
    vocab: &Vocab,
    train_set: &[DialogueExample],
    dev: Option<&[DialogueExample]>,
    test: &[DialogueExample],
) -> Result<Vec<(Variant, EvalReport)>> {
    [Variant::DimNoPersona, Variant::DimNoContext]
        .into_iter()
        .map(|variant| {
            let config = ModelConfig {
                variant,
                ..base.clone()
            };
            let (_, report) = fit(config, tables, cfg, vocab, train_set, dev, test)?;
            Ok((variant, report))
        })
        .collect()
}

/// Train, dev and test corpora for both persona versions, indexed
/// `[original, revised]`.
pub struct TransferData {
    pub train: [Vec<DialogueExample>; 2],
    pub dev: [Option<Vec<DialogueExample>>; 2],
    pub test: [Vec<DialogueExample>; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub train_version: PersonaVersion,
    pub test_version: PersonaVersion,
    pub report: EvalReport,
}

const VERSIONS: [PersonaVersion; 2] = [PersonaVersion::Original, PersonaVersion::Revised];

/// Trains one model per persona version and evaluates each on both,
/// giving the 2 x 2 grid in row-major (train, test) order.
pub fn transfer_eval(
    base: &ModelConfig,
    tables: Tables<'_>,
    cfg: &TrainConfig,
    vocab: &Vocab,
    data: &TransferData,
) -> Result<Vec<TransferCell>> {
    let mut cells = Vec::with_capacity(4);
    for (i, &train_version) in VERSIONS.iter().enumerate() {
        let model = tables.init(base.clone())?;
        let trained = train(model, cfg, vocab, &data.train[i], data.dev[i].as_deref())?;
        for (j, &test_version) in VERSIONS.iter().enumerate() {
            let report =
                evaluate(&trained.model, vocab, &data.test[j], cfg.limits, cfg.batch_size)?;
            cells.push(TransferCell {
                train_version,
                test_version,
                report,
            });
        }
    }
    Ok(cells)
}
