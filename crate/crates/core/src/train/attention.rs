//! Response-to-context and response-to-persona attention export.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::tensor::{Dropout, Graph, Tensor};
use crate::text::{tokenize_examples, truncate_example, DialogueExample, Limits, Vocab};

/// Attention weights restricted to real tokens, with token labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrix {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub example_id: usize,
    pub variant: Variant,
    pub candidate: usize,
    pub positive: bool,
    pub response_to_context: Option<AttentionMatrix>,
    pub response_to_persona: Option<AttentionMatrix>,
}

fn restrict(
    full: &Tensor,
    row_mask: &[f64],
    col_mask: &[f64],
    rows: Vec<String>,
    columns: Vec<String>,
) -> Result<AttentionMatrix> {
    let real_rows: Vec<usize> = (0..row_mask.len()).filter(|&i| row_mask[i] > 0.0).collect();
    let real_cols: Vec<usize> = (0..col_mask.len()).filter(|&j| col_mask[j] > 0.0).collect();
    if real_rows.len() != rows.len() || real_cols.len() != columns.len() {
        return Err(Error::Contract(format!(
            "attention extents {}x{} do not match {} x {} tokens",
            real_rows.len(),
            real_cols.len(),
            rows.len(),
            columns.len()
        )));
    }
    let weights = real_rows
        .iter()
        .map(|&i| real_cols.iter().map(|&j| full.at(i, j)).collect())
        .collect();
    Ok(AttentionMatrix {
        rows,
        columns,
        weights,
    })
}

/// Attention of candidate `candidate` (default: the true response) of one
/// example over its context and, for persona-matching variants, its persona.
pub fn attention_dump(
    model: &Model,
    vocab: &Vocab,
    example: &DialogueExample,
    example_id: usize,
    limits: Limits,
    candidate: Option<usize>,
) -> Result<AttentionDump> {
    let truncated = truncate_example(example, &limits)?;
    let batch = tokenize_examples(&[(example_id, example)], vocab, &limits)?;
    let input = batch.example(0)?;
    let k = candidate.unwrap_or(input.positive_index);
    if k >= input.candidates.count {
        return Err(Error::Index(format!(
            "candidate {k} out of range for {} candidates",
            input.candidates.count
        )));
    }
    let graph = Graph::new();
    let vars = model.params().bind(&graph);
    let fwd = model.forward(&vars, &input, &mut Dropout::Off)?;
    let m = &fwd.matches[k];
    let len_r = input.candidates.len;
    let response_mask = &input.candidates.word_mask[k * len_r..(k + 1) * len_r];
    let response_tokens = truncated.candidates[k].clone();

    let response_to_context = m
        .context
        .as_ref()
        .map(|c| {
            restrict(
                &c.alignment.b_to_a.value(),
                response_mask,
                &input.context.without_empty().word_mask,
                response_tokens.clone(),
                truncated.context.concat(),
            )
        })
        .transpose()?;
    let response_to_persona = match (&m.persona, &input.persona) {
        (Some(p), Some(block)) => Some(restrict(
            &p.alignment.b_to_a.value(),
            response_mask,
            &block.without_empty().word_mask,
            response_tokens,
            truncated.persona.concat(),
        )?),
        _ => None,
    };
    Ok(AttentionDump {
        example_id,
        variant: model.variant(),
        candidate: k,
        positive: k == input.positive_index,
        response_to_context,
        response_to_persona,
    })
}
