//! The response-selection models: DIM, its two ablations, and the IMN
//! baselines with and without persona fusion.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate_context, aggregate_persona, aggregate_sequences, candidate_loss,
    init_persona_attention, init_mlp, pool_max_last, score, Mlp, MlpShape, PersonaAttention,
};
use crate::embedding::{self, embed_words, EmbeddingConfig, WordRepr};
use crate::encoder::{encode, init_bilstm, BiLstm, Seqs};
use crate::error::{Error, Result};
use crate::matching::{dim_match, fuse_utterance_level, DualMatchOutput};
use crate::tensor::{concat, Dropout, Graph, ParamStore, ParamVars, Tensor, Var};
use crate::text::{ExampleInput, SentenceBlock};

pub const ENCODER: &str = "encoder";
pub const AGGREGATE: &str = "aggregate";
pub const CONTEXT: &str = "context";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "imn")]
    Imn,
    #[serde(rename = "imn-ctx")]
    ImnCtx,
    #[serde(rename = "imn-utr")]
    ImnUtr,
    #[serde(rename = "dim")]
    Dim,
    #[serde(rename = "dim-persona")]
    DimNoPersona,
    #[serde(rename = "dim-context")]
    DimNoContext,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Imn,
        Variant::ImnCtx,
        Variant::ImnUtr,
        Variant::Dim,
        Variant::DimNoPersona,
        Variant::DimNoContext,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Imn => "imn",
            Variant::ImnCtx => "imn-ctx",
            Variant::ImnUtr => "imn-utr",
            Variant::Dim => "dim",
            Variant::DimNoPersona => "dim-persona",
            Variant::DimNoContext => "dim-context",
        }
    }

    /// Context-response matching feeds the feature.
    pub fn matches_context(self) -> bool {
        self != Variant::DimNoContext
    }

    /// Persona-response matching feeds the feature.
    pub fn matches_persona(self) -> bool {
        matches!(self, Variant::Dim | Variant::DimNoContext)
    }

    /// Persona vectors are fused into the context representation.
    pub fn fuses_persona(self) -> bool {
        matches!(self, Variant::ImnCtx | Variant::ImnUtr)
    }

    pub fn reads_persona(self) -> bool {
        self.matches_persona() || self.fuses_persona()
    }

    /// Number of `4h` blocks in the final feature.
    pub fn feature_blocks(self) -> usize {
        if self == Variant::Dim {
            4
        } else {
            2
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['_', '−'], "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of imn, imn-ctx, imn-utr, dim, dim-persona, dim-context"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub embedding: EmbeddingConfig,
    /// LSTM units per direction, shared by every BiLSTM.
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub char_vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn full_size(variant: Variant, vocab_size: usize, char_vocab_size: usize, seed: u64) -> Self {
        Self {
            variant,
            embedding: EmbeddingConfig::default(),
            hidden: 200,
            mlp_hidden: 256,
            vocab_size,
            char_vocab_size,
            seed,
        }
    }

    pub fn encoded_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn enhanced_dim(&self) -> usize {
        8 * self.hidden
    }

    pub fn pooled_dim(&self) -> usize {
        4 * self.hidden
    }

    pub fn feature_dim(&self) -> usize {
        self.variant.feature_blocks() * self.pooled_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        if self.hidden == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        if self.vocab_size < 2 || self.char_vocab_size < 2 {
            return Err(Error::Config("vocabularies must hold pad and unk".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

/// Everything a forward pass exposes for one example with `C` candidates.
pub struct Forward<'g> {
    /// `1 x C`.
    pub logits: Var<'g>,
    /// `C x feature_dim`, in the order context, response, persona, response.
    pub features: Var<'g>,
    pub matches: Vec<DualMatchOutput<'g>>,
    /// Per candidate, the `1 x n_profiles` persona attention.
    pub persona_weights: Vec<Var<'g>>,
}

fn fresh_params(
    config: &ModelConfig,
    pretrained: Option<Tensor>,
    task: Option<Tensor>,
) -> Result<ParamStore> {
    config.validate()?;
    let (seed, h) = (config.seed, config.hidden);
    let mut store = ParamStore::new();
    embedding::init_params(
        &mut store,
        &config.embedding,
        config.vocab_size,
        config.char_vocab_size,
        pretrained,
        task,
        seed,
    )?;
    init_bilstm(&mut store, ENCODER, config.embedding.word_dim(), h, seed);
    init_bilstm(&mut store, AGGREGATE, config.enhanced_dim(), h, seed);
    if config.variant.matches_context() {
        init_bilstm(&mut store, CONTEXT, config.pooled_dim(), h, seed);
    }
    if config.variant.matches_persona() {
        init_persona_attention(&mut store, config.pooled_dim(), seed);
    }
    init_mlp(
        &mut store,
        &MlpShape {
            input: config.feature_dim(),
            hidden: config.mlp_hidden,
        },
        seed,
    );
    Ok(store)
}

fn embed_block<'g>(
    repr: &WordRepr<'g>,
    block: &SentenceBlock,
    dropout: &mut Dropout<'_>,
) -> Result<Seqs<'g>> {
    if block.count == 0 {
        return Err(Error::Degenerate("sentence group has no real sentence".into()));
    }
    let x = embed_words(repr, &block.ids, &block.chars, block.max_chars, &block.word_mask)?;
    Seqs::new(dropout.apply(x)?, block.count, block.len, block.word_mask.clone())
}

fn encode_block<'g>(
    repr: &WordRepr<'g>,
    block: &SentenceBlock,
    encoder: &BiLstm<'g>,
    dropout: &mut Dropout<'_>,
) -> Result<Seqs<'g>> {
    let mut out = encode(&embed_block(repr, block, dropout)?, encoder)?;
    out.value = dropout.apply(out.value)?;
    Ok(out)
}

/// Stacks same-length sequence groups into one batch.
fn stack<'g>(groups: &[&Seqs<'g>]) -> Result<Seqs<'g>> {
    let first = groups[0];
    let values: Vec<Var<'g>> = groups.iter().map(|s| s.value).collect();
    let mask: Vec<f64> = groups.iter().flat_map(|s| s.mask.iter().copied()).collect();
    Seqs::new(concat(&values, 0)?, groups.len() * first.count, first.len, mask)
}

impl Model {
    pub fn init(config: ModelConfig, pretrained: Option<Tensor>, task: Option<Tensor>) -> Result<Self> {
        let params = fresh_params(&config, pretrained, task)?;
        Ok(Self { config, params })
    }

    /// Pairs a config with stored parameters after checking that every
    /// expected tensor is present with the expected shape.
    pub fn from_parts(config: ModelConfig, mut params: ParamStore) -> Result<Self> {
        let expected = fresh_params(&config, None, None)?;
        for (name, t) in expected.iter() {
            let got = params.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor {name} (expected {:?})", t.shape()))
            })?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} is {:?}, config implies {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| expected.get(n).is_none()) {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        let names: Vec<String> = expected.names().map(String::from).collect();
        for name in names {
            params.set_frozen(&name, expected.is_frozen(&name));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn forward<'g>(
        &self,
        vars: &ParamVars<'g>,
        ex: &ExampleInput,
        dropout: &mut Dropout<'_>,
    ) -> Result<Forward<'g>> {
        let variant = self.config.variant;
        let repr = WordRepr::bind(vars, &self.config.embedding)?;
        let encoder = BiLstm::bind(vars, ENCODER)?;
        let aggregator = BiLstm::bind(vars, AGGREGATE)?;
        let mlp = Mlp::bind(vars)?;

        let utterances = if variant.matches_context() {
            Some(encode_block(&repr, &ex.context.without_empty(), &encoder, dropout)?)
        } else {
            None
        };
        let profiles = if variant.reads_persona() {
            let block = ex.persona.as_ref().ok_or_else(|| {
                Error::Data(format!(
                    "example {} has no persona but variant {variant} reads one",
                    ex.example_id
                ))
            })?;
            Some(encode_block(&repr, &block.without_empty(), &encoder, dropout)?)
        } else {
            None
        };
        let candidates = encode_block(&repr, &ex.candidates, &encoder, dropout)?;
        let c = candidates.count;
        let len_r = candidates.len;

        let mut matches = Vec::with_capacity(c);
        for k in 0..c {
            let response = Seqs::new(
                candidates.value.slice_rows(k * len_r, len_r)?,
                1,
                len_r,
                candidates.mask_of(k).to_vec(),
            )?;
            let persona_side = profiles.as_ref().filter(|_| variant.matches_persona());
            matches.push(dim_match(utterances.as_ref(), persona_side, &response)?);
        }

        let mut blocks = Vec::with_capacity(4);
        let mut persona_weights = Vec::new();
        if let Some(utterances) = &utterances {
            let n = utterances.count;
            let groups: Vec<&Seqs> = matches
                .iter()
                .map(|m| &m.context.as_ref().expect("context path on").group)
                .collect();
            let responses: Vec<&Seqs> = matches
                .iter()
                .map(|m| &m.context.as_ref().expect("context path on").response)
                .collect();
            let u = aggregate_sequences(&stack(&groups)?, &aggregator, dropout)?;
            let r = aggregate_sequences(&stack(&responses)?, &aggregator, dropout)?;
            let context_bilstm = BiLstm::bind(vars, CONTEXT)?;
            let real = vec![1.0; c * n];
            let ctx = match variant {
                Variant::ImnUtr => {
                    let (p, p_mask) = fusion_personas(profiles.as_ref())?;
                    let fused = fuse_utterance_level(u, p, &p_mask)?;
                    aggregate_context(fused, c, n, &real, &context_bilstm, dropout)?
                }
                Variant::ImnCtx => {
                    let (p, p_mask) = fusion_personas(profiles.as_ref())?;
                    let plain = aggregate_context(u, c, n, &real, &context_bilstm, dropout)?;
                    fuse_utterance_level(plain, p, &p_mask)?
                }
                _ => aggregate_context(u, c, n, &real, &context_bilstm, dropout)?,
            };
            blocks.push(ctx);
            blocks.push(r);
        }
        if variant.matches_persona() {
            let n = profiles.as_ref().expect("persona read").count;
            let att = PersonaAttention::bind(vars)?;
            let groups: Vec<&Seqs> = matches
                .iter()
                .map(|m| &m.persona.as_ref().expect("persona path on").group)
                .collect();
            let responses: Vec<&Seqs> = matches
                .iter()
                .map(|m| &m.persona.as_ref().expect("persona path on").response)
                .collect();
            let p = aggregate_sequences(&stack(&groups)?, &aggregator, dropout)?;
            let r = aggregate_sequences(&stack(&responses)?, &aggregator, dropout)?;
            let mut personas = Vec::with_capacity(c);
            for k in 0..c {
                let (v, w) = aggregate_persona(p.slice_rows(k * n, n)?, &vec![1.0; n], &att)?;
                personas.push(v);
                persona_weights.push(w);
            }
            blocks.push(concat(&personas, 0)?);
            blocks.push(r);
        }

        let features = concat(&blocks, 1)?;
        let logits = score(features, &mlp, dropout)?.reshape(&[1, c])?;
        Ok(Forward {
            logits,
            features,
            matches,
            persona_weights,
        })
    }

    /// Forward pass plus the candidate cross-entropy.
    pub fn loss<'g>(
        &self,
        vars: &ParamVars<'g>,
        ex: &ExampleInput,
        dropout: &mut Dropout<'_>,
    ) -> Result<(Var<'g>, Forward<'g>)> {
        let fwd = self.forward(vars, ex, dropout)?;
        Ok((candidate_loss(fwd.logits, ex.positive_index)?, fwd))
    }

    /// Candidate logits with dropout off.
    pub fn scores(&self, ex: &ExampleInput) -> Result<Vec<f64>> {
        let graph = Graph::new();
        let vars = self.params.bind(&graph);
        let fwd = self.forward(&vars, ex, &mut Dropout::Off)?;
        Ok(fwd.logits.value().into_data())
    }
}

/// Profile vectors for the fusion baselines: `[max; last]` pooling of each
/// encoded profile, giving the same width as the aggregated utterances.
fn fusion_personas<'g>(profiles: Option<&Seqs<'g>>) -> Result<(Var<'g>, Vec<f64>)> {
    let profiles = profiles.ok_or_else(|| Error::Data("fusion needs a persona".into()))?;
    Ok((pool_max_last(profiles)?, vec![1.0; profiles.count]))
}
