//! Pooling matching matrices into sentence, context and persona vectors, and
//! scoring the final feature with an MLP.

use crate::encoder::{bilstm, encode, BiLstm, Seqs};
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{concat, Dropout, ParamStore, ParamVars, PoolKind, Tensor, Var};

/// `[max; last]` pooling of every sequence: `count x 2w`.
pub fn pool_max_last<'g>(seqs: &Seqs<'g>) -> Result<Var<'g>> {
    let max = seqs.value.pool_seqs(seqs.count, seqs.len, &seqs.mask, PoolKind::Max)?;
    let last = seqs.value.pool_seqs(seqs.count, seqs.len, &seqs.mask, PoolKind::Last)?;
    concat(&[max, last], 1)
}

/// Runs the shared aggregation BiLSTM over matching matrices and pools each
/// sequence. Returns `count x 4h`.
pub fn aggregate_sequences<'g>(
    seqs: &Seqs<'g>,
    params: &BiLstm<'g>,
    dropout: &mut Dropout<'_>,
) -> Result<Var<'g>> {
    let mut states = encode(seqs, params)?;
    states.value = dropout.apply(states.value)?;
    pool_max_last(&states)
}

/// Context vectors from utterance vectors, one context per group of
/// `utterances` consecutive rows of `u` (`groups * utterances x w`).
/// `mask` marks real utterances. Returns `groups x 4h`.
pub fn aggregate_context<'g>(
    u: Var<'g>,
    groups: usize,
    utterances: usize,
    mask: &[f64],
    params: &BiLstm<'g>,
    dropout: &mut Dropout<'_>,
) -> Result<Var<'g>> {
    for g in 0..groups {
        if !mask[g * utterances..(g + 1) * utterances].iter().any(|&m| m > 0.0) {
            return Err(Error::Degenerate("context has no real utterance".into()));
        }
    }
    let states = dropout.apply(bilstm(u, groups, utterances, mask, params)?)?;
    pool_max_last(&Seqs::new(states, groups, utterances, mask.to_vec())?)
}

pub const ATTENTION_W: &str = "persona_attention.w";
pub const ATTENTION_B: &str = "persona_attention.b";

/// Adds `w` (`width x 1`) and `b` for the persona attention.
pub fn init_persona_attention(store: &mut ParamStore, width: usize, seed: u64) {
    let k = 1.0 / (width as f64).sqrt();
    store.insert(ATTENTION_W, init::uniform(seed, ATTENTION_W, &[width, 1], k));
    store.insert(ATTENTION_B, init::uniform(seed, ATTENTION_B, &[1, 1], k));
}

pub struct PersonaAttention<'g> {
    pub w: Var<'g>,
    pub b: Var<'g>,
}

impl<'g> PersonaAttention<'g> {
    pub fn bind(vars: &ParamVars<'g>) -> Result<Self> {
        Ok(Self {
            w: vars.get(ATTENTION_W)?,
            b: vars.get(ATTENTION_B)?,
        })
    }
}

/// Attention-weighted sum of profile vectors `p` (`n x w`):
/// `alpha_n = relu(w . p_n + b)`, softmax over real profiles. Returns the
/// `1 x w` persona vector and the `1 x n` weights.
pub fn aggregate_persona<'g>(
    p: Var<'g>,
    mask: &[f64],
    att: &PersonaAttention<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let n = p.shape()[0];
    if mask.len() != n {
        return Err(Error::Dimension(format!(
            "aggregate_persona: {} mask entries for {n} profiles",
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m > 0.0) {
        return Err(Error::Degenerate("persona has no real profile".into()));
    }
    let alpha = p.matmul(att.w)?.add_row(att.b)?.relu()?.reshape(&[1, n])?;
    let weights = alpha.masked_softmax(mask)?;
    Ok((weights.matmul(p)?, weights))
}

pub struct MlpShape {
    pub input: usize,
    pub hidden: usize,
}

const MLP: [&str; 4] = ["mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"];

/// Hidden layer `input -> hidden` with ReLU, then a single logit.
pub fn init_mlp(store: &mut ParamStore, shape: &MlpShape, seed: u64) {
    let k1 = 1.0 / (shape.input as f64).sqrt();
    let k2 = 1.0 / (shape.hidden as f64).sqrt();
    store.insert(MLP[0], init::uniform(seed, MLP[0], &[shape.input, shape.hidden], k1));
    store.insert(MLP[1], Tensor::zeros(&[1, shape.hidden]));
    store.insert(MLP[2], init::uniform(seed, MLP[2], &[shape.hidden, 1], k2));
    store.insert(MLP[3], Tensor::zeros(&[1, 1]));
}

pub struct Mlp<'g> {
    w1: Var<'g>,
    b1: Var<'g>,
    w2: Var<'g>,
    b2: Var<'g>,
}

impl<'g> Mlp<'g> {
    pub fn bind(vars: &ParamVars<'g>) -> Result<Self> {
        Ok(Self {
            w1: vars.get(MLP[0])?,
            b1: vars.get(MLP[1])?,
            w2: vars.get(MLP[2])?,
            b2: vars.get(MLP[3])?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.shape()[1]
    }
}

/// One logit per row of `features`: returns `rows x 1`.
pub fn score<'g>(features: Var<'g>, mlp: &Mlp<'g>, dropout: &mut Dropout<'_>) -> Result<Var<'g>> {
    let width = features.shape()[1];
    if width != mlp.input_dim() {
        return Err(Error::Dimension(format!(
            "score: feature width {width}, MLP expects {}",
            mlp.input_dim()
        )));
    }
    let hidden = features.matmul(mlp.w1)?.add_row(mlp.b1)?.relu()?;
    dropout.apply(hidden)?.matmul(mlp.w2)?.add_row(mlp.b2)
}

/// `-log softmax(logits)[positive]` over all candidates.
pub fn candidate_loss<'g>(logits: Var<'g>, positive: usize) -> Result<Var<'g>> {
    let c = logits.value().numel();
    if c < 2 {
        return Err(Error::Contract(format!("need at least 2 candidates, got {c}")));
    }
    logits.cross_entropy(positive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn zero_mlp_returns_output_bias() {
        let mut s = ParamStore::new();
        init_mlp(&mut s, &MlpShape { input: 3, hidden: 4 }, 0);
        s.insert(MLP[0], Tensor::zeros(&[3, 4]));
        s.insert(MLP[3], Tensor::row(&[0.7]));
        let g = Graph::new();
        let vars = s.bind(&g);
        let mlp = Mlp::bind(&vars).unwrap();
        let x = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[-1.0, 0.0, 5.0]]).unwrap());
        let out = score(x, &mlp, &mut Dropout::Off).unwrap().value();
        assert_eq!(out.data(), &[0.7, 0.7]);
        let bad = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(score(bad, &mlp, &mut Dropout::Off), Err(Error::Dimension(_))));
    }

    #[test]
    fn persona_attention_edge_cases() {
        let g = Graph::new();
        let att = PersonaAttention {
            w: g.constant(Tensor::zeros(&[2, 1])),
            b: g.constant(Tensor::row(&[0.0])),
        };
        let p = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 3.0], &[9.0, 9.0]]).unwrap());
        let (v, w) = aggregate_persona(p, &[1.0, 1.0, 0.0], &att).unwrap();
        assert_eq!(v.value().data(), &[0.5, 1.5]);
        assert_eq!(w.value().data(), &[0.5, 0.5, 0.0]);
        let one = g.constant(Tensor::row(&[2.0, -1.0]));
        let (v, _) = aggregate_persona(one, &[1.0], &att).unwrap();
        assert_eq!(v.value().data(), &[2.0, -1.0]);
        assert!(matches!(
            aggregate_persona(p, &[0.0; 3], &att),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn loss_needs_two_candidates() {
        let g = Graph::new();
        let one = g.constant(Tensor::row(&[1.0]));
        assert!(matches!(candidate_loss(one, 0), Err(Error::Contract(_))));
        let uniform = g.constant(Tensor::row(&[0.3; 20]));
        let loss = candidate_loss(uniform, 7).unwrap().value().item();
        assert!((loss - 20f64.ln()).abs() < 1e-12);
        assert!(matches!(candidate_loss(uniform, 20), Err(Error::Index(_))));
    }
}
