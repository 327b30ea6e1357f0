//! Cross-attention matching between a long sequence (context or concatenated
//! profiles) and a response, plus the persona-fusion rules used by the IMN
//! baselines.

use crate::encoder::Seqs;
use crate::error::{Error, Result};
use crate::tensor::{concat, Var};

/// Attention between two sequences `a` and `b`, with the enhanced
/// representations of both sides.
pub struct AlignmentResult<'g> {
    /// Raw dot products, `l_a x l_b`.
    pub e: Var<'g>,
    /// Softmax of each row of `e` over the real rows of `b`.
    pub a_to_b: Var<'g>,
    /// Softmax of each column of `e` over the real rows of `a`, stored as
    /// `l_b x l_a`.
    pub b_to_a: Var<'g>,
    pub a_tilde: Var<'g>,
    pub b_tilde: Var<'g>,
    /// `[a; a~; a - a~; a * a~]`, padded rows zero.
    pub a_hat: Var<'g>,
    pub b_hat: Var<'g>,
}

/// The flat context matrix of a batch of utterances: rows are already laid
/// out utterance after utterance, so this only pairs the value with its mask.
pub fn form_context<'g>(utterances: &Seqs<'g>) -> (Var<'g>, Vec<f64>) {
    (utterances.value, utterances.mask.clone())
}

/// Inverse of [`form_context`]: regroups `rows` into `count` sequences.
pub fn split<'g>(rows: Var<'g>, count: usize, len: usize, mask: Vec<f64>) -> Result<Seqs<'g>> {
    Seqs::new(rows, count, len, mask)
}

/// `mask` repeated once per row: the cell mask of attention over keys.
fn key_mask(rows: usize, keys: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * keys.len());
    for _ in 0..rows {
        out.extend_from_slice(keys);
    }
    out
}

fn enhance<'g>(x: Var<'g>, x_tilde: Var<'g>) -> Result<Var<'g>> {
    concat(&[x, x_tilde, x.sub(x_tilde)?, x.mul(x_tilde)?], 1)
}

/// Cross attention of `a` (`l_a x w`) and `b` (`l_b x w`).
pub fn cross_match<'g>(
    a: Var<'g>,
    a_mask: &[f64],
    b: Var<'g>,
    b_mask: &[f64],
) -> Result<AlignmentResult<'g>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::Dimension(format!(
            "cross_match: {sa:?} against {sb:?}"
        )));
    }
    if a_mask.len() != sa[0] || b_mask.len() != sb[0] {
        return Err(Error::Dimension("cross_match: mask length mismatch".into()));
    }
    for (side, mask) in [("first", a_mask), ("second", b_mask)] {
        if !mask.iter().any(|&m| m > 0.0) {
            return Err(Error::Degenerate(format!(
                "cross_match: {side} sequence has no real rows"
            )));
        }
    }
    let e = a.matmul(b.transpose()?)?;
    let a_to_b = e.masked_softmax(&key_mask(sa[0], b_mask))?;
    let b_to_a = e.transpose()?.masked_softmax(&key_mask(sb[0], a_mask))?;
    let a_tilde = a_to_b.matmul(b)?.scale_rows(a_mask)?;
    let b_tilde = b_to_a.matmul(a)?.scale_rows(b_mask)?;
    Ok(AlignmentResult {
        e,
        a_to_b,
        b_to_a,
        a_tilde,
        b_tilde,
        a_hat: enhance(a, a_tilde)?.scale_rows(a_mask)?,
        b_hat: enhance(b, b_tilde)?.scale_rows(b_mask)?,
    })
}

/// Matches one response against a group of sentences (context utterances
/// or persona profiles) treated as one long sequence, then regroups.
pub struct GroupMatch<'g> {
    pub group: Seqs<'g>,
    pub response: Seqs<'g>,
    pub alignment: AlignmentResult<'g>,
}

pub fn match_group<'g>(group: &Seqs<'g>, response: &Seqs<'g>) -> Result<GroupMatch<'g>> {
    if response.count != 1 {
        return Err(Error::Contract(format!(
            "match_group: expected one response, got {}",
            response.count
        )));
    }
    let (flat, mask) = form_context(group);
    let alignment = cross_match(flat, &mask, response.value, &response.mask)?;
    Ok(GroupMatch {
        group: split(alignment.a_hat, group.count, group.len, mask)?,
        response: Seqs::new(alignment.b_hat, 1, response.len, response.mask.clone())?,
        alignment,
    })
}

/// Context-response and persona-response matching of one candidate. The two
/// paths share nothing, and either may be switched off.
pub struct DualMatchOutput<'g> {
    pub context: Option<GroupMatch<'g>>,
    pub persona: Option<GroupMatch<'g>>,
}

pub fn dim_match<'g>(
    utterances: Option<&Seqs<'g>>,
    profiles: Option<&Seqs<'g>>,
    response: &Seqs<'g>,
) -> Result<DualMatchOutput<'g>> {
    Ok(DualMatchOutput {
        context: utterances.map(|u| match_group(u, response)).transpose()?,
        persona: profiles.map(|p| match_group(p, response)).transpose()?,
    })
}

/// `u_m + sum_n softmax_n(u_m . p_n) p_n` for every row of `u`, the softmax
/// running over real profiles only.
pub fn fuse_utterance_level<'g>(
    u: Var<'g>,
    personas: Var<'g>,
    persona_mask: &[f64],
) -> Result<Var<'g>> {
    let (su, sp) = (u.shape(), personas.shape());
    if su.len() != 2 || sp.len() != 2 || su[1] != sp[1] || persona_mask.len() != sp[0] {
        return Err(Error::Dimension(format!(
            "fuse: {su:?} against personas {sp:?}"
        )));
    }
    if !persona_mask.iter().any(|&m| m > 0.0) {
        return Err(Error::Degenerate("fuse: no real profile".into()));
    }
    let weights = u
        .matmul(personas.transpose()?)?
        .masked_softmax(&key_mask(su[0], persona_mask))?;
    u.add(weights.matmul(personas)?)
}

/// Single-vector form of [`fuse_utterance_level`]; `c` is `1 x d`.
pub fn fuse_context_level<'g>(
    c: Var<'g>,
    personas: Var<'g>,
    persona_mask: &[f64],
) -> Result<Var<'g>> {
    if c.shape().first() != Some(&1) {
        return Err(Error::Dimension(format!("fuse: context {:?} is not a row", c.shape())));
    }
    fuse_utterance_level(c, personas, persona_mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_key_copies_that_row() {
        let g = Graph::new();
        let a = g.constant(random(&[3, 2], 1));
        let b = g.constant(Tensor::from_rows(&[&[0.5, -2.0], &[0.0, 0.0]]).unwrap());
        let r = cross_match(a, &[1.0; 3], b, &[1.0, 0.0]).unwrap();
        let t = r.a_tilde.value();
        for i in 0..3 {
            assert_eq!(t.row_slice(i), &[0.5, -2.0]);
        }
        let w = r.a_to_b.value();
        assert_eq!(w.row_slice(0), &[1.0, 0.0]);
    }

    #[test]
    fn enhanced_layout() {
        let g = Graph::new();
        let a = g.constant(random(&[4, 3], 2));
        let b = g.constant(random(&[2, 3], 3));
        let r = cross_match(a, &[1.0, 1.0, 1.0, 0.0], b, &[1.0; 2]).unwrap();
        let hat = r.a_hat.value();
        let tilde = r.a_tilde.value();
        assert_eq!(hat.shape(), &[4, 12]);
        for i in 0..4 {
            assert_eq!(&hat.row_slice(i)[3..6], tilde.row_slice(i));
        }
        assert!(hat.row_slice(3).iter().all(|&v| v == 0.0));
        assert!(matches!(
            cross_match(a, &[0.0; 4], b, &[1.0; 2]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn split_inverts_form() {
        let g = Graph::new();
        let x = random(&[6, 2], 4);
        let seqs = Seqs::new(g.constant(x.clone()), 2, 3, vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let (flat, mask) = form_context(&seqs);
        let back = split(flat, 2, 3, mask).unwrap();
        assert_eq!(back.value.value(), x);
        assert_eq!(back.mask, seqs.mask);
    }

    #[test]
    fn fusion_with_one_or_equal_profiles() {
        let g = Graph::new();
        let c = g.constant(Tensor::row(&[0.3, -0.1]));
        let p = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[7.0, 7.0]]).unwrap());
        let out = fuse_context_level(c, p, &[1.0, 0.0]).unwrap().value();
        assert_eq!(out.data(), &[1.3, 1.9]);
        let same = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[1.0, 2.0]]).unwrap());
        let out = fuse_context_level(c, same, &[1.0, 1.0]).unwrap().value();
        assert!((out.data()[0] - 1.3).abs() < 1e-15 && (out.data()[1] - 1.9).abs() < 1e-15);
        assert!(matches!(
            fuse_context_level(c, p, &[0.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }
}
