use dim_core::tensor::{
    adam_step, concat, grad_check, AdamState, ElementwiseKind, Graph, ParamStore, PoolKind,
    Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

const STEP: f64 = 1e-5;
const OP_TOL: f64 = 1e-6;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// Weighted sum with fixed pseudo-random weights, so the checked scalar
/// depends on every output coordinate differently.
fn probe<'g>(v: dim_core::tensor::Var<'g>, seed: u64) -> dim_core::Result<dim_core::tensor::Var<'g>> {
    let w = v.graph().constant(rand_t(&v.shape(), seed));
    v.mul(w)?.sum()
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let b = rand_t(&[4, 2], 2);
    let err = grad_check(
        |g, x| {
            let b = g.constant(b.clone());
            probe(x.matmul(b)?, 9)
        },
        &rand_t(&[3, 4], 1),
        STEP,
    )
    .unwrap();
    assert!(err < OP_TOL, "lhs {err}");
    let a = rand_t(&[3, 4], 1);
    let err = grad_check(
        |g, x| {
            let a = g.constant(a.clone());
            probe(a.matmul(x)?, 9)
        },
        &rand_t(&[4, 2], 2),
        STEP,
    )
    .unwrap();
    assert!(err < OP_TOL, "rhs {err}");
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let other = rand_t(&[3, 3], 4);
    for kind in [ElementwiseKind::Add, ElementwiseKind::Sub, ElementwiseKind::Mul] {
        let err = grad_check(
            |g, x| {
                let o = g.constant(other.clone());
                probe(x.elementwise(o, kind)?, 5)
            },
            &rand_t(&[3, 3], 3),
            STEP,
        )
        .unwrap();
        assert!(err < OP_TOL, "{kind:?} {err}");
        // Second operand.
        let err = grad_check(
            |g, x| {
                let o = g.constant(other.clone());
                probe(o.elementwise(x, kind)?, 5)
            },
            &rand_t(&[3, 3], 3),
            STEP,
        )
        .unwrap();
        assert!(err < OP_TOL, "{kind:?} rhs {err}");
    }
}

#[test]
fn unary_gradients_match_finite_differences() {
    let x = rand_t(&[2, 5], 11);
    for (name, f) in [
        ("sigmoid", 0usize),
        ("tanh", 1),
        ("relu", 2),
        ("transpose", 3),
        ("scale", 4),
        ("scale_rows", 5),
        ("reshape", 6),
    ] {
        let err = grad_check(
            |_, v| {
                let y = match f {
                    0 => v.sigmoid()?,
                    1 => v.tanh()?,
                    2 => v.relu()?,
                    3 => v.transpose()?,
                    4 => v.scale(-1.7)?,
                    5 => v.scale_rows(&[0.5, -2.0])?,
                    _ => v.reshape(&[5, 2])?,
                };
                probe(y, 12)
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(err < OP_TOL, "{name} {err}");
    }
}

#[test]
fn structural_op_gradients_match_finite_differences() {
    let bias = rand_t(&[1, 4], 20);
    let err = grad_check(
        |g, x| probe(x.add_row(g.constant(bias.clone()))?, 21),
        &rand_t(&[3, 4], 22),
        STEP,
    )
    .unwrap();
    assert!(err < OP_TOL, "add_row input {err}");
    let m = rand_t(&[3, 4], 22);
    let err = grad_check(
        |g, b| probe(g.constant(m.clone()).add_row(b)?, 21),
        &bias,
        STEP,
    )
    .unwrap();
    assert!(err < OP_TOL, "add_row bias {err}");

    let other = rand_t(&[2, 3], 23);
    for axis in [0, 1] {
        let err = grad_check(
            |g, x| {
                let o = g.constant(other.clone());
                let joined = if axis == 0 {
                    concat(&[x, o, x], 0)?
                } else {
                    concat(&[o, x], 1)?
                };
                probe(joined, 24)
            },
            &rand_t(&[2, 3], 25),
            STEP,
        )
        .unwrap();
        assert!(err < OP_TOL, "concat axis {axis} {err}");
    }

    let err = grad_check(
        |_, x| probe(x.slice_cols(1, 2)?, 26),
        &rand_t(&[3, 4], 27),
        STEP,
    )
    .unwrap();
    assert!(err < OP_TOL, "slice {err}");

    let err = grad_check(
        |_, x| probe(x.gather_rows(&[Some(2), None, Some(0), Some(2)])?, 28),
        &rand_t(&[3, 4], 29),
        STEP,
    )
    .unwrap();
    assert!(err < OP_TOL, "gather {err}");
}

#[test]
fn softmax_pool_and_loss_gradients_match_finite_differences() {
    let mask = [1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0];
    let err = grad_check(
        |_, x| probe(x.masked_softmax(&mask)?, 30),
        &rand_t(&[2, 4], 31),
        STEP,
    )
    .unwrap();
    assert!(err < OP_TOL, "masked_softmax {err}");

    let seq_mask = [1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    for kind in [PoolKind::Max, PoolKind::Last] {
        let err = grad_check(
            |_, x| probe(x.pool_seqs(2, 4, &seq_mask, kind)?, 32),
            &rand_t(&[8, 3], 33),
            STEP,
        )
        .unwrap();
        assert!(err < OP_TOL, "pool {kind:?} {err}");
    }

    let err = grad_check(|_, x| x.cross_entropy(2), &rand_t(&[1, 5], 34), STEP).unwrap();
    assert!(err < OP_TOL, "cross_entropy {err}");
}

#[test]
fn grad_check_on_simple_functions() {
    let x = rand_t(&[3, 3], 40);
    let sum_err = grad_check(|_, v| v.sum(), &x, STEP).unwrap();
    assert!(sum_err < 1e-9, "{sum_err}");
    let sq_err = grad_check(|_, v| v.mul(v)?.sum(), &x, STEP).unwrap();
    assert!(sq_err < OP_TOL, "{sq_err}");
    assert!(matches!(
        grad_check(|_, v| v.scale(2.0), &x, STEP),
        Err(dim_core::Error::Contract(_))
    ));
}

#[test]
fn masked_softmax_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let logits: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mask = [1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0];
    let g = Graph::new();
    let y = g
        .constant(Tensor::row(&logits))
        .masked_softmax(&mask)
        .unwrap()
        .value();
    let live: f64 = logits
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m == 1.0)
        .map(|(x, _)| x.exp())
        .sum();
    for i in 0..7 {
        let expected = if mask[i] == 1.0 { logits[i].exp() / live } else { 0.0 };
        assert!((y.data()[i] - expected).abs() < 1e-14);
    }
    assert_eq!(y.data()[3], 0.0);
    assert_eq!(y.data()[5], 0.0);
}

#[test]
fn pool_matches_brute_force_with_trailing_mask() {
    let x = rand_t(&[6, 4], 60);
    let mask = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
    let g = Graph::new();
    let v = g.constant(x.clone());
    let max = v.pool(PoolKind::Max, &mask).unwrap().value();
    let last = v.pool(PoolKind::Last, &mask).unwrap().value();
    for j in 0..4 {
        let brute = (0..4).map(|i| x.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(max.data()[j], brute);
        assert_eq!(last.data()[j], x.at(3, j));
    }
}

#[test]
fn dropout_keeps_expected_fraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 100_000], 1.0));
    let y = x.dropout(0.2, true, &mut rng).unwrap().value();
    let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
    assert!((kept - 0.8).abs() < 0.01, "{kept}");
    assert!(y
        .data()
        .iter()
        .all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
}

#[test]
fn adam_minimizes_quadratic() {
    // f(w) = (w0 - 3)^2 + 10 (w1 + 1)^2
    let mut params = ParamStore::new();
    params.insert("w", Tensor::row(&[0.0, 0.0]));
    let mut state = AdamState::default();
    let loss = |w: &[f64]| (w[0] - 3.0).powi(2) + 10.0 * (w[1] + 1.0).powi(2);
    for step in 0..500 {
        let w = params.get("w").unwrap().data().to_vec();
        let grad = Tensor::row(&[2.0 * (w[0] - 3.0), 20.0 * (w[1] + 1.0)]);
        let lr = if step < 300 { 0.1 } else { 0.01 };
        adam_step(&mut params, &BTreeMap::from([("w".into(), grad)]), &mut state, lr).unwrap();
    }
    let final_loss = loss(params.get("w").unwrap().data());
    assert!(final_loss < 1e-6, "{final_loss}");
}

#[test]
fn seeded_optimization_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let mut params = ParamStore::new();
        params.insert("w", Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng));
        let mut state = AdamState::default();
        for _ in 0..20 {
            let g = Graph::new();
            let vars = params.bind(&g);
            let w = vars.get("w").unwrap();
            let loss = w
                .matmul(w)
                .unwrap()
                .dropout(0.3, true, &mut rng)
                .unwrap()
                .tanh()
                .unwrap()
                .sum()
                .unwrap();
            let grads = vars.collect_grads(&g.backward(loss).unwrap());
            adam_step(&mut params, &grads, &mut state, 0.01).unwrap();
        }
        params
    };
    let a = run();
    let b = run();
    assert_eq!(a.get("w").unwrap().data(), b.get("w").unwrap().data());
}

proptest! {
    #[test]
    fn masked_softmax_rows_are_distributions(
        logits in proptest::collection::vec(-50.0f64..50.0, 12),
        mask_bits in proptest::collection::vec(any::<bool>(), 12),
    ) {
        let mut mask: Vec<f64> = mask_bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        for row in 0..3 {
            mask[row * 4] = 1.0;
        }
        let g = Graph::new();
        let y = g.constant(Tensor::new(vec![3, 4], logits).unwrap())
            .masked_softmax(&mask).unwrap().value();
        for row in 0..3 {
            let r = &y.data()[row * 4..row * 4 + 4];
            let total: f64 = r.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            for (v, m) in r.iter().zip(&mask[row * 4..row * 4 + 4]) {
                if *m == 0.0 { prop_assert_eq!(*v, 0.0); } else { prop_assert!(*v > 0.0); }
            }
        }
    }
}
