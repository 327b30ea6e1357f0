//! Mask-aware bidirectional LSTM over batches of padded sequences.
//!
//! A batch of `count` sequences of `len` steps is stored as one
//! `(count * len) x width` matrix, sequence-major, with a 0/1 mask per row.

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{concat, Graph, ParamStore, ParamVars, Tensor, Var};

/// Padded sequences in the flat layout described above.
#[derive(Clone, Debug)]
pub struct Seqs<'g> {
    pub value: Var<'g>,
    pub count: usize,
    pub len: usize,
    pub mask: Vec<f64>,
}

impl<'g> Seqs<'g> {
    pub fn new(value: Var<'g>, count: usize, len: usize, mask: Vec<f64>) -> Result<Self> {
        let shape = value.shape();
        if shape.len() != 2 || shape[0] != count * len || mask.len() != count * len {
            return Err(Error::Dimension(format!(
                "{count} sequences of {len}: value {shape:?}, mask of {}",
                mask.len()
            )));
        }
        Ok(Self { value, count, len, mask })
    }

    pub fn width(&self) -> usize {
        self.value.shape()[1]
    }

    pub fn rows(&self) -> usize {
        self.count * self.len
    }

    /// Mask of sequence `s`.
    pub fn mask_of(&self, s: usize) -> &[f64] {
        &self.mask[s * self.len..(s + 1) * self.len]
    }

    /// Number of real steps in sequence `s`.
    pub fn length_of(&self, s: usize) -> usize {
        self.mask_of(s).iter().filter(|&&m| m > 0.0).count()
    }
}

struct Cell<'g> {
    w_x: Var<'g>,
    w_h: Var<'g>,
    b: Var<'g>,
}

/// Bound parameters of one BiLSTM.
pub struct BiLstm<'g> {
    fw: Cell<'g>,
    bw: Cell<'g>,
    input_dim: usize,
    hidden: usize,
}

const DIRECTIONS: [&str; 2] = ["fw", "bw"];

fn names(prefix: &str, dir: &str) -> [String; 3] {
    ["w_x", "w_h", "b"].map(|p| format!("{prefix}.{dir}.{p}"))
}

/// Adds a BiLSTM with input width `d` and `h` units per direction.
/// Gates are ordered i, f, g, o; weights are `uniform(-1/sqrt(h), 1/sqrt(h))`
/// and the forget-gate bias starts at 1.
pub fn init_bilstm(store: &mut ParamStore, prefix: &str, d: usize, h: usize, seed: u64) {
    let k = 1.0 / (h as f64).sqrt();
    for dir in DIRECTIONS {
        let [w_x, w_h, b] = names(prefix, dir);
        store.insert(&w_x, init::uniform(seed, &w_x, &[d, 4 * h], k));
        store.insert(&w_h, init::uniform(seed, &w_h, &[h, 4 * h], k));
        let mut bias = Tensor::zeros(&[1, 4 * h]);
        bias.data_mut()[h..2 * h].fill(1.0);
        store.insert(&b, bias);
    }
}

impl<'g> BiLstm<'g> {
    pub fn bind(vars: &ParamVars<'g>, prefix: &str) -> Result<Self> {
        let cell = |dir: &str| -> Result<Cell<'g>> {
            let [w_x, w_h, b] = names(prefix, dir);
            Ok(Cell {
                w_x: vars.get(&w_x)?,
                w_h: vars.get(&w_h)?,
                b: vars.get(&b)?,
            })
        };
        let fw = cell("fw")?;
        let bw = cell("bw")?;
        let [d, four_h] = fw.w_x.shape()[..] else {
            return Err(Error::Dimension(format!("{prefix}: input weight must be a matrix")));
        };
        let hidden = four_h / 4;
        for c in [&fw, &bw] {
            if c.w_x.shape() != [d, 4 * hidden]
                || c.w_h.shape() != [hidden, 4 * hidden]
                || c.b.shape() != [1, 4 * hidden]
            {
                return Err(Error::Dimension(format!(
                    "{prefix}: inconsistent LSTM parameter shapes"
                )));
            }
        }
        Ok(Self { fw, bw, input_dim: d, hidden })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// Runs one direction; returns the per-step states stacked time-major
/// (`len * count` rows, step `t` in rows `t*count..(t+1)*count`).
fn run_direction<'g>(
    graph: &'g Graph,
    proj: Var<'g>,
    seqs: (usize, usize),
    mask: &[f64],
    cell: &Cell<'g>,
    hidden: usize,
    reverse: bool,
) -> Result<Vec<Var<'g>>> {
    let (count, len) = seqs;
    let mut h = graph.constant(Tensor::zeros(&[count, hidden]));
    let mut c = h;
    let mut states = vec![None; len];
    let steps: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    };
    for t in steps {
        let rows: Vec<Option<usize>> = (0..count).map(|s| Some(s * len + t)).collect();
        let m: Vec<f64> = (0..count).map(|s| mask[s * len + t]).collect();
        let gates = proj.gather_rows(&rows)?.add(h.matmul(cell.w_h)?)?;
        let i = gates.slice_cols(0, hidden)?.sigmoid()?;
        let f = gates.slice_cols(hidden, hidden)?.sigmoid()?;
        let g = gates.slice_cols(2 * hidden, hidden)?.tanh()?;
        let o = gates.slice_cols(3 * hidden, hidden)?.sigmoid()?;
        let c_new = f.mul(c)?.add(i.mul(g)?)?;
        let h_new = o.mul(c_new.tanh()?)?;
        if m.iter().all(|&v| v == 1.0) {
            c = c_new;
            h = h_new;
        } else {
            let keep: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
            c = c_new.scale_rows(&m)?.add(c.scale_rows(&keep)?)?;
            h = h_new.scale_rows(&m)?.add(h.scale_rows(&keep)?)?;
        }
        states[t] = Some(h);
    }
    Ok(states.into_iter().map(|s| s.expect("every step visited")).collect())
}

/// Bidirectional LSTM over `x`, `(count * len) x d`. Output is
/// `(count * len) x 2h`: forward states then backward states per row. The
/// state is held across padded steps, so the backward pass effectively
/// starts at the last real step; padded output rows are zero.
pub fn bilstm<'g>(
    x: Var<'g>,
    count: usize,
    len: usize,
    mask: &[f64],
    params: &BiLstm<'g>,
) -> Result<Var<'g>> {
    if len == 0 || count == 0 {
        return Err(Error::Dimension("bilstm needs at least one step".into()));
    }
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != params.input_dim {
        return Err(Error::Dimension(format!(
            "bilstm: input {shape:?}, expected width {}",
            params.input_dim
        )));
    }
    if shape[0] != count * len || mask.len() != count * len {
        return Err(Error::Dimension(format!(
            "bilstm: {} rows and {} mask entries for {count} sequences of {len}",
            shape[0],
            mask.len()
        )));
    }
    let graph = x.graph();
    let h = params.hidden;
    let mut halves = Vec::with_capacity(2);
    for (cell, reverse) in [(&params.fw, false), (&params.bw, true)] {
        let proj = x.matmul(cell.w_x)?.add_row(cell.b)?;
        let states = run_direction(graph, proj, (count, len), mask, cell, h, reverse)?;
        let stacked = concat(&states, 0)?;
        // time-major -> sequence-major, padded rows dropped to zero
        let order: Vec<Option<usize>> = (0..count * len)
            .map(|r| {
                let (s, t) = (r / len, r % len);
                (mask[r] > 0.0).then_some(t * count + s)
            })
            .collect();
        halves.push(stacked.gather_rows(&order)?);
    }
    concat(&halves, 1)
}

/// Encodes a batch with `params`.
pub fn encode<'g>(seqs: &Seqs<'g>, params: &BiLstm<'g>) -> Result<Seqs<'g>> {
    let out = bilstm(seqs.value, seqs.count, seqs.len, &seqs.mask, params)?;
    Seqs::new(out, seqs.count, seqs.len, seqs.mask.clone())
}

/// Sentence encodings of one example.
pub struct EncodedSequences<'g> {
    pub utterances: Seqs<'g>,
    pub profiles: Option<Seqs<'g>>,
    pub candidates: Seqs<'g>,
}

/// Encodes utterances, profiles and candidates with the same BiLSTM.
pub fn encode_all<'g>(
    utterances: &Seqs<'g>,
    profiles: Option<&Seqs<'g>>,
    candidates: &Seqs<'g>,
    params: &BiLstm<'g>,
) -> Result<EncodedSequences<'g>> {
    Ok(EncodedSequences {
        utterances: encode(utterances, params)?,
        profiles: profiles.map(|p| encode(p, params)).transpose()?,
        candidates: encode(candidates, params)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn swap_halves(t: &Tensor) -> Tensor {
        let (rows, cols) = (t.rows(), t.cols());
        let half = cols / 2;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = t.row_slice(r);
            data.extend_from_slice(&row[half..]);
            data.extend_from_slice(&row[..half]);
        }
        Tensor::new(vec![rows, cols], data).expect("same extents")
    }

    fn params(d: usize, h: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_bilstm(&mut s, "enc", d, h, seed);
        s
    }

    fn run(store: &ParamStore, x: &Tensor, count: usize, len: usize, mask: &[f64]) -> Tensor {
        let g = Graph::new();
        let vars = store.bind(&g);
        let p = BiLstm::bind(&vars, "enc").unwrap();
        bilstm(g.constant(x.clone()), count, len, mask, &p).unwrap().value()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn forget_bias_and_shapes() {
        let s = params(3, 2, 0);
        assert_eq!(s.get("enc.fw.b").unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.get("enc.bw.w_x").unwrap().shape(), &[3, 8]);
        let g = Graph::new();
        let vars = s.bind(&g);
        let p = BiLstm::bind(&vars, "enc").unwrap();
        let bad = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(bilstm(bad, 1, 2, &[1.0, 1.0], &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_parameters_give_zero_states() {
        let mut s = params(3, 2, 0);
        for name in s.names().map(String::from).collect::<Vec<_>>() {
            let shape = s.get(&name).unwrap().shape().to_vec();
            s.insert(&name, Tensor::zeros(&shape));
        }
        let out = run(&s, &random(&[4, 3], 1), 1, 4, &[1.0; 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_manual_cell() {
        let s = params(2, 1, 5);
        let x = random(&[1, 2], 2);
        let out = run(&s, &x, 1, 1, &[1.0]);
        let step = |dir: &str| {
            let w = s.get(&format!("enc.{dir}.w_x")).unwrap();
            let b = s.get(&format!("enc.{dir}.b")).unwrap();
            let z: Vec<f64> = (0..4)
                .map(|j| x.data()[0] * w.at(0, j) + x.data()[1] * w.at(1, j) + b.data()[j])
                .collect();
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let c = sig(z[0]) * z[2].tanh();
            sig(z[3]) * c.tanh()
        };
        assert!((out.data()[0] - step("fw")).abs() < 1e-15);
        assert!((out.data()[1] - step("bw")).abs() < 1e-15);
    }

    #[test]
    fn padding_is_invisible() {
        let s = params(3, 2, 7);
        let real = random(&[3, 3], 3);
        let alone = run(&s, &real, 1, 3, &[1.0; 3]);
        let mut padded = real.data().to_vec();
        padded.extend([9.0, -9.0, 4.0, 2.0, 2.0, 2.0]);
        let out = run(&s, &Tensor::new(vec![5, 3], padded).unwrap(), 1, 5, &[1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(&out.data()[..12], alone.data());
        assert!(out.data()[12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_equals_one_at_a_time() {
        let s = params(3, 2, 8);
        let x = random(&[8, 3], 4);
        let mask = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let batched = run(&s, &x, 2, 4, &mask);
        for seq in 0..2 {
            let part = Tensor::new(vec![4, 3], x.data()[seq * 12..(seq + 1) * 12].to_vec()).unwrap();
            let one = run(&s, &part, 1, 4, &mask[seq * 4..(seq + 1) * 4]);
            assert_eq!(one.data(), &batched.data()[seq * 16..(seq + 1) * 16]);
        }
    }

    #[test]
    fn mirrored_parameters_reverse_symmetrically() {
        let mut s = params(3, 2, 9);
        for p in ["w_x", "w_h", "b"] {
            let fw = s.get(&format!("enc.fw.{p}")).unwrap().clone();
            s.insert(format!("enc.bw.{p}"), fw);
        }
        let x = random(&[5, 3], 6);
        let rows: Vec<&[f64]> = (0..5).rev().map(|r| x.row_slice(r)).collect();
        let reversed = Tensor::from_rows(&rows).unwrap();
        let out = run(&s, &x, 1, 5, &[1.0; 5]);
        let out_rev = run(&s, &reversed, 1, 5, &[1.0; 5]);
        let swapped = swap_halves(&out);
        for t in 0..5 {
            let a = out_rev.row_slice(t);
            let b = swapped.row_slice(4 - t);
            assert!(a.iter().zip(b).all(|(u, v)| (u - v).abs() < 1e-14));
        }
    }
}
