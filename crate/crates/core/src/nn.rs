//! Parameter stores and the layers the staged models are built from.
//!
//! Layers only hold slot indices into a [`ParamStore`]; the store's group
//! number is supplied at forward time, so one tape can mix several stores
//! (e.g. a frozen encoder next to a trainable head).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{ParamRef, Tape, Var};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        self.feed_hash(&mut h);
        hex::encode(h.finalize())
    }

    pub(crate) fn feed_hash(&self, h: &mut Sha256) {
        for (name, m) in self.names.iter().zip(&self.values) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }

    /// Copies values from `other` slot by slot; shapes and names must match.
    pub fn load_from(&mut self, other: &ParamStore) -> bool {
        if self.names != other.names
            || self.values.iter().zip(&other.values).any(|(a, b)| a.shape() != b.shape())
        {
            return false;
        }
        self.values.clone_from(&other.values);
        true
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual dense-layer default.
pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sizes match")
}

pub fn normal_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sizes match")
}

#[inline]
fn p(tape: &mut Tape<'_>, group: usize, index: usize) -> Var {
    tape.param(ParamRef { group, index })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    w: usize,
    b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(format!("{name}.weight"), uniform_init(rng, in_dim, out_dim, in_dim));
        let b = store.add(format!("{name}.bias"), uniform_init(rng, 1, out_dim, in_dim));
        Self { w, b, in_dim, out_dim }
    }

    pub fn weight_slot(&self) -> usize {
        self.w
    }

    pub fn bias_slot(&self) -> usize {
        self.b
    }

    pub fn forward(&self, tape: &mut Tape<'_>, group: usize, x: Var) -> Var {
        let w = p(tape, group, self.w);
        let b = p(tape, group, self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    gamma: usize,
    beta: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0));
        let beta = store.add(format!("{name}.beta"), Matrix::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, group: usize, x: Var) -> Var {
        let g = p(tape, group, self.gamma);
        let b = p(tape, group, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Two dense layers with `tanh` after each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            first: Linear::new(store, rng, &format!("{name}.0"), in_dim, hidden),
            second: Linear::new(store, rng, &format!("{name}.1"), hidden, out_dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, group: usize, x: Var) -> Var {
        let h = self.first.forward(tape, group, x);
        let h = tape.tanh(h);
        let o = self.second.forward(tape, group, h);
        tape.tanh(o)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs, so the same layer serves self- and cross-attention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            output: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    /// Returns the projected attention output and the per-head weight matrices
    /// (queries x keys). Keys with `key_mask[j] == false` receive zero weight.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape<'_>,
        group: usize,
        queries: Var,
        keys_values: Var,
        key_mask: Option<&[bool]>,
    ) -> (Var, Vec<Var>) {
        let q = self.query.forward(tape, group, queries);
        let k = self.key.forward(tape, group, keys_values);
        let v = self.value.forward(tape, group, keys_values);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * head_dim, head_dim),
                    tape.slice_cols(k, h * head_dim, head_dim),
                    tape.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let w = tape.softmax_rows(scores, key_mask);
            outs.push(tape.matmul(w, vh));
            weights.push(w);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        (self.output.forward(tape, group, merged), weights)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, group: usize, queries: Var, keys_values: Var, key_mask: Option<&[bool]>) -> Var {
        self.forward_with_weights(tape, group, queries, keys_values, key_mask).0
    }
}

/// Single-direction GRU with the gate layout `[reset | update | candidate]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gru {
    pub input: Linear,
    pub recurrent: Linear,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, hidden: usize) -> Self {
        Self {
            input: Linear::new(store, rng, &format!("{name}.ih"), in_dim, 3 * hidden),
            recurrent: Linear::new(store, rng, &format!("{name}.hh"), hidden, 3 * hidden),
            hidden,
        }
    }

    /// Runs over the rows of `x` (`K x in`) and returns the `K x hidden`
    /// state sequence in the original row order.
    pub fn forward(&self, tape: &mut Tape<'_>, group: usize, x: Var, reverse: bool) -> Var {
        let steps = tape.value(x).rows();
        self.forward_packed(tape, group, x, &[steps], reverse)
    }

    /// Runs several independent sequences stacked row-wise in `x`, with
    /// `lengths` giving each sequence's row count. All sequences advance
    /// together; one that has ended simply drops out of the batch, so no
    /// padding is ever fed through the cell.
    pub fn forward_packed(&self, tape: &mut Tape<'_>, group: usize, x: Var, lengths: &[usize], reverse: bool) -> Var {
        let total: usize = lengths.iter().sum();
        assert_eq!(tape.value(x).rows(), total, "lengths must cover every row");
        let h = self.hidden;
        let mut offsets = Vec::with_capacity(lengths.len());
        let mut acc = 0;
        for &l in lengths {
            offsets.push(acc);
            acc += l;
        }
        // longest first, so the live sequences at any step form a prefix
        let mut order: Vec<usize> = (0..lengths.len()).filter(|&i| lengths[i] > 0).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(lengths[i]));
        let max_len = order.first().map_or(0, |&i| lengths[i]);

        let projected = self.input.forward(tape, group, x);
        let mut state = tape.constant(Matrix::zeros(order.len(), h));
        let mut outputs = Vec::with_capacity(max_len);
        let mut row_of = vec![0usize; total];
        let mut emitted = 0;
        for t in 0..max_len {
            let live = order.iter().take_while(|&&i| lengths[i] > t).count();
            let rows: Vec<usize> = order[..live]
                .iter()
                .map(|&i| offsets[i] + if reverse { lengths[i] - 1 - t } else { t })
                .collect();
            if live < tape.value(state).rows() {
                state = tape.slice_rows(state, 0, live);
            }
            let xt = tape.gather_rows(projected, &rows);
            let ht = self.recurrent.forward(tape, group, state);
            let xr = tape.slice_cols(xt, 0, h);
            let xz = tape.slice_cols(xt, h, h);
            let xn = tape.slice_cols(xt, 2 * h, h);
            let hr = tape.slice_cols(ht, 0, h);
            let hz = tape.slice_cols(ht, h, h);
            let hn = tape.slice_cols(ht, 2 * h, h);
            let r = tape.add(xr, hr);
            let r = tape.sigmoid(r);
            let z = tape.add(xz, hz);
            let z = tape.sigmoid(z);
            let gated = tape.mul(r, hn);
            let n = tape.add(xn, gated);
            let n = tape.tanh(n);
            // (1 - z) * n + z * h  ==  n + z * (h - n)
            let diff = tape.sub(state, n);
            let step = tape.mul(z, diff);
            state = tape.add(n, step);
            outputs.push(state);
            for (k, &row) in rows.iter().enumerate() {
                row_of[row] = emitted + k;
            }
            emitted += live;
        }
        if outputs.is_empty() {
            return tape.constant(Matrix::zeros(0, h));
        }
        let stacked = if outputs.len() == 1 { outputs[0] } else { tape.concat_rows(&outputs) };
        tape.gather_rows(stacked, &row_of)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiGru {
    pub forward_dir: Gru,
    pub backward_dir: Gru,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, hidden: usize) -> Self {
        Self {
            forward_dir: Gru::new(store, rng, &format!("{name}.fwd"), in_dim, hidden),
            backward_dir: Gru::new(store, rng, &format!("{name}.bwd"), in_dim, hidden),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.forward_dir.hidden + self.backward_dir.hidden
    }

    /// `[forward states | backward states]`, one row per step.
    pub fn forward(&self, tape: &mut Tape<'_>, group: usize, x: Var) -> Var {
        let steps = tape.value(x).rows();
        self.forward_packed(tape, group, x, &[steps])
    }

    /// Packed variant; see [`Gru::forward_packed`].
    pub fn forward_packed(&self, tape: &mut Tape<'_>, group: usize, x: Var, lengths: &[usize]) -> Var {
        let f = self.forward_dir.forward_packed(tape, group, x, lengths, false);
        let b = self.backward_dir.forward_packed(tape, group, x, lengths, true);
        tape.concat_cols(&[f, b])
    }
}

/// Row-major `n x n` attention mask (`n` = sum of `lengths`) that lets each
/// row attend only within its own sequence.
pub fn block_diagonal_mask(lengths: &[usize]) -> Vec<bool> {
    let n: usize = lengths.iter().sum();
    let mut mask = vec![false; n * n];
    let mut start = 0;
    for &l in lengths {
        for r in start..start + l {
            mask[r * n + start..r * n + start + l].fill(true);
        }
        start += l;
    }
    mask
}

/// Draws a `u64` sub-seed so that independent components get decorrelated
/// streams from one experiment seed.
pub fn derive_seed(seed: u64, salt: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(salt.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

pub fn seeded_rng(seed: u64, salt: &str) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(derive_seed(seed, salt))
}

/// Fisher-Yates permutation of `0..n` from the given rng.
pub fn permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Gradients;

    fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        normal_init(rng, rows, cols, 1.0)
    }

    #[test]
    fn packed_gru_matches_one_sequence_at_a_time() {
        let mut rng = seeded_rng(1, "gru");
        let mut store = ParamStore::new();
        let gru = BiGru::new(&mut store, &mut rng, "g", 5, 7);
        let lengths = [3usize, 1, 4];
        let x = random_input(&mut rng, 8, 5);
        let mut tape = Tape::new(vec![store.values()]);
        let xv = tape.constant(x.clone());
        let packed = gru.forward_packed(&mut tape, 0, xv, &lengths);
        let packed = tape.value(packed).clone();
        let mut start = 0;
        for &l in &lengths {
            let mut t2 = Tape::new(vec![store.values()]);
            let xi = t2.constant(x.select_rows(&(start..start + l).collect::<Vec<_>>()));
            let single = gru.forward(&mut t2, 0, xi);
            let expect = t2.value(single);
            for r in 0..l {
                for (a, b) in packed.row(start + r).iter().zip(expect.row(r)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            start += l;
        }
    }

    #[test]
    fn reversal_swaps_direction_blocks() {
        let mut rng = seeded_rng(2, "gru");
        let mut store = ParamStore::new();
        let gru = BiGru::new(&mut store, &mut rng, "g", 4, 6);
        // mirror the parameters so both directions compute the same function
        let n = store.len() / 2;
        for i in 0..n {
            let v = store.values()[i].clone();
            store.values_mut()[n + i] = v;
        }
        let x = random_input(&mut rng, 5, 4);
        let reversed = x.select_rows(&[4, 3, 2, 1, 0]);
        let run = |m: &Matrix| {
            let mut tape = Tape::new(vec![store.values()]);
            let v = tape.constant(m.clone());
            let out = gru.forward(&mut tape, 0, v);
            tape.value(out).clone()
        };
        let a = run(&x);
        let b = run(&reversed).select_rows(&[4, 3, 2, 1, 0]);
        for r in 0..5 {
            assert_eq!(&a.row(r)[..6], &b.row(r)[6..]);
            assert_eq!(&a.row(r)[6..], &b.row(r)[..6]);
        }
    }

    #[test]
    fn block_mask_layout() {
        let m = block_diagonal_mask(&[2, 1]);
        let expect = [true, true, false, true, true, false, false, false, true];
        assert_eq!(m, expect);
    }

    #[test]
    fn attention_respects_block_mask() {
        let mut rng = seeded_rng(3, "mha");
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 8, 2);
        let x = random_input(&mut rng, 5, 8);
        let mask = block_diagonal_mask(&[3, 2]);
        let mut tape = Tape::new(vec![store.values()]);
        let xv = tape.input(x.clone(), true);
        let (out, weights) = mha.forward_with_weights(&mut tape, 0, xv, xv, Some(&mask));
        for w in &weights {
            let wv = tape.value(*w);
            for r in 0..5 {
                let total: f64 = wv.row(r).iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
                for c in 0..5 {
                    if !mask[r * 5 + c] {
                        assert_eq!(wv.get(r, c), 0.0);
                    }
                }
            }
        }
        // rows of the second sequence carry no gradient into the first
        let tail = tape.slice_rows(out, 3, 2);
        let loss = tape.sum(tail);
        let mut grads = Gradients::new(&[store.len()]);
        let g = tape.backward(loss, &mut grads);
        let gx = g.get(xv).unwrap();
        assert!(gx.row(0).iter().chain(gx.row(1)).chain(gx.row(2)).all(|&v| v == 0.0));
    }
}
