//! Two-layer feed-forward network, multi-head scaled dot-product attention and
//! layer normalization, each with a plain parameter struct and a tape-bound
//! counterpart.

use rand::Rng;

use super::{glorot, Matrix, NumericsError, Parameterized, Result, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x ↦ relu(x W1 + b1) W2 + b2` with row-vector inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub weight1: Matrix,
    pub bias1: Matrix,
    pub weight2: Matrix,
    pub bias2: Matrix,
}

impl FfnParams {
    pub fn zeros(d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            weight1: Matrix::zeros(d_in, d_hidden),
            bias1: Matrix::zeros(1, d_hidden),
            weight2: Matrix::zeros(d_hidden, d_out),
            bias2: Matrix::zeros(1, d_out),
        }
    }

    pub fn init(rng: &mut impl Rng, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            weight1: glorot(rng, d_in, d_hidden),
            bias1: Matrix::zeros(1, d_hidden),
            weight2: glorot(rng, d_hidden, d_out),
            bias2: Matrix::zeros(1, d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight1.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.weight1.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight2.cols()
    }

    /// `d_in·d_h + d_h + d_h·d_out + d_out`.
    pub fn count(d_in: usize, d_hidden: usize, d_out: usize) -> usize {
        d_in * d_hidden + d_hidden + d_hidden * d_out + d_out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundFfn {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        BoundFfn {
            weight1: leaf(&self.weight1),
            bias1: leaf(&self.bias1),
            weight2: leaf(&self.weight2),
            bias2: leaf(&self.bias2),
        }
    }
}

impl Parameterized for FfnParams {
    fn visit(&self, f: &mut dyn FnMut(&Matrix)) {
        f(&self.weight1);
        f(&self.bias1);
        f(&self.weight2);
        f(&self.bias2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.weight1);
        f(&mut self.bias1);
        f(&mut self.weight2);
        f(&mut self.bias2);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundFfn {
    pub weight1: Var,
    pub bias1: Var,
    pub weight2: Var,
    pub bias2: Var,
}

impl BoundFfn {
    pub fn vars(&self, out: &mut Vec<Var>) {
        out.extend([self.weight1, self.bias1, self.weight2, self.bias2]);
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.weight1)?;
        let h = tape.add_row(h, self.bias1)?;
        let h = tape.relu(h);
        let y = tape.matmul(h, self.weight2)?;
        tape.add_row(y, self.bias2)
    }
}

/// Applies the FFN to a single input vector.
pub fn ffn_forward(x: &[f64], params: &FfnParams) -> Result<Vec<f64>> {
    if x.len() != params.d_in() {
        return Err(NumericsError::Shape(format!(
            "ffn input has {} entries, expected {}",
            x.len(),
            params.d_in()
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let input = tape.constant(Matrix::row_vector(x));
    let out = bound.forward(&mut tape, input)?;
    Ok(tape.value(out).as_slice().to_vec())
}

/// Multi-head attention with query/key/value/output projections (each
/// `d × d` plus bias). Heads split the model dimension evenly.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_query: Matrix,
    pub b_query: Matrix,
    pub w_key: Matrix,
    pub b_key: Matrix,
    pub w_value: Matrix,
    pub b_value: Matrix,
    pub w_out: Matrix,
    pub b_out: Matrix,
    pub heads: usize,
}

impl AttentionParams {
    fn check_heads(dim: usize, heads: usize) -> Result<()> {
        if heads == 0 || dim == 0 || dim % heads != 0 {
            return Err(NumericsError::Shape(format!(
                "model dim {dim} is not divisible into {heads} heads"
            )));
        }
        Ok(())
    }

    pub fn zeros(dim: usize, heads: usize) -> Result<Self> {
        Self::check_heads(dim, heads)?;
        Ok(Self {
            w_query: Matrix::zeros(dim, dim),
            b_query: Matrix::zeros(1, dim),
            w_key: Matrix::zeros(dim, dim),
            b_key: Matrix::zeros(1, dim),
            w_value: Matrix::zeros(dim, dim),
            b_value: Matrix::zeros(1, dim),
            w_out: Matrix::zeros(dim, dim),
            b_out: Matrix::zeros(1, dim),
            heads,
        })
    }

    pub fn init(rng: &mut impl Rng, dim: usize, heads: usize) -> Result<Self> {
        Self::check_heads(dim, heads)?;
        Ok(Self {
            w_query: glorot(rng, dim, dim),
            b_query: Matrix::zeros(1, dim),
            w_key: glorot(rng, dim, dim),
            b_key: Matrix::zeros(1, dim),
            w_value: glorot(rng, dim, dim),
            b_value: Matrix::zeros(1, dim),
            w_out: glorot(rng, dim, dim),
            b_out: Matrix::zeros(1, dim),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_query.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    /// `4·d² + 4·d`; independent of the head count.
    pub fn count(dim: usize) -> usize {
        4 * dim * dim + 4 * dim
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundAttention {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        BoundAttention {
            w_query: leaf(&self.w_query),
            b_query: leaf(&self.b_query),
            w_key: leaf(&self.w_key),
            b_key: leaf(&self.b_key),
            w_value: leaf(&self.w_value),
            b_value: leaf(&self.b_value),
            w_out: leaf(&self.w_out),
            b_out: leaf(&self.b_out),
            heads: self.heads,
            head_dim: self.head_dim(),
        }
    }
}

impl Parameterized for AttentionParams {
    fn visit(&self, f: &mut dyn FnMut(&Matrix)) {
        f(&self.w_query);
        f(&self.b_query);
        f(&self.w_key);
        f(&self.b_key);
        f(&self.w_value);
        f(&self.b_value);
        f(&self.w_out);
        f(&self.b_out);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.w_query);
        f(&mut self.b_query);
        f(&mut self.w_key);
        f(&mut self.b_key);
        f(&mut self.w_value);
        f(&mut self.b_value);
        f(&mut self.w_out);
        f(&mut self.b_out);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAttention {
    pub w_query: Var,
    pub b_query: Var,
    pub w_key: Var,
    pub b_key: Var,
    pub w_value: Var,
    pub b_value: Var,
    pub w_out: Var,
    pub b_out: Var,
    heads: usize,
    head_dim: usize,
}

impl BoundAttention {
    pub fn vars(&self, out: &mut Vec<Var>) {
        out.extend([
            self.w_query,
            self.b_query,
            self.w_key,
            self.b_key,
            self.w_value,
            self.b_value,
            self.w_out,
            self.b_out,
        ]);
    }

    /// Scaled dot-product attention; softmax runs over the key axis.
    pub fn forward(&self, tape: &mut Tape, queries: Var, keys: Var, values: Var) -> Result<Var> {
        let n_keys = tape.value(keys).rows();
        if n_keys == 0 {
            return Err(NumericsError::Empty("attention over zero keys".into()));
        }
        if tape.value(values).rows() != n_keys {
            return Err(NumericsError::Shape(format!(
                "{} keys but {} values",
                n_keys,
                tape.value(values).rows()
            )));
        }
        let q = tape.matmul(queries, self.w_query)?;
        let q = tape.add_row(q, self.b_query)?;
        let k = tape.matmul(keys, self.w_key)?;
        let k = tape.add_row(k, self.b_key)?;
        let v = tape.matmul(values, self.w_value)?;
        let v = tape.add_row(v, self.b_value)?;

        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, start, self.head_dim)?,
                    tape.slice_cols(k, start, self.head_dim)?,
                    tape.slice_cols(v, start, self.head_dim)?,
                )
            };
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            heads.push(tape.matmul(weights, vh)?);
        }
        let mixed = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let out = tape.matmul(mixed, self.w_out)?;
        tape.add_row(out, self.b_out)
    }
}

/// Attention of `queries` over `keys`/`values` (rows are tokens).
pub fn attention_forward(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    params: &AttentionParams,
) -> Result<Matrix> {
    let d = params.dim();
    for (name, m) in [("queries", queries), ("keys", keys), ("values", values)] {
        if m.cols() != d {
            return Err(NumericsError::Shape(format!(
                "{name} have {} columns, attention dim is {d}",
                m.cols()
            )));
        }
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let q = tape.constant(queries.clone());
    let k = tape.constant(keys.clone());
    let v = tape.constant(values.clone());
    let out = bound.forward(&mut tape, q, k, v)?;
    Ok(tape.value(out).clone())
}

/// Learnable per-feature scale and shift applied after standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, dim, 1.0),
            beta: Matrix::zeros(1, dim),
        }
    }

    pub fn count(dim: usize) -> usize {
        2 * dim
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLayerNorm {
        let (gamma, beta) = if trainable {
            (tape.param(self.gamma.clone()), tape.param(self.beta.clone()))
        } else {
            (
                tape.constant(self.gamma.clone()),
                tape.constant(self.beta.clone()),
            )
        };
        BoundLayerNorm { gamma, beta }
    }
}

impl Parameterized for LayerNormParams {
    fn visit(&self, f: &mut dyn FnMut(&Matrix)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl BoundLayerNorm {
    pub fn vars(&self, out: &mut Vec<Var>) {
        out.extend([self.gamma, self.beta]);
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.layer_norm_rows(x, LAYER_NORM_EPS);
        let y = tape.mul_row(y, self.gamma)?;
        tape.add_row(y, self.beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ffn_zero_weights_annihilate() {
        let p = FfnParams::zeros(3, 4, 2);
        assert_eq!(ffn_forward(&[1.0, -2.0, 3.0], &p).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn ffn_identity_weights_pass_nonnegative_input() {
        let mut p = FfnParams::zeros(3, 3, 3);
        p.weight1 = Matrix::identity(3);
        p.weight2 = Matrix::identity(3);
        assert_eq!(ffn_forward(&[0.5, 0.0, 2.0], &p).unwrap(), vec![0.5, 0.0, 2.0]);
    }

    #[test]
    fn ffn_hand_computed() {
        // h = relu([1, 2]·[[0.5, -1], [0.25, 0.5]] + [0.1, 0.2]) = relu([1.1, 0.2])
        // y = 1.1·2 + 0.2·(−3) + 0.05 = 1.65
        let p = FfnParams {
            weight1: Matrix::from_vec(2, 2, vec![0.5, -1.0, 0.25, 0.5]).unwrap(),
            bias1: Matrix::row_vector(&[0.1, 0.2]),
            weight2: Matrix::from_vec(2, 1, vec![2.0, -3.0]).unwrap(),
            bias2: Matrix::row_vector(&[0.05]),
        };
        let y = ffn_forward(&[1.0, 2.0], &p).unwrap();
        assert!((y[0] - 1.65).abs() < 1e-12);
        // second hidden unit negative → rectified away
        let y = ffn_forward(&[1.0, -2.0], &p).unwrap();
        // h = relu([0.5−0.5+0.1, −1−1+0.2]) = [0.1, 0]; y = 0.2 + 0.05
        assert!((y[0] - 0.25).abs() < 1e-12);
        assert!(ffn_forward(&[1.0], &p).is_err());
    }

    #[test]
    fn ffn_count_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = FfnParams::init(&mut rng, 5, 7, 3);
        assert_eq!(p.num_params(), FfnParams::count(5, 7, 3));
        assert_eq!(FfnParams::count(5, 7, 3), 5 * 7 + 7 + 7 * 3 + 3);
    }

    #[test]
    fn attention_count_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for heads in [1, 2, 4] {
            let p = AttentionParams::init(&mut rng, 8, heads).unwrap();
            assert_eq!(p.num_params(), AttentionParams::count(8));
        }
        assert!(AttentionParams::init(&mut rng, 6, 4).is_err());
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn attention_single_key_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionParams::init(&mut rng, 4, 1).unwrap();
        let queries = random(&mut rng, 3, 4);
        let kv = random(&mut rng, 1, 4);
        let out = attention_forward(&queries, &kv, &kv, &p).unwrap();
        let v = kv.matmul(&p.w_value).unwrap();
        let mut expect = v.matmul(&p.w_out).unwrap();
        expect.add_assign(&p.b_out);
        for r in 0..3 {
            for c in 0..4 {
                assert!((out[(r, c)] - expect[(0, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = AttentionParams::init(&mut rng, 3, 1).unwrap();
        p.w_value = Matrix::identity(3);
        p.w_out = Matrix::identity(3);
        let queries = random(&mut rng, 2, 3);
        // keys identical, values different: use separate matrices
        let keys = Matrix::from_rows(&[vec![0.3, -0.2, 0.9], vec![0.3, -0.2, 0.9]], 3).unwrap();
        let values = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![3.0, 0.0, -1.0]], 3).unwrap();
        let out = attention_forward(&queries, &keys, &values, &p).unwrap();
        for r in 0..2 {
            assert!((out[(r, 0)] - 2.0).abs() < 1e-12);
            assert!((out[(r, 1)] - 1.0).abs() < 1e-12);
            assert!((out[(r, 2)] - 1.0).abs() < 1e-12);
        }
    }

    /// Straight-line attention written independently of the tape.
    fn reference_attention(q_in: &Matrix, k_in: &Matrix, v_in: &Matrix, p: &AttentionParams) -> Matrix {
        let proj = |x: &Matrix, w: &Matrix, b: &Matrix| {
            let mut out = Matrix::zeros(x.rows(), w.cols());
            for i in 0..x.rows() {
                for j in 0..w.cols() {
                    let mut s = b[(0, j)];
                    for k in 0..x.cols() {
                        s += x[(i, k)] * w[(k, j)];
                    }
                    out[(i, j)] = s;
                }
            }
            out
        };
        let q = proj(q_in, &p.w_query, &p.b_query);
        let k = proj(k_in, &p.w_key, &p.b_key);
        let v = proj(v_in, &p.w_value, &p.b_value);
        let dh = p.head_dim();
        let mut mixed = Matrix::zeros(q.rows(), p.dim());
        for h in 0..p.heads {
            for i in 0..q.rows() {
                let mut scores = Vec::new();
                for j in 0..k.rows() {
                    let mut s = 0.0;
                    for c in h * dh..(h + 1) * dh {
                        s += q[(i, c)] * k[(j, c)];
                    }
                    scores.push(s / (dh as f64).sqrt());
                }
                let w = softmax(&scores).unwrap();
                for c in h * dh..(h + 1) * dh {
                    mixed[(i, c)] = (0..k.rows()).map(|j| w[j] * v[(j, c)]).sum();
                }
            }
        }
        proj(&mixed, &p.w_out, &p.b_out)
    }

    #[test]
    fn attention_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for heads in [1, 2] {
            let mut p = AttentionParams::init(&mut rng, 4, heads).unwrap();
            p.b_query = random(&mut rng, 1, 4);
            p.b_key = random(&mut rng, 1, 4);
            p.b_value = random(&mut rng, 1, 4);
            p.b_out = random(&mut rng, 1, 4);
            let q = random(&mut rng, 2, 4);
            let kv = random(&mut rng, 3, 4);
            let got = attention_forward(&q, &kv, &kv, &p).unwrap();
            let want = reference_attention(&q, &kv, &kv, &p);
            for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant_in_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AttentionParams::init(&mut rng, 4, 2).unwrap();
        let q = random(&mut rng, 2, 4);
        let kv = random(&mut rng, 4, 4);
        let perm = kv.select_rows(&[2, 0, 3, 1]);
        let a = attention_forward(&q, &kv, &kv, &p).unwrap();
        let b = attention_forward(&q, &perm, &perm, &p).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_empty_keys() {
        let p = AttentionParams::zeros(2, 1).unwrap();
        let q = Matrix::zeros(1, 2);
        let empty = Matrix::zeros(0, 2);
        assert!(attention_forward(&q, &empty, &empty, &p).is_err());
    }
}
