//! Self-attention evaluated in the reduced dimensions of factorized projections.
//!
//! With `A = X·W_Q1` and `B = X·W_K1` shared by every head, head `i` has
//! `Q_i = A·W_Q2ⁱ + b_Qⁱ` and `K_i = B·W_K2ⁱ + b_Kⁱ`, so
//!
//! ```text
//! Q_i K_iᵀ = A (W_Q2ⁱ W_K2ⁱᵀ) Bᵀ + (A W_Q2ⁱ b_Kⁱ) 1ᵀ + 1 (B W_K2ⁱ b_Qⁱ)ᵀ + b_Qⁱ·b_Kⁱ
//! ```
//!
//! and because softmax rows sum to one, `S_i V_i = (S_i (X W_V1)) W_V2ⁱ + b_Vⁱ`.
//! A dense projection is the special case `W_1 = I` with rank `d_model`.

use serde::{Deserialize, Serialize};

use crate::compress::Projection;
use crate::encoder::multi_head_attention;
use crate::error::{shape_err, Error, Result};
use crate::flops::{macs_score, macs_value};
use crate::linalg::{softmax_rows, Matrix};
use crate::scalar::Scalar;

/// Largest tolerated deviation of a score row sum from 1 in [`value_proj_reordered`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScorePath {
    /// Materialize `Q_i`, `K_i`, then `Q_i K_iᵀ`.
    Standard,
    /// Expand the product through the reduced activations.
    Factorized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValuePath {
    /// `S_i · V_i`.
    Standard,
    /// `(S_i · X W_V1) · W_V2ⁱ + b_Vⁱ`.
    Reordered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttnPath {
    pub score: ScorePath,
    pub value: ValuePath,
}

impl AttnPath {
    pub const STANDARD: AttnPath = AttnPath { score: ScorePath::Standard, value: ValuePath::Standard };

    pub const ALL: [AttnPath; 4] = [
        AttnPath::STANDARD,
        AttnPath { score: ScorePath::Standard, value: ValuePath::Reordered },
        AttnPath { score: ScorePath::Factorized, value: ValuePath::Standard },
        AttnPath { score: ScorePath::Factorized, value: ValuePath::Reordered },
    ];

    /// Takes an alternative path only when the cost model says it is strictly cheaper.
    /// The factorized score can only win when `min(k_q, k_k) < d_head`, and the reordered
    /// value projection wins exactly when `k_v < d_head`.
    pub fn select(seq_len: usize, d_head: usize, k_q: usize, k_k: usize, k_v: usize) -> Self {
        let score = if macs_score(seq_len, d_head, k_q, k_k, ScorePath::Factorized)
            < macs_score(seq_len, d_head, k_q, k_k, ScorePath::Standard)
        {
            ScorePath::Factorized
        } else {
            ScorePath::Standard
        };
        let value = if macs_value(seq_len, d_head, k_v, ValuePath::Reordered)
            < macs_value(seq_len, d_head, k_v, ValuePath::Standard)
        {
            ValuePath::Reordered
        } else {
            ValuePath::Standard
        };
        Self { score, value }
    }
}

/// Association order of the main score term `A·M·Bᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreOrder {
    /// `(A·M)·Bᵀ`: the `L × L` product has inner dimension `k_k`.
    FoldIntoQuery,
    /// `A·(B·Mᵀ)ᵀ`: the `L × L` product has inner dimension `k_q`.
    FoldIntoKey,
}

impl ScoreOrder {
    /// Order whose `L × L` product runs over `min(k_q, k_k)`.
    pub fn cheapest(k_q: usize, k_k: usize) -> Self {
        if k_q <= k_k {
            ScoreOrder::FoldIntoKey
        } else {
            ScoreOrder::FoldIntoQuery
        }
    }
}

/// One head's slice of a projection's up-factor and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjection<T> {
    /// `k × d_head`.
    pub up: Matrix<T>,
    pub bias: Vec<T>,
}

/// A Q, K or V projection split into a shared reduction and per-head up-projections.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedProjection<T> {
    pub source: Projection<T>,
    pub heads: Vec<HeadProjection<T>>,
}

impl<T: Scalar> SharedProjection<T> {
    fn new(source: Projection<T>, n_heads: usize, d_head: usize) -> Result<Self> {
        let (up, bias) = match &source {
            Projection::Dense(l) => (&l.weight, &l.bias),
            Projection::Factorized(f) => (&f.w_up, &f.bias),
        };
        if up.cols() != n_heads * d_head {
            return shape_err(format!("projection width {} for {n_heads} heads of {d_head}", up.cols()));
        }
        let heads = (0..n_heads)
            .map(|h| {
                Ok(HeadProjection {
                    up: up.col_slice(h * d_head, (h + 1) * d_head)?,
                    bias: bias[h * d_head..(h + 1) * d_head].to_vec(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { source, heads })
    }

    /// Width of the shared reduced activations.
    pub fn rank(&self) -> usize {
        self.source.inner_rank()
    }

    /// `X · W_1`, or `X` itself for a dense projection.
    pub fn reduce(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        match &self.source {
            Projection::Dense(_) => Ok(x.clone()),
            Projection::Factorized(f) => x.matmul(&f.w_down),
        }
    }

    /// Head `i` output from reduced activations: `reduced · W_2ⁱ + bⁱ`.
    pub fn head_output(&self, reduced: &Matrix<T>, head: usize) -> Result<Matrix<T>> {
        let h = &self.heads[head];
        reduced.matmul(&h.up)?.add_row(&h.bias)
    }
}

/// Attention parameters of one block, ready for any [`AttnPath`].
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedAttnParams<T> {
    pub n_heads: usize,
    pub d_head: usize,
    pub q: SharedProjection<T>,
    pub k: SharedProjection<T>,
    pub v: SharedProjection<T>,
    pub out: Projection<T>,
}

impl<T: Scalar> FactorizedAttnParams<T> {
    pub fn new(
        q: Projection<T>,
        k: Projection<T>,
        v: Projection<T>,
        out: Projection<T>,
        n_heads: usize,
        d_head: usize,
    ) -> Result<Self> {
        let d_model = n_heads * d_head;
        for (name, p) in [("q", &q), ("k", &k), ("v", &v), ("out", &out)] {
            if p.d_in() != d_model || p.d_out() != d_model {
                return shape_err(format!("{name} projection is {}x{}, expected {d_model}x{d_model}", p.d_in(), p.d_out()));
            }
        }
        Ok(Self {
            n_heads,
            d_head,
            q: SharedProjection::new(q, n_heads, d_head)?,
            k: SharedProjection::new(k, n_heads, d_head)?,
            v: SharedProjection::new(v, n_heads, d_head)?,
            out,
        })
    }

    fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.n_heads {
            return Err(Error::Range(format!("head {head} of {}", self.n_heads)));
        }
        Ok(())
    }
}

/// Pre-softmax scores `Q_i K_iᵀ` of head `head` from `A = X·W_Q1` and `B = X·W_K1`, using the
/// cheaper association order for the main term.
pub fn attn_scores_factorized<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    params: &FactorizedAttnParams<T>,
    head: usize,
) -> Result<Matrix<T>> {
    let order = ScoreOrder::cheapest(params.q.rank(), params.k.rank());
    attn_scores_factorized_ordered(a, b, params, head, order)
}

pub fn attn_scores_factorized_ordered<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    params: &FactorizedAttnParams<T>,
    head: usize,
    order: ScoreOrder,
) -> Result<Matrix<T>> {
    params.check_head(head)?;
    let (qh, kh) = (&params.q.heads[head], &params.k.heads[head]);
    if a.cols() != qh.up.rows() || b.cols() != kh.up.rows() || a.rows() != b.rows() {
        return shape_err(format!(
            "reduced activations {:?} and {:?} for ranks {} and {}",
            a.shape(),
            b.shape(),
            qh.up.rows(),
            kh.up.rows()
        ));
    }
    // k_q × k_k; weight-only, independent of L
    let m = qh.up.matmul_transposed(&kh.up)?;
    let mut scores = match order {
        ScoreOrder::FoldIntoQuery => a.matmul(&m)?.matmul_transposed(b)?,
        ScoreOrder::FoldIntoKey => a.matmul_transposed(&b.matmul_transposed(&m)?)?,
    };
    let row_terms = a.matvec(&qh.up.matvec(&kh.bias)?)?;
    let col_terms = b.matvec(&kh.up.matvec(&qh.bias)?)?;
    let constant: T = qh.bias.iter().zip(&kh.bias).map(|(&x, &y)| x * y).sum();
    for (r, &u) in row_terms.iter().enumerate() {
        for (s, &v) in scores.row_mut(r).iter_mut().zip(&col_terms) {
            *s += u + v + constant;
        }
    }
    Ok(scores)
}

/// `S · V_i` computed as `(S · xv) · W_V2ⁱ + b_Vⁱ` with `xv = X·W_V1`. Requires `S` to be
/// row-stochastic, since the bias passes through `S` unchanged only then.
pub fn value_proj_reordered<T: Scalar>(
    s: &Matrix<T>,
    xv: &Matrix<T>,
    params: &FactorizedAttnParams<T>,
    head: usize,
) -> Result<Matrix<T>> {
    params.check_head(head)?;
    if s.rows() != s.cols() || s.cols() != xv.rows() {
        return shape_err(format!("scores {:?} with reduced values {:?}", s.shape(), xv.shape()));
    }
    let tol = T::lit(ROW_SUM_TOLERANCE).max(T::epsilon() * T::from_usize(4 * s.cols()).unwrap());
    for r in 0..s.rows() {
        let sum: T = s.row(r).iter().copied().sum();
        if (sum - T::one()).abs() > tol {
            return Err(Error::Contract(format!("score row {r} sums to {sum}, not 1")));
        }
    }
    params.v.head_output(&s.matmul(xv)?, head)
}

/// Multi-head self-attention including the output projection, evaluated along `path`.
/// Every path computes the same function; they differ only in cost.
pub fn attention_block<T: Scalar>(x: &Matrix<T>, params: &FactorizedAttnParams<T>, path: AttnPath) -> Result<Matrix<T>> {
    if x.cols() != params.n_heads * params.d_head {
        return shape_err(format!("attention input width {} for d_model {}", x.cols(), params.n_heads * params.d_head));
    }
    let heads_out = if path == AttnPath::STANDARD {
        let q = params.q.source.apply(x)?;
        let k = params.k.source.apply(x)?;
        let v = params.v.source.apply(x)?;
        multi_head_attention(&q, &k, &v, params.n_heads, params.d_head)?
    } else {
        let a = params.q.reduce(x)?;
        let b = params.k.reduce(x)?;
        let xv = params.v.reduce(x)?;
        let scale = T::one() / T::from_usize(params.d_head).unwrap().sqrt();
        let heads = (0..params.n_heads)
            .map(|h| {
                let scores = match path.score {
                    ScorePath::Standard => {
                        params.q.head_output(&a, h)?.matmul_transposed(&params.k.head_output(&b, h)?)?
                    }
                    ScorePath::Factorized => attn_scores_factorized(&a, &b, params, h)?,
                };
                let s = softmax_rows(&scores, scale)?;
                match path.value {
                    ValuePath::Standard => s.matmul(&params.v.head_output(&xv, h)?),
                    ValuePath::Reordered => value_proj_reordered(&s, &xv, params, h),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Matrix::hstack(&heads)?
    };
    params.out.apply(&heads_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::FactorizedLinear;
    use crate::encoder::Linear;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn factorized(d: usize, k: usize, rng: &mut ChaCha8Rng, zero_bias: bool) -> Projection<f64> {
        let bias = if zero_bias { vec![0.0; d] } else { rand_vec(d, rng) };
        Projection::Factorized(FactorizedLinear::new(rand_matrix(d, k, rng), rand_matrix(k, d, rng), bias).unwrap())
    }

    fn params(d_head: usize, heads: usize, kq: usize, kk: usize, kv: usize, seed: u64, zero_bias: bool) -> FactorizedAttnParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = d_head * heads;
        let q = factorized(d, kq, &mut rng, zero_bias);
        let k = factorized(d, kk, &mut rng, zero_bias);
        let v = factorized(d, kv, &mut rng, zero_bias);
        let out = Projection::Dense(Linear::new(rand_matrix(d, d, &mut rng), rand_vec(d, &mut rng)).unwrap());
        FactorizedAttnParams::new(q, k, v, out, heads, d_head).unwrap()
    }

    fn direct_scores(x: &Matrix<f64>, p: &FactorizedAttnParams<f64>, h: usize) -> Matrix<f64> {
        let q = p.q.source.apply(x).unwrap().col_slice(h * p.d_head, (h + 1) * p.d_head).unwrap();
        let k = p.k.source.apply(x).unwrap().col_slice(h * p.d_head, (h + 1) * p.d_head).unwrap();
        q.matmul(&k.transpose()).unwrap()
    }

    #[test]
    fn bias_free_scores_reduce_to_main_term() {
        let p = params(4, 2, 2, 3, 2, 1, true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_matrix(8, 8, &mut rng);
        let (a, b) = (p.q.reduce(&x).unwrap(), p.k.reduce(&x).unwrap());
        let s = attn_scores_factorized(&a, &b, &p, 1).unwrap();
        let main = a.matmul(&p.q.heads[1].up).unwrap().matmul_transposed(&b.matmul(&p.k.heads[1].up).unwrap()).unwrap();
        assert!(s.max_abs_diff(&main) < 1e-12);
    }

    #[test]
    fn scores_match_direct_computation() {
        let p = params(4, 1, 2, 2, 2, 3, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_matrix(8, 4, &mut rng);
        let (a, b) = (p.q.reduce(&x).unwrap(), p.k.reduce(&x).unwrap());
        assert!(attn_scores_factorized(&a, &b, &p, 0).unwrap().max_abs_diff(&direct_scores(&x, &p, 0)) < 1e-10);
    }

    #[test]
    fn both_orders_agree() {
        let p = params(6, 2, 2, 5, 3, 5, false);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_matrix(9, 12, &mut rng);
        let (a, b) = (p.q.reduce(&x).unwrap(), p.k.reduce(&x).unwrap());
        for h in 0..2 {
            let s1 = attn_scores_factorized_ordered(&a, &b, &p, h, ScoreOrder::FoldIntoQuery).unwrap();
            let s2 = attn_scores_factorized_ordered(&a, &b, &p, h, ScoreOrder::FoldIntoKey).unwrap();
            assert!(s1.max_abs_diff(&s2) < 1e-10);
            assert!(s1.max_abs_diff(&direct_scores(&x, &p, h)) < 1e-10);
        }
        assert_eq!(ScoreOrder::cheapest(2, 5), ScoreOrder::FoldIntoKey);
        assert_eq!(ScoreOrder::cheapest(5, 2), ScoreOrder::FoldIntoQuery);
    }

    #[test]
    fn identity_and_uniform_attention() {
        let p = params(4, 2, 2, 2, 2, 7, false);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_matrix(8, 8, &mut rng);
        let xv = p.v.reduce(&x).unwrap();
        let v0 = p.v.head_output(&xv, 0).unwrap();
        let out = value_proj_reordered(&Matrix::identity(8), &xv, &p, 0).unwrap();
        assert!(out.max_abs_diff(&v0) < 1e-12);

        let uniform = Matrix::from_fn(8, 8, |_, _| 1.0 / 8.0);
        let out = value_proj_reordered(&uniform, &xv, &p, 0).unwrap();
        let mean = v0.column_means();
        for r in 0..8 {
            for (a, b) in out.row(r).iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reordered_value_matches_direct() {
        let p = params(4, 2, 2, 2, 2, 9, false);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_matrix(8, 8, &mut rng);
        let s = softmax_rows(&rand_matrix(8, 8, &mut rng), 1.0).unwrap();
        let xv = p.v.reduce(&x).unwrap();
        let direct = s.matmul(&p.v.source.apply(&x).unwrap().col_slice(4, 8).unwrap()).unwrap();
        assert!(value_proj_reordered(&s, &xv, &p, 1).unwrap().max_abs_diff(&direct) < 1e-10);
    }

    #[test]
    fn non_stochastic_scores_rejected() {
        let p = params(4, 1, 2, 2, 2, 11, false);
        let s = Matrix::identity(3).scale(1.1);
        let xv = Matrix::zeros(3, 2);
        assert!(matches!(value_proj_reordered(&s, &xv, &p, 0), Err(Error::Contract(_))));
        assert!(matches!(value_proj_reordered(&Matrix::identity(3), &xv, &p, 1), Err(Error::Range(_))));
    }

    #[test]
    fn all_paths_agree() {
        let p = params(8, 4, 4, 12, 3, 12, false);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_matrix(16, 32, &mut rng);
        let reference = attention_block(&x, &p, AttnPath::STANDARD).unwrap();
        for path in AttnPath::ALL {
            assert!(attention_block(&x, &p, path).unwrap().max_abs_diff(&reference) < 1e-8, "{path:?}");
        }
    }

    #[test]
    fn selector_follows_rank_conditions() {
        let p = AttnPath::select(1500, 64, 16, 16, 32);
        assert_eq!(p, AttnPath { score: ScorePath::Factorized, value: ValuePath::Reordered });
        assert_eq!(AttnPath::select(1500, 64, 64, 1280, 64), AttnPath::STANDARD);
        assert_eq!(AttnPath::select(1500, 64, 1280, 1280, 1280), AttnPath::STANDARD);
    }

    #[test]
    fn shape_errors() {
        let p = params(4, 1, 2, 2, 2, 14, false);
        let a = Matrix::zeros(5, 3);
        let b = Matrix::zeros(5, 2);
        assert!(matches!(attn_scores_factorized(&a, &b, &p, 0), Err(Error::Shape(_))));
        assert!(attention_block(&Matrix::zeros(5, 3), &p, AttnPath::STANDARD).is_err());
    }
}
