//! Row-wise elementwise kernels used by the encoder blocks.

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Row-wise softmax of `scale · m`, stabilized by subtracting each row's maximum.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>, scale: T) -> Result<Matrix<T>> {
    if !m.is_finite() || !scale.is_finite() {
        return Err(Error::Data("softmax input has non-finite entries".into()));
    }
    let mut out = m.scale(scale);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Per-row layer normalization: `(x - mean) / sqrt(var + eps) * gain + bias`, with the
/// biased (population) variance.
pub fn layernorm<T: Scalar>(m: &Matrix<T>, gain: &[T], bias: &[T], eps: T) -> Result<Matrix<T>> {
    if gain.len() != m.cols() || bias.len() != m.cols() {
        return shape_err(format!(
            "layernorm over {} features with gain {} / bias {}",
            m.cols(),
            gain.len(),
            bias.len()
        ));
    }
    let n = T::from_usize(m.cols().max(1)).unwrap();
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gain).zip(bias) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// GELU, tanh approximation: `0.5 x (1 + tanh(√(2/π) (x + 0.044715 x³)))`.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    m.map(gelu_scalar)
}
