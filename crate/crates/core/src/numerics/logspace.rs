//! Log-domain reductions.

use crate::error::{invalid, Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// `log Σ exp(xs_i)` with max-shift; `-inf` iff every input is `-inf`.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    let max = xs
        .iter()
        .copied()
        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
        .ok_or(Error::EmptyReduction)?;
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if max == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    Ok(max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln())
}

/// Two-argument `logsumexp`.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Log-softmax along `axis` of a tensor of any rank.
pub fn softmax_log<T: Scalar>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = logits.shape();
    if axis >= shape.len() {
        return Err(invalid(format!("axis {axis} for rank {}", shape.len())));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = logits.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let max = (0..n).map(|k| data[at(k)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..n).map(|k| (data[at(k)] - max).exp()).sum();
            let lse = max + z.ln();
            for k in 0..n {
                data[at(k)] -= lse;
            }
        }
    }
    Ok(out)
}
