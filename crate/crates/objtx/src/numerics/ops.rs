//! Pure tensor kernels: matmul, softmax, layer norm, gelu, dropout.
//!
//! These are the reference forward computations. The autodiff graph calls
//! into them so the differentiable path and the plain path cannot drift.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::rng::SubRng;

/// Train/eval switch for stochastic layers.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Row-major matrix product of rank-2 tensors: (m x k) * (k x n) -> (m x n).
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Shape(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut c = Tensor::zeros(&[m, n])?;
    S::gemm(
        m,
        k,
        n,
        S::ONE,
        a.data(),
        k as isize,
        1,
        b.data(),
        n as isize,
        1,
        S::ZERO,
        c.data_mut(),
        n as isize,
        1,
    );
    Ok(c)
}

/// Iterate the lanes of `shape` along `axis`: yields (base offset, stride)
/// for each lane of length `shape[axis]`.
fn lanes(shape: &[usize], axis: usize) -> impl Iterator<Item = (usize, usize)> {
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    (0..outer).flat_map(move |o| (0..inner).map(move |i| (o * dim * inner + i, inner)))
}

/// Softmax along `axis` with max subtraction. A constant lane maps to the
/// uniform distribution.
pub fn softmax<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let dim = x.shape()[axis];
    let mut out = x.clone();
    for (base, stride) in lanes(x.shape(), axis) {
        let mut max = f64::NEG_INFINITY;
        for i in 0..dim {
            max = max.max(x.data()[base + i * stride].to_f64());
        }
        let mut sum = 0.0;
        let mut exps = vec![0.0f64; dim];
        for i in 0..dim {
            let e = (x.data()[base + i * stride].to_f64() - max).exp();
            exps[i] = e;
            sum += e;
        }
        for i in 0..dim {
            out.data_mut()[base + i * stride] = S::from_f64(exps[i] / sum);
        }
    }
    Ok(out)
}

/// Layer normalization over the last axis with population variance:
/// `gamma * (x - mean) / sqrt(var + eps) + beta`.
/// `gamma` and `beta` are rank-1 of the last-axis extent.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    let d = *x.shape().last().expect("rank >= 1");
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::Shape(format!(
            "layer_norm scale/shift need {d} elements, got {} and {}",
            gamma.numel(),
            beta.numel()
        )));
    }
    let mut out = x.clone();
    let rows = x.numel() / d;
    for r in 0..rows {
        let lane = &x.data()[r * d..(r + 1) * d];
        let mean: f64 = lane.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
        let var: f64 = lane
            .iter()
            .map(|v| {
                let c = v.to_f64() - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            let xhat = (lane[j].to_f64() - mean) * inv;
            out.data_mut()[r * d + j] =
                S::from_f64(xhat * gamma.data()[j].to_f64() + beta.data()[j].to_f64());
        }
    }
    Ok(out)
}

/// Exact gaussian-CDF gelu: `x * Phi(x)`.
pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    let xf = x.to_f64();
    let phi = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
    S::from_f64(xf * phi)
}

/// Derivative of gelu: `Phi(x) + x * phi(x)`.
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(gelu_scalar)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, stable on both tails.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverted dropout. Training mode zeroes each element with probability
/// `rate` and scales survivors by `1/(1-rate)`; eval mode is the identity.
/// `rate` outside `[0, 1)` is a config error.
pub fn dropout<S: Scalar>(
    x: &Tensor<S>,
    rate: f64,
    mode: Mode,
    rng: &mut SubRng,
) -> Result<Tensor<S>> {
    let (keep, scale) = dropout_mask(x.numel(), rate, mode, rng)?;
    let mut out = x.clone();
    for (v, &k) in out.data_mut().iter_mut().zip(&keep) {
        *v = if k { *v * S::from_f64(scale) } else { S::ZERO };
    }
    Ok(out)
}

/// Keep-mask and survivor scale for inverted dropout. Eval mode keeps
/// everything at scale 1. Draws `numel` uniforms in training mode.
pub fn dropout_mask(
    numel: usize,
    rate: f64,
    mode: Mode,
    rng: &mut SubRng,
) -> Result<(Vec<bool>, f64)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((vec![true; numel], 1.0));
    }
    let keep: Vec<bool> = (0..numel).map(|_| rng.gen::<f64>() >= rate).collect();
    Ok((keep, 1.0 / (1.0 - rate)))
}
