//! Row-wise primitives shared by the emulator and the tuner, with the
//! backward rules the tuner needs.

use crate::tensor::Mat;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Cached statistics of a layer-norm application.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Mat,
    pub inv_std: Vec<f64>,
}

/// Per-row layer normalization `gain ⊙ (x − μ)/√(σ² + eps) + bias`.
pub fn layer_norm(x: &Mat, gain: &Mat, bias: &Mat, eps: f64) -> (Mat, LayerNormCache) {
    let (n, d) = x.shape();
    let mut normalized = Mat::zeros(n, d);
    let mut out = Mat::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    let g = gain.as_slice();
    let b = bias.as_slice();
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let nr = normalized.row_mut(i);
        for (o, &v) in nr.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let nr = normalized.row(i).to_vec();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = g[j] * nr[j] + b[j];
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

/// Returns `(d_input, d_gain, d_bias)`.
pub fn layer_norm_backward(dy: &Mat, gain: &Mat, cache: &LayerNormCache) -> (Mat, Mat, Mat) {
    let (n, d) = dy.shape();
    let g = gain.as_slice();
    let mut dx = Mat::zeros(n, d);
    let mut dgain = Mat::zeros(1, d);
    let mut dbias = Mat::zeros(1, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.normalized.row(i);
        for j in 0..d {
            dgain.as_mut_slice()[j] += dyr[j] * xh[j];
            dbias.as_mut_slice()[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xh = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xh);
        }
    }
    (dx, dgain, dbias)
}

/// In-place softmax over `row[j]` for `allowed[j]`; disallowed entries are
/// set to exactly zero. Returns `false` when nothing is allowed.
pub fn masked_softmax(row: &mut [f64], allowed: impl Fn(usize) -> bool) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    true
}

/// `x · w + b` for a `1 × out` bias.
pub fn affine(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut y = x.matmul(w);
    y.add_row_broadcast(b);
    y
}
