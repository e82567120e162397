//! Building blocks with explicit reverse-mode passes.

use super::tensor::{dot, Mat};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Saved activations of a layer norm.
#[derive(Clone, Debug)]
pub(crate) struct LayerNormCache {
    pub normalized: Mat,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Mat, gain: &Mat, bias: &Mat) -> (Mat, LayerNormCache) {
    let n = x.cols();
    let mut normalized = Mat::zeros(x.rows(), n);
    let mut out = Mat::zeros(x.rows(), n);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xh = normalized.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let o = out.row_mut(r);
        for c in 0..n {
            o[c] = gain.data()[c] * xh[c] + bias.data()[c];
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

/// Returns `(d_input, d_gain, d_bias)`.
pub(crate) fn layer_norm_backward(
    dy: &Mat,
    gain: &Mat,
    cache: &LayerNormCache,
) -> (Mat, Mat, Mat) {
    let n = dy.cols();
    let mut dx = Mat::zeros(dy.rows(), n);
    let mut dgain = Mat::zeros(1, n);
    let dbias = dy.col_sums();
    let mut dxhat = vec![0.0; n];
    for r in 0..dy.rows() {
        let g = dy.row(r);
        let xh = cache.normalized.row(r);
        for c in 0..n {
            dgain.data_mut()[c] += g[c] * xh[c];
            dxhat[c] = g[c] * gain.data()[c];
        }
        let sum = dxhat.iter().sum::<f64>();
        let sum_xh = dot(&dxhat, xh);
        let scale = cache.inv_std[r] / n as f64;
        let out = dx.row_mut(r);
        for c in 0..n {
            out[c] = scale * (n as f64 * dxhat[c] - sum - xh[c] * sum_xh);
        }
    }
    (dx, dgain, dbias)
}

pub(crate) fn relu(x: &Mat) -> Mat {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Zero the upstream gradient wherever the pre-activation was not positive.
pub(crate) fn relu_backward(dy: &mut Mat, pre: &Mat) {
    dy.data_mut()
        .iter_mut()
        .zip(pre.data())
        .for_each(|(g, &p)| {
            if p <= 0.0 {
                *g = 0.0
            }
        });
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows(x: &mut Mat) {
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

/// Saved activations of bidirectional multi-head attention.
#[derive(Clone, Debug)]
pub(crate) struct AttentionCache {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// One `T × T` attention matrix per head.
    pub weights: Vec<Mat>,
    /// Concatenated head outputs, before the output projection.
    pub context: Mat,
}

/// Scaled dot-product attention over projected `q`, `k`, `v`. Returns the
/// concatenated head outputs.
pub(crate) fn attention(q: Mat, k: Mat, v: Mat, heads: usize) -> AttentionCache {
    let width = q.cols() / heads;
    let scale = 1.0 / (width as f64).sqrt();
    let mut context = Mat::zeros(q.rows(), q.cols());
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.cols_slice(h * width, width);
        let kh = k.cols_slice(h * width, width);
        let vh = v.cols_slice(h * width, width);
        let mut w = qh.matmul_nt(&kh);
        w.scale(scale);
        softmax_rows(&mut w);
        context.set_cols(h * width, &w.matmul(&vh));
        weights.push(w);
    }
    AttentionCache {
        q,
        k,
        v,
        weights,
        context,
    }
}

/// Returns `(dq, dk, dv)` given the gradient of the concatenated context.
pub(crate) fn attention_backward(dcontext: &Mat, cache: &AttentionCache) -> (Mat, Mat, Mat) {
    let heads = cache.weights.len();
    let width = cache.q.cols() / heads;
    let scale = 1.0 / (width as f64).sqrt();
    let t = cache.q.rows();
    let mut dq = Mat::zeros(t, cache.q.cols());
    let mut dk = Mat::zeros(t, cache.q.cols());
    let mut dv = Mat::zeros(t, cache.q.cols());
    for h in 0..heads {
        let qh = cache.q.cols_slice(h * width, width);
        let kh = cache.k.cols_slice(h * width, width);
        let vh = cache.v.cols_slice(h * width, width);
        let w = &cache.weights[h];
        let dout = dcontext.cols_slice(h * width, width);
        dv.set_cols(h * width, &w.matmul_tn(&dout));
        let dw = dout.matmul_nt(&vh);
        // softmax backward: ds = w ⊙ (dw − rowsum(dw ⊙ w))
        let mut ds = Mat::zeros(t, t);
        for r in 0..t {
            let wr = w.row(r);
            let dwr = dw.row(r);
            let inner = dot(wr, dwr);
            let out = ds.row_mut(r);
            for c in 0..t {
                out[c] = wr[c] * (dwr[c] - inner) * scale;
            }
        }
        dq.set_cols(h * width, &ds.matmul(&kh));
        dk.set_cols(h * width, &ds.matmul_tn(&qh));
    }
    (dq, dk, dv)
}
