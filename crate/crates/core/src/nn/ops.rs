//! Forward and backward kernels for the layer types the decoded graphs use.

use super::tensor::{Scalar, Tensor4};
use super::NnError;

/// Upper bound on im2col buffer elements; larger batches are split.
const IM2COL_BUDGET: usize = 1 << 16;

fn check(cond: bool, what: &str) -> Result<(), NnError> {
    if cond {
        Ok(())
    } else {
        Err(NnError::ShapeMismatch(what.to_string()))
    }
}

fn samples_per_chunk(x: &Tensor4<impl Scalar>, kkc: usize) -> usize {
    let per = (x.rows * x.cols * kkc).max(1);
    (IM2COL_BUDGET / per).clamp(1, x.batch.max(1))
}

/// Range of kernel columns `dj` that land inside a row of width `w` for
/// output column `j`.
fn kernel_span(j: usize, w: usize, k: usize, pad: usize) -> (usize, usize) {
    (pad.saturating_sub(j), k.min(w + pad - j))
}

fn im2col<T: Scalar>(x: &Tensor4<T>, k: usize, first: usize, count: usize, cols: &mut Vec<T>) {
    let (h, w, c) = (x.rows, x.cols, x.channels);
    let pad = (k - 1) / 2;
    let kkc = k * k * c;
    cols.clear();
    cols.resize(count * h * w * kkc, T::zero());
    for b in 0..count {
        let sample = x.sample(first + b);
        for i in 0..h {
            for j in 0..w {
                let row = ((b * h + i) * w + j) * kkc;
                let (lo, hi) = kernel_span(j, w, k, pad);
                let len = (hi - lo) * c;
                for di in 0..k {
                    let r = i + di;
                    if r < pad || r - pad >= h {
                        continue;
                    }
                    // consecutive kernel columns read consecutive pixels
                    let src = ((r - pad) * w + j + lo - pad) * c;
                    let dst = row + (di * k + lo) * c;
                    cols[dst..dst + len].copy_from_slice(&sample[src..src + len]);
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], k: usize, first: usize, count: usize, dx: &mut Tensor4<T>) {
    let (h, w, c) = (dx.rows, dx.cols, dx.channels);
    let pad = (k - 1) / 2;
    let kkc = k * k * c;
    let n = dx.sample_len();
    for b in 0..count {
        let sample = &mut dx.data[(first + b) * n..(first + b + 1) * n];
        for i in 0..h {
            for j in 0..w {
                let row = ((b * h + i) * w + j) * kkc;
                let (lo, hi) = kernel_span(j, w, k, pad);
                let len = (hi - lo) * c;
                for di in 0..k {
                    let r = i + di;
                    if r < pad || r - pad >= h {
                        continue;
                    }
                    let dst = ((r - pad) * w + j + lo - pad) * c;
                    let src = row + (di * k + lo) * c;
                    for (d, &v) in sample[dst..dst + len].iter_mut().zip(&cols[src..src + len]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution with `(k-1)/2` zero padding on each side.
///
/// `weight` is laid out as `[(ki * k + kj) * C_in + c_in][C_out]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    bias: &[T],
    k: usize,
) -> Result<Tensor4<T>, NnError> {
    let cout = bias.len();
    let kkc = k * k * x.channels;
    check(k % 2 == 1, "odd kernel")?;
    check(weight.len() == kkc * cout, "conv weight size")?;
    let mut y = Tensor4::zeros(x.batch, x.rows, x.cols, cout);
    let hw = x.rows * x.cols;
    let chunk = samples_per_chunk(x, kkc);
    let mut cols = Vec::new();
    let mut first = 0;
    while first < x.batch {
        let count = chunk.min(x.batch - first);
        im2col(x, k, first, count, &mut cols);
        let out = &mut y.data[first * hw * cout..(first + count) * hw * cout];
        T::gemm(count * hw, kkc, cout, &cols, false, weight, false, out, false);
        first += count;
    }
    for row in y.data.chunks_exact_mut(cout) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(y)
}

pub struct ConvGrads<T> {
    pub dx: Tensor4<T>,
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    k: usize,
    dy: &Tensor4<T>,
) -> Result<ConvGrads<T>, NnError> {
    let cout = dy.channels;
    let kkc = k * k * x.channels;
    check(weight.len() == kkc * cout, "conv weight size")?;
    check(
        dy.batch == x.batch && dy.rows == x.rows && dy.cols == x.cols,
        "conv gradient shape",
    )?;
    let hw = x.rows * x.cols;
    let mut dx = x.zeros_like();
    let mut dweight = vec![T::zero(); kkc * cout];
    let mut dbias = vec![T::zero(); cout];
    for row in dy.data.chunks_exact(cout) {
        for (d, &g) in dbias.iter_mut().zip(row) {
            *d += g;
        }
    }
    let chunk = samples_per_chunk(x, kkc);
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    let mut first = 0;
    while first < x.batch {
        let count = chunk.min(x.batch - first);
        let rows = count * hw;
        im2col(x, k, first, count, &mut cols);
        let g = &dy.data[first * hw * cout..(first + count) * hw * cout];
        // dW += cols^T * dY
        T::gemm(kkc, rows, cout, &cols, true, g, false, &mut dweight, true);
        // dcols = dY * W^T
        dcols.clear();
        dcols.resize(rows * kkc, T::zero());
        T::gemm(rows, cout, kkc, g, false, weight, true, &mut dcols, false);
        col2im_add(&dcols, k, first, count, &mut dx);
        first += count;
    }
    Ok(ConvGrads { dx, dweight, dbias })
}

/// Per-channel batch statistics kept for the backward pass.
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Batch normalization with batch statistics.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
) -> Result<(Tensor4<T>, BnCache<T>, BnBatchStats<T>), NnError> {
    let c = x.channels;
    check(gamma.len() == c && beta.len() == c, "batch-norm parameter size")?;
    let m = x.data.len() / c;
    let inv_m = T::one() / T::from_usize(m).expect("count");
    let mut mean = vec![T::zero(); c];
    for row in x.data.chunks_exact(c) {
        for (s, &v) in mean.iter_mut().zip(row) {
            *s += v;
        }
    }
    mean.iter_mut().for_each(|s| *s = *s * inv_m);
    let mut var = vec![T::zero(); c];
    for row in x.data.chunks_exact(c) {
        for ((s, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - mu;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s = *s * inv_m);
    let eps = T::lit(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut y = x.zeros_like();
    for ((xr, hr), yr) in x
        .data
        .chunks_exact(c)
        .zip(xhat.chunks_exact_mut(c))
        .zip(y.data.chunks_exact_mut(c))
    {
        for ch in 0..c {
            let h = (xr[ch] - mean[ch]) * inv_std[ch];
            hr[ch] = h;
            yr[ch] = gamma[ch] * h + beta[ch];
        }
    }
    Ok((y, BnCache { xhat, inv_std }, BnBatchStats { mean, var }))
}

/// Batch normalization with fixed running statistics.
pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Result<Tensor4<T>, NnError> {
    let c = x.channels;
    check(
        gamma.len() == c && beta.len() == c && running_mean.len() == c && running_var.len() == c,
        "batch-norm parameter size",
    )?;
    let eps = T::lit(BN_EPS);
    let scale: Vec<T> = (0..c).map(|i| gamma[i] / (running_var[i] + eps).sqrt()).collect();
    let mut y = x.zeros_like();
    for (xr, yr) in x.data.chunks_exact(c).zip(y.data.chunks_exact_mut(c)) {
        for ch in 0..c {
            yr[ch] = (xr[ch] - running_mean[ch]) * scale[ch] + beta[ch];
        }
    }
    Ok(y)
}

/// Exponential moving average update of running statistics. The running
/// variance tracks the unbiased batch variance.
pub fn update_running_stats<T: Scalar>(
    stats: &BnBatchStats<T>,
    count: usize,
    running_mean: &mut [T],
    running_var: &mut [T],
) {
    let decay = T::lit(BN_MOMENTUM);
    let keep = T::one() - decay;
    let unbias = if count > 1 {
        T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
    } else {
        T::one()
    };
    for i in 0..running_mean.len() {
        running_mean[i] = decay * running_mean[i] + keep * stats.mean[i];
        running_var[i] = decay * running_var[i] + keep * stats.var[i] * unbias;
    }
}

pub fn batch_norm_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &[T],
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let c = dy.channels;
    let m = T::from_usize(dy.data.len() / c).expect("count");
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (gr, hr) in dy.data.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += gr[ch];
            dgamma[ch] += gr[ch] * hr[ch];
        }
    }
    let mut dx = dy.zeros_like();
    let coef: Vec<T> = (0..c).map(|ch| gamma[ch] * cache.inv_std[ch] / m).collect();
    for ((dr, gr), hr) in dx
        .data
        .chunks_exact_mut(c)
        .zip(dy.data.chunks_exact(c))
        .zip(cache.xhat.chunks_exact(c))
    {
        for ch in 0..c {
            dr[ch] = coef[ch] * (m * gr[ch] - dbeta[ch] - hr[ch] * dgamma[ch]);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu<T: Scalar>(x: &mut Tensor4<T>) {
    x.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Masks `dy` by the positive entries of the ReLU output `y`.
pub fn relu_backward<T: Scalar>(y: &Tensor4<T>, dy: &mut Tensor4<T>) {
    for (g, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Pooling window with independent row/column window and stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolWindow {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
}

impl PoolWindow {
    pub const HALVE: PoolWindow = PoolWindow {
        kh: 2,
        kw: 2,
        sh: 2,
        sw: 2,
    };

    pub fn output_dims(&self, rows: usize, cols: usize) -> (usize, usize) {
        let out = |n: usize, k: usize, s: usize| if n < k { 0 } else { (n - k) / s + 1 };
        (out(rows, self.kh, self.sh), out(cols, self.kw, self.sw))
    }
}

/// Max pooling; returns the output and, per output element, the flat index
/// of the input element it came from (first maximum on ties).
pub fn max_pool<T: Scalar>(x: &Tensor4<T>, win: PoolWindow) -> Result<(Tensor4<T>, Vec<usize>), NnError> {
    let (oh, ow) = win.output_dims(x.rows, x.cols);
    check(oh > 0 && ow > 0, "pooling to an empty map")?;
    let c = x.channels;
    let mut y = Tensor4::zeros(x.batch, oh, ow, c);
    let mut arg = vec![0usize; y.data.len()];
    for b in 0..x.batch {
        for i in 0..oh {
            for j in 0..ow {
                let o = y.index(b, i, j, 0);
                for ch in 0..c {
                    let mut best = x.index(b, i * win.sh, j * win.sw, ch);
                    for di in 0..win.kh {
                        for dj in 0..win.kw {
                            let idx = x.index(b, i * win.sh + di, j * win.sw + dj, ch);
                            if x.data[idx] > x.data[best] {
                                best = idx;
                            }
                        }
                    }
                    y.data[o + ch] = x.data[best];
                    arg[o + ch] = best;
                }
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool_backward<T: Scalar>(argmax: &[usize], dy: &Tensor4<T>, input_dims: [usize; 4]) -> Tensor4<T> {
    let [b, h, w, c] = input_dims;
    let mut dx = Tensor4::zeros(b, h, w, c);
    for (&src, &g) in argmax.iter().zip(&dy.data) {
        dx.data[src] += g;
    }
    dx
}

/// 2x2 average pooling with stride 2; trailing odd rows/cols are dropped.
pub fn avg_pool<T: Scalar>(x: &Tensor4<T>) -> Result<Tensor4<T>, NnError> {
    let (oh, ow) = (x.rows / 2, x.cols / 2);
    check(oh > 0 && ow > 0, "pooling to an empty map")?;
    let c = x.channels;
    let quarter = T::lit(0.25);
    let mut y = Tensor4::zeros(x.batch, oh, ow, c);
    for b in 0..x.batch {
        for i in 0..oh {
            for j in 0..ow {
                let o = y.index(b, i, j, 0);
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = x.index(b, 2 * i + di, 2 * j + dj, 0);
                    for ch in 0..c {
                        y.data[o + ch] += x.data[s + ch] * quarter;
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn avg_pool_backward<T: Scalar>(dy: &Tensor4<T>, input_dims: [usize; 4]) -> Tensor4<T> {
    let [b, h, w, c] = input_dims;
    let quarter = T::lit(0.25);
    let mut dx = Tensor4::zeros(b, h, w, c);
    for bi in 0..b {
        for i in 0..dy.rows {
            for j in 0..dy.cols {
                let o = dy.index(bi, i, j, 0);
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = dx.index(bi, 2 * i + di, 2 * j + dj, 0);
                    for ch in 0..c {
                        dx.data[s + ch] += dy.data[o + ch] * quarter;
                    }
                }
            }
        }
    }
    dx
}

/// Channel-wise concatenation; `a`'s channels come first.
pub fn channel_concat<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>, NnError> {
    check(
        a.batch == b.batch && a.rows == b.rows && a.cols == b.cols,
        "concat spatial shape",
    )?;
    let (ca, cb) = (a.channels, b.channels);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for (ra, rb) in a.data.chunks_exact(ca).zip(b.data.chunks_exact(cb)) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    Ok(Tensor4::from_vec(a.batch, a.rows, a.cols, ca + cb, data))
}

pub fn channel_concat_backward<T: Scalar>(dy: &Tensor4<T>, ca: usize) -> (Tensor4<T>, Tensor4<T>) {
    let cb = dy.channels - ca;
    let mut da = Tensor4::zeros(dy.batch, dy.rows, dy.cols, ca);
    let mut db = Tensor4::zeros(dy.batch, dy.rows, dy.cols, cb);
    for ((r, ra), rb) in dy
        .data
        .chunks_exact(dy.channels)
        .zip(da.data.chunks_exact_mut(ca))
        .zip(db.data.chunks_exact_mut(cb))
    {
        ra.copy_from_slice(&r[..ca]);
        rb.copy_from_slice(&r[ca..]);
    }
    (da, db)
}

/// Zero-pads or truncates the channel axis to `channels`.
pub fn match_channels<T: Scalar>(x: &Tensor4<T>, channels: usize) -> Tensor4<T> {
    if x.channels == channels {
        return x.clone();
    }
    let keep = x.channels.min(channels);
    let mut y = Tensor4::zeros(x.batch, x.rows, x.cols, channels);
    for (xr, yr) in x.data.chunks_exact(x.channels).zip(y.data.chunks_exact_mut(channels)) {
        yr[..keep].copy_from_slice(&xr[..keep]);
    }
    y
}

/// Element-wise sum after zero-padding the input with fewer channels.
pub fn padded_sum<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>, NnError> {
    check(
        a.batch == b.batch && a.rows == b.rows && a.cols == b.cols,
        "sum spatial shape",
    )?;
    let c = a.channels.max(b.channels);
    let mut y = match_channels(a, c);
    for (yr, br) in y.data.chunks_exact_mut(c).zip(b.data.chunks_exact(b.channels)) {
        for (v, &w) in yr.iter_mut().zip(br) {
            *v += w;
        }
    }
    Ok(y)
}

/// Gradient of [`padded_sum`] with respect to each input.
pub fn padded_sum_backward<T: Scalar>(dy: &Tensor4<T>, ca: usize, cb: usize) -> (Tensor4<T>, Tensor4<T>) {
    (match_channels(dy, ca), match_channels(dy, cb))
}

/// Max-pooling steps that bring a `rows x cols` map to exactly the target
/// size: repeated 2x2/stride-2 halving per axis while the halved size stays
/// at or above the target, then one window/stride chosen to land exactly.
pub fn resample_plan(from: (usize, usize), to: (usize, usize)) -> Vec<PoolWindow> {
    let (mut h, mut w) = from;
    let (th, tw) = to;
    assert!(th >= 1 && tw >= 1 && th <= h && tw <= w, "resample target must be smaller");
    let mut plan = Vec::new();
    loop {
        let halve_h = h / 2 >= th;
        let halve_w = w / 2 >= tw;
        if !halve_h && !halve_w {
            break;
        }
        let win = PoolWindow {
            kh: if halve_h { 2 } else { 1 },
            kw: if halve_w { 2 } else { 1 },
            sh: if halve_h { 2 } else { 1 },
            sw: if halve_w { 2 } else { 1 },
        };
        (h, w) = win.output_dims(h, w);
        plan.push(win);
    }
    if (h, w) != (th, tw) {
        let sh = h / th;
        let sw = w / tw;
        let win = PoolWindow {
            kh: h - (th - 1) * sh,
            kw: w - (tw - 1) * sw,
            sh,
            sw,
        };
        debug_assert_eq!(win.output_dims(h, w), (th, tw));
        plan.push(win);
    }
    plan
}

/// Fully connected layer over flattened samples: `y = x W + b` with
/// `W` stored as `[features][outputs]`.
pub fn dense<T: Scalar>(x: &Tensor4<T>, weight: &[T], bias: &[T]) -> Result<Tensor4<T>, NnError> {
    let f = x.sample_len();
    let k = bias.len();
    check(weight.len() == f * k, "dense weight size")?;
    let mut y = Tensor4::zeros(x.batch, 1, 1, k);
    T::gemm(x.batch, f, k, &x.data, false, weight, false, &mut y.data, false);
    for row in y.data.chunks_exact_mut(k) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(y)
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let f = x.sample_len();
    let k = dy.channels;
    let mut dweight = vec![T::zero(); f * k];
    T::gemm(f, x.batch, k, &x.data, true, &dy.data, false, &mut dweight, false);
    let mut dbias = vec![T::zero(); k];
    for row in dy.data.chunks_exact(k) {
        for (d, &g) in dbias.iter_mut().zip(row) {
            *d += g;
        }
    }
    let mut dx = x.zeros_like();
    T::gemm(x.batch, k, f, &dy.data, false, weight, true, &mut dx.data, false);
    (dx, dweight, dbias)
}

/// Row-wise softmax of `B x K` logits.
pub fn softmax<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / sum);
    }
    out
}

/// Mean cross-entropy of softmax(logits) against `labels`, with gradient
/// `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &[T],
    k: usize,
    labels: &[usize],
) -> Result<(T, Vec<T>), NnError> {
    check(logits.len() == labels.len() * k, "logit/label count")?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NnError::LabelOutOfRange { label: bad, classes: k });
    }
    let b = T::from_usize(labels.len()).unwrap();
    let mut grad = softmax(logits, k);
    let mut loss = T::zero();
    for ((row, g), &label) in logits.chunks_exact(k).zip(grad.chunks_exact_mut(k)).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        loss += lse - row[label];
        g[label] = g[label] - T::one();
        g.iter_mut().for_each(|v| *v = *v / b);
    }
    Ok((loss / b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn random_tensor(b: usize, h: usize, w: usize, c: usize, seed: u64) -> Tensor4<f64> {
        let mut rng = seeded(seed);
        Tensor4::from_vec(b, h, w, c, (0..b * h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct six-loop convolution.
    fn naive_conv(x: &Tensor4<f64>, w: &[f64], bias: &[f64], k: usize) -> Tensor4<f64> {
        let cout = bias.len();
        let pad = (k - 1) as isize / 2;
        let mut y = Tensor4::zeros(x.batch, x.rows, x.cols, cout);
        for b in 0..x.batch {
            for i in 0..x.rows {
                for j in 0..x.cols {
                    for o in 0..cout {
                        let mut acc = bias[o];
                        for di in 0..k {
                            for dj in 0..k {
                                let r = i as isize + di as isize - pad;
                                let s = j as isize + dj as isize - pad;
                                if r < 0 || s < 0 || r >= x.rows as isize || s >= x.cols as isize {
                                    continue;
                                }
                                for ci in 0..x.channels {
                                    acc += x.at(b, r as usize, s as usize, ci)
                                        * w[((di * k + dj) * x.channels + ci) * cout + o];
                                }
                            }
                        }
                        let idx = y.index(b, i, j, o);
                        y.data[idx] = acc;
                    }
                }
            }
        }
        y
    }

    fn assert_close(a: &[f64], b: &[f64], rel: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            let scale = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() <= rel * scale, "{x} vs {y}");
        }
    }

    /// Central differences of `f` with respect to every entry of `at`.
    fn numeric_grad(at: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut p = at.to_vec();
        (0..at.len())
            .map(|i| {
                let orig = p[i];
                p[i] = orig + eps;
                let up = f(&p);
                p[i] = orig - eps;
                let down = f(&p);
                p[i] = orig;
                (up - down) / (2.0 * eps)
            })
            .collect()
    }

    fn weighted_sum(y: &Tensor4<f64>, w: &[f64]) -> f64 {
        y.data.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_delta_kernel() {
        let x = Tensor4::from_vec(1, 1, 1, 1, vec![2.5f64]);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let y = conv2d(&x, &w, &[0.0], 3).unwrap();
        assert_eq!(y.data, vec![2.5]);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let x = random_tensor(2, 3, 3, 2, 1);
        let y = conv2d(&x, &vec![0.0; 9 * 2 * 3], &[0.5, -1.0, 2.0], 3).unwrap();
        assert!(y.data.chunks(3).all(|r| r == [0.5, -1.0, 2.0]));
    }

    #[test]
    fn conv_matches_naive_loops() {
        for k in [3, 5] {
            let x = random_tensor(2, 4, 4, 3, 2);
            let w = random_vec(k * k * 3 * 2, 3);
            let bias = random_vec(2, 4);
            let fast = conv2d(&x, &w, &bias, k).unwrap();
            let slow = naive_conv(&x, &w, &bias, k);
            assert_close(&fast.data, &slow.data, 1e-6);
            assert_eq!(fast.rows, 4);
        }
    }

    #[test]
    fn conv_f32_agrees_with_f64() {
        let x = random_tensor(3, 5, 5, 2, 5);
        let w = random_vec(9 * 2 * 4, 6);
        let bias = random_vec(4, 7);
        let y64 = conv2d(&x, &w, &bias, 3).unwrap();
        let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
        let b32: Vec<f32> = bias.iter().map(|&v| v as f32).collect();
        let y32 = conv2d(&x.cast::<f32>(), &w32, &b32, 3).unwrap();
        for (a, b) in y64.data.iter().zip(&y32.data) {
            assert!((a - *b as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let k = 3;
        let x = random_tensor(2, 4, 4, 3, 8);
        let w = random_vec(k * k * 3 * 2, 9);
        let bias = random_vec(2, 10);
        let probe = random_vec(2 * 4 * 4 * 2, 11);
        let dy = Tensor4::from_vec(2, 4, 4, 2, probe.clone());
        let grads = conv2d_backward(&x, &w, k, &dy).unwrap();
        let eps = 1e-6;
        let num_w = numeric_grad(&w, eps, |p| weighted_sum(&conv2d(&x, p, &bias, k).unwrap(), &probe));
        assert_close(&grads.dweight, &num_w, 1e-6);
        let num_x = numeric_grad(&x.data, eps, |p| {
            let xp = Tensor4::from_vec(2, 4, 4, 3, p.to_vec());
            weighted_sum(&conv2d(&xp, &w, &bias, k).unwrap(), &probe)
        });
        assert_close(&grads.dx.data, &num_x, 1e-6);
        let num_b = numeric_grad(&bias, eps, |p| weighted_sum(&conv2d(&x, &w, p, k).unwrap(), &probe));
        assert_close(&grads.dbias, &num_b, 1e-6);
    }

    #[test]
    fn conv_chunking_does_not_change_results() {
        // 64x64x16 with k=5 exceeds one chunk for several samples
        let x = random_tensor(3, 64, 64, 16, 12).cast::<f64>();
        let w = random_vec(25 * 16 * 2, 13);
        let b = random_vec(2, 14);
        let y = conv2d(&x, &w, &b, 5).unwrap();
        for s in 0..3 {
            let single = conv2d(&x.gather(&[s]), &w, &b, 5).unwrap();
            assert_eq!(single.data, y.sample(s));
        }
    }

    #[test]
    fn batch_norm_normalizes() {
        let x = random_tensor(4, 3, 3, 2, 15);
        let (y, _, _) = batch_norm_train(&x, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = y.data.iter().skip(ch).step_by(2).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_constant_channel_yields_beta() {
        let x = Tensor4::from_vec(2, 2, 2, 1, vec![3.0f64; 8]);
        let (y, _, _) = batch_norm_train(&x, &[2.0], &[0.7]).unwrap();
        assert!(y.data.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn batch_norm_backward_matches_finite_differences() {
        let x = random_tensor(3, 2, 2, 2, 16);
        let gamma = vec![1.3, -0.6];
        let beta = vec![0.1, 0.4];
        let probe = random_vec(x.data.len(), 17);
        let (_, cache, _) = batch_norm_train(&x, &gamma, &beta).unwrap();
        let dy = Tensor4::from_vec(3, 2, 2, 2, probe.clone());
        let (dx, dgamma, dbeta) = batch_norm_backward(&cache, &gamma, &dy);
        let f = |xv: &[f64], g: &[f64], b: &[f64]| {
            let xt = Tensor4::from_vec(3, 2, 2, 2, xv.to_vec());
            weighted_sum(&batch_norm_train(&xt, g, b).unwrap().0, &probe)
        };
        let eps = 1e-6;
        let rel = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
                .fold(0.0, f64::max)
        };
        assert!(rel(&dx.data, &numeric_grad(&x.data, eps, |p| f(p, &gamma, &beta))) < 1e-4);
        assert!(rel(&dgamma, &numeric_grad(&gamma, eps, |p| f(&x.data, p, &beta))) < 1e-4);
        assert!(rel(&dbeta, &numeric_grad(&beta, eps, |p| f(&x.data, &gamma, p))) < 1e-4);
    }

    #[test]
    fn batch_norm_infer_uses_running_stats() {
        let x = Tensor4::from_vec(1, 1, 2, 1, vec![1.0f64, 3.0]);
        // (x - 1) * 2 / sqrt(4) + 1
        let y = batch_norm_infer(&x, &[2.0], &[1.0], &[1.0], &[4.0 - BN_EPS]).unwrap();
        assert_close(&y.data, &[1.0, 3.0], 1e-12);
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let stats = BnBatchStats { mean: vec![2.0], var: vec![1.0] };
        update_running_stats(&stats, 2, &mut rm, &mut rv);
        assert_close(&rm, &[0.2], 1e-12);
        assert_close(&rv, &[0.9 + 0.1 * 2.0], 1e-12);
    }

    #[test]
    fn relu_forward_backward() {
        let mut x = Tensor4::from_vec(1, 1, 1, 2, vec![-1.0f64, 2.0]);
        relu(&mut x);
        assert_eq!(x.data, vec![0.0, 2.0]);
        let mut g = Tensor4::from_vec(1, 1, 1, 2, vec![5.0, 5.0]);
        relu_backward(&x, &mut g);
        assert_eq!(g.data, vec![0.0, 5.0]);
    }

    #[test]
    fn max_pool_routes_to_argmax() {
        let x = Tensor4::from_vec(1, 2, 2, 1, vec![1.0f64, 3.0, 2.0, 0.0]);
        let (y, arg) = max_pool(&x, PoolWindow::HALVE).unwrap();
        assert_eq!(y.data, vec![3.0]);
        let dx = max_pool_backward(&arg, &Tensor4::from_vec(1, 1, 1, 1, vec![1.0]), x.dims());
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0]);
        // first occurrence wins on ties
        let t = Tensor4::from_vec(1, 2, 2, 1, vec![4.0f64, 4.0, 4.0, 4.0]);
        assert_eq!(max_pool(&t, PoolWindow::HALVE).unwrap().1, vec![0]);
    }

    #[test]
    fn pools_drop_odd_edges() {
        let x = random_tensor(1, 5, 5, 2, 18);
        assert_eq!(max_pool(&x, PoolWindow::HALVE).unwrap().0.dims(), [1, 2, 2, 2]);
        assert_eq!(avg_pool(&x).unwrap().dims(), [1, 2, 2, 2]);
        assert!(avg_pool(&random_tensor(1, 1, 4, 1, 0)).is_err());
    }

    #[test]
    fn avg_pool_backward_spreads_quarters() {
        let x = Tensor4::from_vec(1, 2, 2, 1, vec![1.0f64, 2.0, 3.0, 4.0]);
        assert_eq!(avg_pool(&x).unwrap().data, vec![2.5]);
        let dx = avg_pool_backward(&Tensor4::from_vec(1, 1, 1, 1, vec![1.0f64]), x.dims());
        assert_eq!(dx.data, vec![0.25; 4]);
    }

    #[test]
    fn padded_sum_pads_the_narrower_input() {
        let a = Tensor4::from_vec(1, 1, 1, 2, vec![1.0f64, 2.0]);
        let b = Tensor4::from_vec(1, 1, 1, 3, vec![10.0f64, 20.0, 30.0]);
        let y = padded_sum(&a, &b).unwrap();
        assert_eq!(y.data, vec![11.0, 22.0, 30.0]);
        let (da, db) = padded_sum_backward(&y, 2, 3);
        assert_eq!(da.data, vec![11.0, 22.0]);
        assert_eq!(db.data, y.data);
    }

    #[test]
    fn concat_orders_first_input_first() {
        let a = Tensor4::from_vec(1, 1, 2, 1, vec![1.0f64, 2.0]);
        let b = Tensor4::from_vec(1, 1, 2, 2, vec![3.0f64, 4.0, 5.0, 6.0]);
        let y = channel_concat(&a, &b).unwrap();
        assert_eq!(y.data, vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let (da, db) = channel_concat_backward(&y, 1);
        assert_eq!((da, db), (a, b));
    }

    #[test]
    fn resample_plans_reach_target() {
        for from in 1..=40usize {
            for to in 1..=from {
                for other in [from, 7.min(from)] {
                    let plan = resample_plan((from, from), (to, other.min(to).max(1)));
                    let (mut h, mut w) = (from, from);
                    for win in &plan {
                        (h, w) = win.output_dims(h, w);
                    }
                    assert_eq!((h, w), (to, other.min(to).max(1)), "{from} -> {to}");
                }
            }
        }
        assert_eq!(resample_plan((32, 32), (8, 8)), vec![PoolWindow::HALVE; 2]);
        assert!(resample_plan((4, 4), (4, 4)).is_empty());
        assert_eq!(
            resample_plan((6, 6), (5, 5)),
            vec![PoolWindow { kh: 2, kw: 2, sh: 1, sw: 1 }]
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = random_vec(40, 19).iter().map(|v| v * 30.0).collect::<Vec<_>>();
        let p = softmax(&logits, 10);
        for row in p.chunks(10) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_values() {
        let (loss, _) = softmax_cross_entropy(&[0.0f64; 10], 10, &[3]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut logits = vec![0.0f64; 10];
            logits[2] = margin;
            let (l, _) = softmax_cross_entropy(&logits, 10, &[2]).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-15);
        assert!(matches!(
            softmax_cross_entropy(&[0.0f64; 10], 10, &[10]),
            Err(NnError::LabelOutOfRange { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = random_vec(40, 20);
        let labels = [1, 7, 0, 9];
        let (_, grad) = softmax_cross_entropy(&logits, 10, &labels).unwrap();
        let num = numeric_grad(&logits, 1e-6, |p| softmax_cross_entropy(p, 10, &labels).unwrap().0);
        for (a, b) in grad.iter().zip(&num) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let x = random_tensor(3, 2, 2, 2, 21);
        let w = random_vec(8 * 4, 22);
        let b = random_vec(4, 23);
        let probe = random_vec(12, 24);
        let (dx, dw, db) = dense_backward(&x, &w, &Tensor4::from_vec(3, 1, 1, 4, probe.clone()));
        let num_w = numeric_grad(&w, 1e-6, |p| weighted_sum(&dense(&x, p, &b).unwrap(), &probe));
        assert_close(&dw, &num_w, 1e-7);
        let num_b = numeric_grad(&b, 1e-6, |p| weighted_sum(&dense(&x, &w, p).unwrap(), &probe));
        assert_close(&db, &num_b, 1e-7);
        let num_x = numeric_grad(&x.data, 1e-6, |p| {
            weighted_sum(&dense(&Tensor4::from_vec(3, 2, 2, 2, p.to_vec()), &w, &b).unwrap(), &probe)
        });
        assert_close(&dx.data, &num_x, 1e-7);
    }
}
