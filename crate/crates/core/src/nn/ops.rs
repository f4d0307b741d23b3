//! Forward and backward kernels for the fixed layer set.
//!
//! Weighted layers store their weights group-block-major: block `g` holds an
//! `[out_g, in_g, k, k]` (conv) or `[out_g, in_g]` (dense) row-major array,
//! and blocks are concatenated in group order. A shared layer is the
//! single-group case.

use std::ops::Range;

use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Offsets of each group's weight block.
pub(crate) fn block_offsets(
    in_groups: &[Range<usize>],
    out_groups: &[Range<usize>],
    kk: usize,
) -> Vec<Range<usize>> {
    let mut off = 0;
    in_groups
        .iter()
        .zip(out_groups)
        .map(|(i, o)| {
            let len = i.len() * o.len() * kk;
            let r = off..off + len;
            off += len;
            r
        })
        .collect()
}

fn im2col(
    x: &[f64],
    channels: Range<usize>,
    h: usize,
    w: usize,
    k: usize,
    cols: &mut [f64],
) {
    let pad = k / 2;
    let hw = h * w;
    let mut row = 0;
    for c in channels {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    for xx in 0..w {
                        let ix = xx as isize + kx as isize - pad as isize;
                        dst[y * w + xx] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(
    cols: &[f64],
    channels: Range<usize>,
    h: usize,
    w: usize,
    k: usize,
    dx: &mut [f64],
) {
    let pad = k / 2;
    let hw = h * w;
    let mut row = 0;
    for c in channels {
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let ix = xx as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[c * hw + iy as usize * w + ix as usize] += src[y * w + xx];
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) struct ConvGeom<'a> {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub in_groups: &'a [Range<usize>],
    pub out_groups: &'a [Range<usize>],
}

/// Grouped "same" convolution via im2col and a per-group matrix product.
pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw = g.h * g.w;
    let kk = g.k * g.k;
    let blocks = block_offsets(g.in_groups, g.out_groups, kk);
    let mut y = vec![0.0; g.batch * g.out_channels * hw];
    let max_rows = g.in_groups.iter().map(|r| r.len()).max().unwrap_or(0) * kk;
    let mut cols = vec![0.0; max_rows * hw];
    for b in 0..g.batch {
        let xb = &x[b * g.in_channels * hw..(b + 1) * g.in_channels * hw];
        let yb = &mut y[b * g.out_channels * hw..(b + 1) * g.out_channels * hw];
        for ((ig, og), blk) in g.in_groups.iter().zip(g.out_groups).zip(&blocks) {
            let rows = ig.len() * kk;
            let cols = &mut cols[..rows * hw];
            im2col(xb, ig.clone(), g.h, g.w, g.k, cols);
            let out = &mut yb[og.start * hw..og.end * hw];
            for (o, plane) in og.clone().zip(out.chunks_mut(hw)) {
                plane.fill(bias[o]);
            }
            matmul_acc(&weight[blk.clone()], cols, out, og.len(), rows, hw);
        }
    }
    y
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = g.h * g.w;
    let kk = g.k * g.k;
    let blocks = block_offsets(g.in_groups, g.out_groups, kk);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; g.out_channels];
    let max_rows = g.in_groups.iter().map(|r| r.len()).max().unwrap_or(0) * kk;
    let mut cols = vec![0.0; max_rows * hw];
    let mut dcols = vec![0.0; max_rows * hw];
    for b in 0..g.batch {
        let xb = &x[b * g.in_channels * hw..(b + 1) * g.in_channels * hw];
        let dyb = &dy[b * g.out_channels * hw..(b + 1) * g.out_channels * hw];
        let dxb = &mut dx[b * g.in_channels * hw..(b + 1) * g.in_channels * hw];
        for ((ig, og), blk) in g.in_groups.iter().zip(g.out_groups).zip(&blocks) {
            let rows = ig.len() * kk;
            let dy_g = &dyb[og.start * hw..og.end * hw];
            if dy_g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (o, plane) in og.clone().zip(dy_g.chunks(hw)) {
                db[o] += plane.iter().sum::<f64>();
            }
            let cols = &mut cols[..rows * hw];
            im2col(xb, ig.clone(), g.h, g.w, g.k, cols);
            matmul_a_bt_acc(dy_g, cols, &mut dw[blk.clone()], og.len(), hw, rows);
            let dcols = &mut dcols[..rows * hw];
            dcols.fill(0.0);
            matmul_at_b_acc(&weight[blk.clone()], dy_g, dcols, og.len(), rows, hw);
            col2im_add(dcols, ig.clone(), g.h, g.w, g.k, dxb);
        }
    }
    (dx, dw, db)
}

pub(crate) struct DenseGeom<'a> {
    pub batch: usize,
    pub in_features: usize,
    pub out_features: usize,
    pub in_groups: &'a [Range<usize>],
    pub out_groups: &'a [Range<usize>],
}

pub(crate) fn dense_forward(g: &DenseGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let blocks = block_offsets(g.in_groups, g.out_groups, 1);
    let mut y = vec![0.0; g.batch * g.out_features];
    for b in 0..g.batch {
        let xb = &x[b * g.in_features..(b + 1) * g.in_features];
        let yb = &mut y[b * g.out_features..(b + 1) * g.out_features];
        for ((ig, og), blk) in g.in_groups.iter().zip(g.out_groups).zip(&blocks) {
            let wg = &weight[blk.clone()];
            let xg = &xb[ig.clone()];
            let n_in = ig.len();
            for (row, o) in og.clone().enumerate() {
                let wr = &wg[row * n_in..(row + 1) * n_in];
                let mut s = bias[o];
                for (a, v) in wr.iter().zip(xg) {
                    s += a * v;
                }
                yb[o] = s;
            }
        }
    }
    y
}

pub(crate) fn dense_backward(
    g: &DenseGeom,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let blocks = block_offsets(g.in_groups, g.out_groups, 1);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; g.out_features];
    for b in 0..g.batch {
        let xb = &x[b * g.in_features..(b + 1) * g.in_features];
        let dyb = &dy[b * g.out_features..(b + 1) * g.out_features];
        let dxb = &mut dx[b * g.in_features..(b + 1) * g.in_features];
        for ((ig, og), blk) in g.in_groups.iter().zip(g.out_groups).zip(&blocks) {
            let n_in = ig.len();
            let wg = &weight[blk.clone()];
            let dwg = &mut dw[blk.clone()];
            let xg = &xb[ig.clone()];
            for (row, o) in og.clone().enumerate() {
                let d = dyb[o];
                if d == 0.0 {
                    continue;
                }
                db[o] += d;
                let wr = &wg[row * n_in..(row + 1) * n_in];
                let dwr = &mut dwg[row * n_in..(row + 1) * n_in];
                for ((dwv, xv), (dxv, wv)) in dwr.iter_mut().zip(xg).zip(dxb[ig.clone()].iter_mut().zip(wr)) {
                    *dwv += d * xv;
                    *dxv += d * wv;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Per-sample statistics over channel ranges; `spatial` elements per channel.
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    /// `inv_std[b * groups + g]` for group norm, `inv_std[c]` for batch norm.
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Mean and biased variance, accumulated relative to the first element so a
/// constant slice gives exactly its value and zero variance.
fn moments(v: &[f64]) -> (f64, f64) {
    let k = v[0];
    let n = v.len() as f64;
    let d = v.iter().map(|t| t - k).sum::<f64>() / n;
    let mean = k + d;
    let var = v.iter().map(|t| (t - k - d) * (t - k - d)).sum::<f64>() / n;
    (mean, var)
}

pub(crate) fn group_norm_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: &[Range<usize>],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, NormCache) {
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; batch * groups.len()];
    for b in 0..batch {
        let base = b * channels * spatial;
        for (gi, r) in groups.iter().enumerate() {
            let span = base + r.start * spatial..base + r.end * spatial;
            let (mean, var) = moments(&x[span.clone()]);
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[b * groups.len() + gi] = inv;
            for c in r.clone() {
                let off = base + c * spatial;
                for s in off..off + spatial {
                    let xh = (x[s] - mean) * inv;
                    xhat[s] = xh;
                    y[s] = gamma[c] * xh + beta[c];
                }
            }
        }
    }
    (
        y,
        NormCache {
            xhat,
            inv_std,
            batch_mean: Vec::new(),
            batch_var: Vec::new(),
        },
    )
}

pub(crate) fn group_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: &[Range<usize>],
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    let xhat = &cache.xhat;
    for b in 0..batch {
        let base = b * channels * spatial;
        for (gi, r) in groups.iter().enumerate() {
            let span = base + r.start * spatial..base + r.end * spatial;
            if dy[span.clone()].iter().all(|&v| v == 0.0) {
                continue;
            }
            let n = span.len() as f64;
            let inv = cache.inv_std[b * groups.len() + gi];
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for c in r.clone() {
                let off = base + c * spatial;
                for s in off..off + spatial {
                    dgamma[c] += dy[s] * xhat[s];
                    dbeta[c] += dy[s];
                    let dxh = dy[s] * gamma[c];
                    sum_d += dxh;
                    sum_dx += dxh * xhat[s];
                }
            }
            for c in r.clone() {
                let off = base + c * spatial;
                for s in off..off + spatial {
                    let dxh = dy[s] * gamma[c];
                    dx[s] = inv / n * (n * dxh - sum_d - xhat[s] * sum_dx);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch norm with batch statistics (training) or given running statistics.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[f64],
    beta: &[f64],
    running: Option<(&[f64], &[f64])>,
) -> (Vec<f64>, NormCache) {
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; channels];
    let mut batch_mean = vec![0.0; channels];
    let mut batch_var = vec![0.0; channels];
    let n = (batch * spatial) as f64;
    for c in 0..channels {
        let (mean, var) = match running {
            Some((rm, rv)) => (rm[c], rv[c]),
            None => {
                let k = x[c * spatial];
                let mut s = 0.0;
                for b in 0..batch {
                    let off = (b * channels + c) * spatial;
                    s += x[off..off + spatial].iter().map(|t| t - k).sum::<f64>();
                }
                let d = s / n;
                let mut v = 0.0;
                for b in 0..batch {
                    let off = (b * channels + c) * spatial;
                    v += x[off..off + spatial].iter().map(|t| (t - k - d) * (t - k - d)).sum::<f64>();
                }
                (k + d, v / n)
            }
        };
        batch_mean[c] = mean;
        batch_var[c] = var;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[c] = inv;
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            for s in off..off + spatial {
                let xh = (x[s] - mean) * inv;
                xhat[s] = xh;
                y[s] = gamma[c] * xh + beta[c];
            }
        }
    }
    (
        y,
        NormCache {
            xhat,
            inv_std,
            batch_mean,
            batch_var,
        },
    )
}

pub(crate) fn batch_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[f64],
    used_batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    let n = (batch * spatial) as f64;
    let xhat = &cache.xhat;
    for c in 0..channels {
        let inv = cache.inv_std[c];
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            for s in off..off + spatial {
                dgamma[c] += dy[s] * xhat[s];
                dbeta[c] += dy[s];
                let dxh = dy[s] * gamma[c];
                sum_d += dxh;
                sum_dx += dxh * xhat[s];
            }
        }
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            for s in off..off + spatial {
                let dxh = dy[s] * gamma[c];
                dx[s] = if used_batch_stats {
                    inv / n * (n * dxh - sum_d - xhat[s] * sum_dx)
                } else {
                    dxh * inv
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// 2×2 stride-2 max pooling; returns outputs and the flat argmax per output.
pub(crate) fn max_pool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; planes * oh * ow];
    let mut arg = vec![0; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                y[o] = x[best];
                arg[o] = best;
            }
        }
    }
    (y, arg)
}

pub(crate) fn max_pool_backward(dy: &[f64], arg: &[usize], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (d, &a) in dy.iter().zip(arg) {
        dx[a] += d;
    }
    dx
}
