//! Slice-level forward/backward kernels shared by the tape.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Scalar;

/// Overlap of `dst[i] <- src[i + shift]` for a length-`len` signal.
#[inline]
fn overlap(len: usize, shift: isize) -> (usize, usize, usize) {
    // (dst_start, src_start, count)
    if shift >= 0 {
        let s = shift as usize;
        (0, s.min(len), len.saturating_sub(s))
    } else {
        let s = (-shift) as usize;
        (s.min(len), 0, len.saturating_sub(s))
    }
}

pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub len: usize,
}

impl ConvDims {
    #[inline]
    fn shift(&self, tap: usize) -> isize {
        tap as isize - (self.k / 2) as isize
    }
}

pub(crate) fn conv1d_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], d: &ConvDims) -> Vec<T> {
    let l = d.len;
    let mut y = vec![T::zero(); d.cout * l];
    for c in 0..d.cout {
        let yc = &mut y[c * l..(c + 1) * l];
        yc.fill(b[c]);
        for j in 0..d.cin {
            let xj = &x[j * l..(j + 1) * l];
            for t in 0..d.k {
                let wv = w[(c * d.cin + j) * d.k + t];
                let (dst, src, n) = overlap(l, d.shift(t));
                for (yo, &xi) in yc[dst..dst + n].iter_mut().zip(&xj[src..src + n]) {
                    *yo += wv * xi;
                }
            }
        }
    }
    y
}

pub(crate) fn conv1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    d: &ConvDims,
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    let l = d.len;
    for c in 0..d.cout {
        let gc = &gy[c * l..(c + 1) * l];
        db[c] += gc.iter().copied().sum::<T>();
        for j in 0..d.cin {
            let xj = &x[j * l..(j + 1) * l];
            let dxj = &mut dx[j * l..(j + 1) * l];
            for t in 0..d.k {
                let wi = (c * d.cin + j) * d.k + t;
                let wv = w[wi];
                let (dst, src, n) = overlap(l, d.shift(t));
                let mut acc = T::zero();
                for ((&g, &xi), dxi) in gc[dst..dst + n]
                    .iter()
                    .zip(&xj[src..src + n])
                    .zip(dxj[src..src + n].iter_mut())
                {
                    acc += g * xi;
                    *dxi += wv * g;
                }
                dw[wi] += acc;
            }
        }
    }
}

/// Ceil-mode max pooling over rows of a `[channels, len]` array.
/// Returns the pooled values and the flat argmax index of each output.
pub(crate) fn max_pool1d_forward<T: Scalar>(
    x: &[T],
    channels: usize,
    len: usize,
    pool: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let out_len = len.div_ceil(stride);
    let mut y = Vec::with_capacity(channels * out_len);
    let mut arg = Vec::with_capacity(channels * out_len);
    for c in 0..channels {
        let row = &x[c * len..(c + 1) * len];
        for o in 0..out_len {
            let start = o * stride;
            let end = (start + pool).min(len);
            let mut best = start;
            for i in start + 1..end {
                // strict comparison keeps the lowest index on ties
                if row[i] > row[best] {
                    best = i;
                }
            }
            y.push(row[best]);
            arg.push(c * len + best);
        }
    }
    (y, arg)
}

pub(crate) struct NormOutput<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Standardize `x` (`[channels, len]`) in groups of `group_len` contiguous
/// values, then apply a per-channel affine map.
pub(crate) fn normalize_forward<T: Scalar>(
    x: &[T],
    channels: usize,
    group_len: usize,
    gain: &[T],
    shift: &[T],
    eps: f64,
) -> NormOutput<T> {
    let per_channel = x.len() / channels;
    let groups = x.len() / group_len;
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let xs = &x[g * group_len..(g + 1) * group_len];
        let n = group_len as f64;
        let mean = xs.iter().map(|v| v.widen()).sum::<f64>() / n;
        let var = xs
            .iter()
            .map(|v| {
                let d = v.widen() - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let s = 1.0 / libm::sqrt(var + eps);
        for (o, &v) in xhat[g * group_len..(g + 1) * group_len]
            .iter_mut()
            .zip(xs)
        {
            *o = T::lit((v.widen() - mean) * s);
        }
        inv_std.push(T::lit(s));
    }
    let y = xhat
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let c = i / per_channel;
            gain[c] * h + shift[c]
        })
        .collect();
    NormOutput { y, xhat, inv_std }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn normalize_backward<T: Scalar>(
    gy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gain: &[T],
    channels: usize,
    group_len: usize,
    dx: &mut [T],
    dgain: &mut [T],
    dshift: &mut [T],
) {
    let per_channel = gy.len() / channels;
    for (i, (&g, &h)) in gy.iter().zip(xhat).enumerate() {
        let c = i / per_channel;
        dgain[c] += g * h;
        dshift[c] += g;
    }
    let n = T::lit(group_len as f64);
    for (gi, &s) in inv_std.iter().enumerate() {
        let range = gi * group_len..(gi + 1) * group_len;
        let mut sum_d = T::zero();
        let mut sum_dh = T::zero();
        for i in range.clone() {
            let d = gy[i] * gain[i / per_channel];
            sum_d += d;
            sum_dh += d * xhat[i];
        }
        let mean_d = sum_d / n;
        let mean_dh = sum_dh / n;
        for i in range {
            let d = gy[i] * gain[i / per_channel];
            dx[i] += s * (d - mean_d - xhat[i] * mean_dh);
        }
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// `log softmax`, computed as `z - max - ln Σ exp(z - max)`.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let lse = logits.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
    logits.iter().map(|&z| z - m - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
