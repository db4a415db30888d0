//! Resampling and pooling kernels: bilinear upsampling (align-corners false),
//! 2x2 max pooling and non-overlapping block sums.

use rayon::prelude::*;

use crate::tensor::Element;

/// Source taps for one output coordinate: `(i0, i1, frac)`.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Element>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(ch, out_c)| {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        for (y, &(y0, y1, ly)) in rows.iter().enumerate() {
            let ly = T::of(ly);
            for (x, &(x0, x1, lx)) in cols.iter().enumerate() {
                let lx = T::of(lx);
                let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                out_c[y * ow + x] = top * (T::one() - ly) + bot * ly;
            }
        }
    });
    out
}

pub(crate) fn upsample_backward<T: Element>(
    grad_out: &[T],
    (c, h, w): (usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    let mut grad_in = vec![T::zero(); c * h * w];
    grad_in.par_chunks_mut(h * w).enumerate().for_each(|(ch, gin)| {
        let g = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        for (y, &(y0, y1, ly)) in rows.iter().enumerate() {
            let ly = T::of(ly);
            for (x, &(x0, x1, lx)) in cols.iter().enumerate() {
                let lx = T::of(lx);
                let v = g[y * ow + x];
                let top = v * (T::one() - ly);
                let bot = v * ly;
                gin[y0 * w + x0] = gin[y0 * w + x0] + top * (T::one() - lx);
                gin[y0 * w + x1] = gin[y0 * w + x1] + top * lx;
                gin[y1 * w + x0] = gin[y1 * w + x0] + bot * (T::one() - lx);
                gin[y1 * w + x1] = gin[y1 * w + x1] + bot * lx;
            }
        }
    });
    grad_in
}

/// Returns pooled values and, per output element, the flat input index of
/// the maximum (first in row-major window order on ties).
pub(crate) fn max_pool2x2<T: Element>(input: &[T], (c, h, w): (usize, usize, usize)) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for idx in [
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn block_sum<T: Element>(input: &[T], (c, h, w): (usize, usize, usize), block: usize) -> Vec<T> {
    let (bh, bw) = (h / block, w / block);
    let mut out = vec![T::zero(); c * bh * bw];
    for ch in 0..c {
        for y in 0..h {
            let row = &input[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut out[(ch * bh + y / block) * bw..(ch * bh + y / block + 1) * bw];
            for (bx, d) in dst.iter_mut().enumerate() {
                *d = *d + row[bx * block..(bx + 1) * block].iter().copied().sum::<T>();
            }
        }
    }
    out
}

pub(crate) fn block_sum_backward<T: Element>(grad_out: &[T], (c, h, w): (usize, usize, usize), block: usize) -> Vec<T> {
    let (bh, bw) = (h / block, w / block);
    let mut grad_in = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                grad_in.push(grad_out[(ch * bh + y / block) * bw + x / block]);
            }
        }
    }
    grad_in
}
