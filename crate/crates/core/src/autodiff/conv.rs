//! 2-D cross-correlation over single images in `[C, H, W]` layout, lowered
//! to matrix products through an im2col buffer of shape
//! `[C_in*k*k, H'*W']`. The products are single-threaded, so results do not
//! depend on the thread pool.

use crate::tensor::Element;

const TINY_PLANE: usize = 1;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// A 1x1 unpadded conv reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }

    /// Output planes small enough that packing for a matrix product costs
    /// more than looping over the taps that touch the input.
    fn is_tiny(&self) -> bool {
        self.pixels() <= TINY_PLANE
    }

    /// Calls `f(tap, oy, iy, lo, hi)` for every kernel tap and output row
    /// with in-bounds input; output columns `lo..hi` read input column
    /// `ox + kx - pad`.
    fn for_each_live_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        for ky in 0..self.k {
            for kx in 0..self.k {
                let (lo, hi) = self.col_range(kx);
                if lo == hi {
                    continue;
                }
                for oy in self.row_range(ky) {
                    let iy = oy + ky - self.pad;
                    f(ky * self.k + kx, oy, iy * self.w + kx, lo, hi);
                }
            }
        }
    }

    /// Output columns `ox` for which `ox + kx - pad` falls inside the input row.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.out_w());
        (lo, hi.max(lo))
    }

    /// Output rows `oy` for which `oy + ky - pad` falls inside the input.
    fn row_range(&self, ky: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(ky);
        let hi = (self.h + self.pad).saturating_sub(ky).min(self.out_h());
        lo..hi.max(lo)
    }
}

fn im2col<T: Element>(g: ConvGeometry, input: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut col = vec![T::zero(); g.rows() * oh * ow];
    for c in 0..g.c_in {
        let in_c = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst_row = &mut col[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = g.col_range(kx);
                for oy in g.row_range(ky) {
                    let iy = oy + ky - g.pad;
                    let src = &in_c[iy * g.w + lo + kx - g.pad..iy * g.w + hi + kx - g.pad];
                    dst_row[oy * ow + lo..oy * ow + hi].copy_from_slice(src);
                }
            }
        }
    }
    col
}

fn col2im<T: Element>(g: ConvGeometry, col: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let out_c = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src_row = &col[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = g.col_range(kx);
                for oy in g.row_range(ky) {
                    let iy = oy + ky - g.pad;
                    let dst = &mut out_c[iy * g.w + lo + kx - g.pad..iy * g.w + hi + kx - g.pad];
                    for (d, &s) in dst.iter_mut().zip(&src_row[oy * ow + lo..oy * ow + hi]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn forward<T: Element>(g: ConvGeometry, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.pixels();
    let mut out: Vec<T> = bias.iter().flat_map(|&b| std::iter::repeat_n(b, plane)).collect();
    if g.is_tiny() {
        let (ow, kk, hw) = (g.out_w(), g.k * g.k, g.h * g.w);
        g.for_each_live_tap(|tap, oy, base, lo, hi| {
            for co in 0..g.c_out {
                let dst = &mut out[co * plane + oy * ow + lo..co * plane + oy * ow + hi];
                for ci in 0..g.c_in {
                    let w = kernel[(co * g.c_in + ci) * kk + tap];
                    let src = &input[ci * hw + base + lo - g.pad..ci * hw + base + hi - g.pad];
                    for (d, &x) in dst.iter_mut().zip(src) {
                        *d = *d + w * x;
                    }
                }
            }
        });
        return out;
    }
    let owned;
    let col = if g.is_pointwise() {
        input
    } else {
        owned = im2col(g, input);
        &owned
    };
    T::gemm(g.c_out, g.rows(), plane, kernel, false, col, false, T::one(), &mut out);
    out
}

pub(crate) fn backward_input<T: Element>(g: ConvGeometry, kernel: &[T], grad_out: &[T]) -> Vec<T> {
    if g.is_tiny() {
        let (plane, ow, kk, hw) = (g.pixels(), g.out_w(), g.k * g.k, g.h * g.w);
        let mut gin = vec![T::zero(); g.c_in * hw];
        g.for_each_live_tap(|tap, oy, base, lo, hi| {
            for co in 0..g.c_out {
                let src = &grad_out[co * plane + oy * ow + lo..co * plane + oy * ow + hi];
                for ci in 0..g.c_in {
                    let w = kernel[(co * g.c_in + ci) * kk + tap];
                    let dst = &mut gin[ci * hw + base + lo - g.pad..ci * hw + base + hi - g.pad];
                    for (d, &go) in dst.iter_mut().zip(src) {
                        *d = *d + w * go;
                    }
                }
            }
        });
        return gin;
    }
    let mut col = vec![T::zero(); g.rows() * g.pixels()];
    T::gemm(g.rows(), g.c_out, g.pixels(), kernel, true, grad_out, false, T::zero(), &mut col);
    if g.is_pointwise() {
        col
    } else {
        col2im(g, &col)
    }
}

pub(crate) fn backward_kernel<T: Element>(g: ConvGeometry, input: &[T], grad_out: &[T]) -> Vec<T> {
    if g.is_tiny() {
        let (plane, ow, kk, hw) = (g.pixels(), g.out_w(), g.k * g.k, g.h * g.w);
        let mut gk = vec![T::zero(); g.c_out * g.c_in * kk];
        g.for_each_live_tap(|tap, oy, base, lo, hi| {
            for co in 0..g.c_out {
                let go = &grad_out[co * plane + oy * ow + lo..co * plane + oy * ow + hi];
                for ci in 0..g.c_in {
                    let x = &input[ci * hw + base + lo - g.pad..ci * hw + base + hi - g.pad];
                    let acc: T = go.iter().zip(x).map(|(&a, &b)| a * b).sum();
                    let slot = &mut gk[(co * g.c_in + ci) * kk + tap];
                    *slot = *slot + acc;
                }
            }
        });
        return gk;
    }
    let owned;
    let col = if g.is_pointwise() {
        input
    } else {
        owned = im2col(g, input);
        &owned
    };
    let mut grad_k = vec![T::zero(); g.c_out * g.rows()];
    T::gemm(g.c_out, g.pixels(), g.rows(), grad_out, false, col, true, T::zero(), &mut grad_k);
    grad_k
}

pub(crate) fn backward_bias<T: Element>(g: ConvGeometry, grad_out: &[T]) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    grad_out.chunks(plane).map(|p| p.iter().copied().sum()).collect()
}
