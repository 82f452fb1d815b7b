//! Convolution and resampling kernels on raw NCHW buffers.
//!
//! Convolutions use "same" zero padding and unit stride; resolution changes
//! go through the pixel (un)shuffle permutations instead of strided kernels.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use crate::scalar::{gemm, MatRef, Scalar};

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Enables batch-parallel kernels.
///
/// Forward passes stay bit-reproducible either way. Weight gradients are
/// reduced in whatever order the thread pool produces them when parallel
/// kernels are on, so the last bits of a training run may differ between
/// runs. Keep this off for strict reproducibility.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::SeqCst);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::SeqCst)
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    debug_assert_eq!(col.len(), c * k * k * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let out_row = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for (xo, v) in out_row.iter_mut().enumerate() {
                        let sx = xo as isize + shift;
                        *v = if sx < 0 || sx >= w as isize { T::zero() } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for (xo, &g) in row[y * w..(y + 1) * w].iter().enumerate() {
                        let sx = xo as isize + shift;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] = dst[sx as usize] + g;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn conv_image<T: Scalar>(d: ConvDims, x: &[T], weight: &[T], bias: &[T], out: &mut [T], col: &mut Vec<T>) {
    let hw = d.h * d.w;
    for (co, chunk) in out.chunks_mut(hw).enumerate() {
        chunk.fill(bias[co]);
    }
    let rhs: &[T] = if d.k == 1 {
        x
    } else {
        col.resize(d.patch() * hw, T::zero());
        im2col(x, d.cin, d.h, d.w, d.k, col);
        col
    };
    gemm(MatRef::new(weight, d.cout, d.patch()), MatRef::new(rhs, d.patch(), hw), T::one(), out);
}

pub(crate) fn conv2d_forward<T: Scalar>(d: ConvDims, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let hw = d.h * d.w;
    let mut out = vec![T::zero(); d.batch * d.cout * hw];
    if parallel_enabled() && d.batch > 1 {
        out.par_chunks_mut(d.cout * hw)
            .zip(x.par_chunks(d.cin * hw))
            .for_each_init(Vec::new, |col, (o, xb)| conv_image(d, xb, weight, bias, o, col));
    } else {
        let mut col = Vec::new();
        for (o, xb) in out.chunks_mut(d.cout * hw).zip(x.chunks(d.cin * hw)) {
            conv_image(d, xb, weight, bias, o, &mut col);
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

fn weight_grad_image<T: Scalar>(d: ConvDims, xb: &[T], dyb: &[T], dw: &mut [T], db: &mut [T], col: &mut Vec<T>) {
    let hw = d.h * d.w;
    let patches: &[T] = if d.k == 1 {
        xb
    } else {
        col.resize(d.patch() * hw, T::zero());
        im2col(xb, d.cin, d.h, d.w, d.k, col);
        col
    };
    gemm(MatRef::new(dyb, d.cout, hw), MatRef::t(patches, d.patch(), hw), T::one(), dw);
    for (co, g) in dyb.chunks(hw).enumerate() {
        db[co] = db[co] + g.iter().copied().sum::<T>();
    }
}

fn input_grad_image<T: Scalar>(d: ConvDims, weight: &[T], dyb: &[T], dxb: &mut [T], col: &mut Vec<T>) {
    let hw = d.h * d.w;
    if d.k == 1 {
        gemm(MatRef::t(weight, d.cout, d.patch()), MatRef::new(dyb, d.cout, hw), T::zero(), dxb);
        return;
    }
    col.resize(d.patch() * hw, T::zero());
    gemm(MatRef::t(weight, d.cout, d.patch()), MatRef::new(dyb, d.cout, hw), T::zero(), col);
    dxb.fill(T::zero());
    col2im_add(col, d.cin, d.h, d.w, d.k, dxb);
}

pub(crate) fn conv2d_backward<T: Scalar>(d: ConvDims, x: &[T], weight: &[T], dy: &[T], need_dx: bool) -> ConvGrads<T> {
    let hw = d.h * d.w;
    let wlen = d.cout * d.patch();
    let (dw, db) = if parallel_enabled() && d.batch > 1 {
        x.par_chunks(d.cin * hw)
            .zip(dy.par_chunks(d.cout * hw))
            .fold(
                || (vec![T::zero(); wlen], vec![T::zero(); d.cout], Vec::new()),
                |(mut dw, mut db, mut col), (xb, dyb)| {
                    weight_grad_image(d, xb, dyb, &mut dw, &mut db, &mut col);
                    (dw, db, col)
                },
            )
            .map(|(dw, db, _)| (dw, db))
            .reduce(
                || (vec![T::zero(); wlen], vec![T::zero(); d.cout]),
                |(mut aw, mut ab), (bw, bb)| {
                    aw.iter_mut().zip(&bw).for_each(|(a, &b)| *a = *a + b);
                    ab.iter_mut().zip(&bb).for_each(|(a, &b)| *a = *a + b);
                    (aw, ab)
                },
            )
    } else {
        let mut dw = vec![T::zero(); wlen];
        let mut db = vec![T::zero(); d.cout];
        let mut col = Vec::new();
        for (xb, dyb) in x.chunks(d.cin * hw).zip(dy.chunks(d.cout * hw)) {
            weight_grad_image(d, xb, dyb, &mut dw, &mut db, &mut col);
        }
        (dw, db)
    };
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); d.batch * d.cin * hw];
        if parallel_enabled() && d.batch > 1 {
            dx.par_chunks_mut(d.cin * hw)
                .zip(dy.par_chunks(d.cout * hw))
                .for_each_init(Vec::new, |col, (dxb, dyb)| input_grad_image(d, weight, dyb, dxb, col));
        } else {
            let mut col = Vec::new();
            for (dxb, dyb) in dx.chunks_mut(d.cin * hw).zip(dy.chunks(d.cout * hw)) {
                input_grad_image(d, weight, dyb, dxb, &mut col);
            }
        }
        dx
    });
    ConvGrads { dx, dw, db }
}

/// `[B, 4C, H, W] -> [B, C, 2H, 2W]`.
pub(crate) fn pixel_shuffle<T: Scalar>(x: &[T], b: usize, c_out: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let (oh, ow) = (2 * h, 2 * w);
    for bi in 0..b {
        for c in 0..c_out {
            for i in 0..2 {
                for j in 0..2 {
                    let src = &x[((bi * c_out + c) * 4 + i * 2 + j) * h * w..][..h * w];
                    let dst_plane = (bi * c_out + c) * oh * ow;
                    for y in 0..h {
                        for xx in 0..w {
                            out[dst_plane + (2 * y + i) * ow + 2 * xx + j] = src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[B, C, 2H, 2W] -> [B, 4C, H, W]`, the inverse of [`pixel_shuffle`].
pub(crate) fn pixel_unshuffle<T: Scalar>(x: &[T], b: usize, c_in: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let (oh, ow) = (h / 2, w / 2);
    for bi in 0..b {
        for c in 0..c_in {
            let src_plane = (bi * c_in + c) * h * w;
            for i in 0..2 {
                for j in 0..2 {
                    let dst = &mut out[((bi * c_in + c) * 4 + i * 2 + j) * oh * ow..][..oh * ow];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[y * ow + xx] = x[src_plane + (2 * y + i) * w + 2 * xx + j];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution, independent of im2col and gemm.
    fn conv_naive(d: ConvDims, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let pad = (d.k / 2) as isize;
        let mut out = vec![0.0; d.batch * d.cout * d.h * d.w];
        for n in 0..d.batch {
            for co in 0..d.cout {
                for y in 0..d.h {
                    for xx in 0..d.w {
                        let mut acc = b[co];
                        for ci in 0..d.cin {
                            for ky in 0..d.k {
                                for kx in 0..d.k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= d.h as isize || sx >= d.w as isize {
                                        continue;
                                    }
                                    let xv = x[((n * d.cin + ci) * d.h + sy as usize) * d.w + sx as usize];
                                    let wv = w[((co * d.cin + ci) * d.k + ky) * d.k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((n * d.cout + co) * d.h + y) * d.w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &k in &[1, 3] {
            let d = ConvDims { batch: 2, cin: 3, cout: 4, h: 5, w: 6, k };
            let x = pseudo(d.batch * d.cin * d.h * d.w, 1);
            let w = pseudo(d.cout * d.cin * k * k, 2);
            let b = pseudo(d.cout, 3);
            let fast = conv2d_forward(d, &x, &w, &b);
            let slow = conv_naive(d, &x, &w, &b);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_input_gradient_is_adjoint() {
        // <conv(x), g> - <bias, sum g> = <x, conv^T(g)>
        let d = ConvDims { batch: 2, cin: 2, cout: 3, h: 4, w: 5, k: 3 };
        let x = pseudo(d.batch * d.cin * d.h * d.w, 4);
        let w = pseudo(d.cout * d.cin * 9, 5);
        let zero_b = vec![0.0; d.cout];
        let g = pseudo(d.batch * d.cout * d.h * d.w, 6);
        let y = conv2d_forward(d, &x, &w, &zero_b);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let grads = conv2d_backward(d, &x, &w, &g, true);
        let rhs: f64 = x.iter().zip(grads.dx.as_ref().unwrap()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // Same identity through the weight gradient.
        let rhs_w: f64 = w.iter().zip(&grads.dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn shuffle_roundtrip() {
        let x = pseudo(2 * 8 * 3 * 5, 7);
        let up = pixel_shuffle(&x, 2, 2, 3, 5);
        let back = pixel_unshuffle(&up, 2, 2, 6, 10);
        assert_eq!(x, back);
    }

    #[test]
    fn parallel_kernels_match_sequential_forward() {
        let d = ConvDims { batch: 4, cin: 3, cout: 5, h: 6, w: 6, k: 3 };
        let x = pseudo(d.batch * d.cin * 36, 8);
        let w = pseudo(d.cout * d.cin * 9, 9);
        let b = pseudo(d.cout, 10);
        let seq = conv2d_forward(d, &x, &w, &b);
        set_parallel(true);
        let par = conv2d_forward(d, &x, &w, &b);
        set_parallel(false);
        assert_eq!(seq, par);
    }
}
