//! im2col / col2im lowering shared by the 1-D, 2-D and transposed convolutions.
//!
//! A 1-D convolution is the 2-D case with `h = 1` and a `1 × k` kernel.

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
        (ph, pw): (usize, usize),
    ) -> Option<Self> {
        if h + 2 * ph < kh || w + 2 * pw < kw || sh == 0 || sw == 0 {
            return None;
        }
        let ho = (h + 2 * ph - kh) / sh + 1;
        let wo = (w + 2 * pw - kw) / sw + 1;
        Some(ConvGeom {
            n,
            c,
            h,
            w,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            ho,
            wo,
        })
    }

    /// Rows of the column matrix: `c·kh·kw`.
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Columns of the column matrix: `n·ho·wo`.
    pub fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// `x[n, c, h, w]` → `col[(c, i, j), (n, oh, ow)]`.
pub(crate) fn im2col<F: Real>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let cols = g.cols();
    let mut col = vec![F::zero(); g.rows() * cols];
    let hw_out = g.ho * g.wo;
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * hw_out..(n + 1) * hw_out];
                    for oh in 0..g.ho {
                        let ih = (oh * g.sh + i) as isize - g.ph as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for ow in 0..g.wo {
                            let iw = (ow * g.sw + j) as isize - g.pw as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[oh * g.wo + ow] = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto `x`'s layout.
pub(crate) fn col2im<F: Real>(col: &[F], g: &ConvGeom) -> Vec<F> {
    let cols = g.cols();
    let mut x = vec![F::zero(); g.n * g.c * g.h * g.w];
    let hw_out = g.ho * g.wo;
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * hw_out..(n + 1) * hw_out];
                    for oh in 0..g.ho {
                        let ih = (oh * g.sh + i) as isize - g.ph as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        for ow in 0..g.wo {
                            let iw = (ow * g.sw + j) as isize - g.pw as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[ih as usize * g.w + iw as usize] += src[oh * g.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, c, s]` → `[c, n·s]`.
pub(crate) fn batch_to_channel_major<F: Real>(x: &[F], n: usize, c: usize, s: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * s..(b * c + ch + 1) * s];
            out[ch * n * s + b * s..ch * n * s + (b + 1) * s].copy_from_slice(src);
        }
    }
    out
}

/// `[c, n·s]` → `[n, c, s]`.
pub(crate) fn channel_major_to_batch<F: Real>(x: &[F], n: usize, c: usize, s: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for ch in 0..c {
        for b in 0..n {
            let src = &x[ch * n * s + b * s..ch * n * s + (b + 1) * s];
            out[(b * c + ch) * s..(b * c + ch + 1) * s].copy_from_slice(src);
        }
    }
    out
}
