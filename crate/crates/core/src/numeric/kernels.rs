//! Dense kernels shared by the forward and backward passes of graph ops.

use super::Float;

/// Strided matrix view used to describe gemm operands.
#[derive(Clone, Copy)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    /// Row-major `rows × cols` storage.
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self { rows, cols, rs: cols as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    /// Dense storage, transposed when `trans` is set.
    pub fn stored(rows: usize, cols: usize, trans: bool) -> Self {
        let v = Self::dense(rows, cols);
        if trans {
            v.t()
        } else {
            v
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm<T: Float>(
    alpha: T,
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    beta: T,
    c: &mut [T],
    cv: MatView,
) {
    debug_assert_eq!(av.cols, bv.rows);
    debug_assert_eq!(av.rows, cv.rows);
    debug_assert_eq!(bv.cols, cv.cols);
    T::gemm(
        av.rows,
        av.cols,
        bv.cols,
        alpha,
        a,
        (av.rs, av.cs),
        b,
        (bv.rs, bv.cs),
        beta,
        c,
        (cv.rs, cv.cs),
    );
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `lo..hi` whose stride-1 input column `ox + kj - pad`
    /// lies inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).min(self.wo);
        let hi = (self.w + self.pad).saturating_sub(kj).min(self.wo).max(lo);
        (lo, hi)
    }
}

/// Unfolds one `[c_in, h, w]` image into `[c_in*kh*kw, ho*wo]` patches.
pub(crate) fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ohw = g.out_hw();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.ho {
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_cols(kj);
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        if lo < hi {
                            let start = lo + kj - g.pad;
                            out[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im_add<T: Float>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let ohw = g.out_hw();
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let row = &src[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_cols(kj);
                        if lo < hi {
                            let start = lo + kj - g.pad;
                            for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(&row[lo..hi]) {
                                *d = *d + v;
                            }
                        }
                        continue;
                    }
                    for (ox, &v) in row.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Generic axis permutation of row-major data; `out` must be zeroed when
/// `accumulate` is false.
pub(crate) fn permute_into<T: Float>(
    src: &[T],
    shape: &[usize],
    perm: &[usize],
    out: &mut [T],
    accumulate: bool,
) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for o in out.iter_mut() {
        if accumulate {
            *o = *o + src[offset];
        } else {
            *o = src[offset];
        }
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Numerically stable softmax along the middle axis of `(outer, len, inner)`.
pub(crate) fn softmax_axis<T: Float>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.max(x[base + j * inner]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - m).exp();
                y[base + j * inner] = e;
                s = s + e;
            }
            for j in 0..len {
                y[base + j * inner] = y[base + j * inner] / s;
            }
        }
    }
    y
}
