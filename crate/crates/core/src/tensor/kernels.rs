// Raw numeric kernels used by the tape. Shapes are validated by the caller.

use super::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one image `[C, H, W]` into `[C*KH*KW, OH*OW]`.
pub(crate) fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); g.n * g.o * ncols];
    let mut cols = vec![T::zero(); if is_pointwise(g) { 0 } else { rows * ncols }];
    let in_len = g.c * g.h * g.w;
    for b in 0..g.n {
        let img = &x[b * in_len..(b + 1) * in_len];
        let dst = &mut out[b * g.o * ncols..(b + 1) * g.o * ncols];
        let src: &[T] = if is_pointwise(g) {
            img
        } else {
            im2col(img, g, &mut cols);
            &cols
        };
        T::gemm(g.o, rows, ncols, w, false, src, false, T::zero(), dst);
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                for v in &mut dst[o * ncols..(o + 1) * ncols] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`, each only when requested.
#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_len = g.c * g.h * g.w;
    let pointwise = is_pointwise(g);
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = want_db.then(|| vec![T::zero(); g.o]);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { rows * ncols }];
    let mut dcols = vec![T::zero(); if want_dx && !pointwise { rows * ncols } else { 0 }];
    for b in 0..g.n {
        let img = &x[b * in_len..(b + 1) * in_len];
        let dyb = &dy[b * g.o * ncols..(b + 1) * g.o * ncols];
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if pointwise {
                img
            } else {
                im2col(img, g, &mut cols);
                &cols
            };
            // dW[o, r] += sum_p dY[o, p] * cols[r, p]
            T::gemm(g.o, ncols, rows, dyb, false, src, true, T::one(), dw);
        }
        if let Some(db) = db.as_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dyb[o * ncols..(o + 1) * ncols].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                T::gemm(rows, g.o, ncols, w, true, dyb, false, T::one(), dimg);
            } else {
                T::gemm(rows, g.o, ncols, w, true, dyb, false, T::zero(), &mut dcols);
                col2im(&dcols, g, dimg);
            }
        }
    }
    (dx, dw, db)
}

/// 2x2 max pooling with stride 2 over `[N, C, H, W]`; odd trailing rows or
/// columns are dropped. Returns values and the flat argmax per output.
pub(crate) fn maxpool2_forward<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    // strict comparison keeps the first maximum on ties
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
