//! Direct 2-D convolution via im2col + GEMM.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], wshape: &[usize], stride: usize, pad: usize) -> Option<Self> {
        if x.len() != 4 || wshape.len() != 4 || x[1] != wshape[1] || wshape[2] != wshape[3] {
            return None;
        }
        let k = wshape[2];
        if stride == 0 || x[2] + 2 * pad < k || x[3] + 2 * pad < k {
            return None;
        }
        Some(Self {
            n: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: wshape[0],
            k,
            stride,
            pad,
            ho: (x[2] + 2 * pad - k) / stride + 1,
            wo: (x[3] + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.cout * self.ho * self.wo
    }
}

fn im2col<S: Scalar>(g: &ConvGeom, x: &[S], cols: &mut [S]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let hw = g.col_cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize - p;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *d = if ix < 0 || ix >= g.w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(g: &ConvGeom, cols: &[S], dx: &mut [S]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let hw = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); g.n * g.out_len()];
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![S::zero(); rows * cols_n]
    };
    for n in 0..g.n {
        let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
        let b: &[S] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        let on = &mut out[n * g.out_len()..(n + 1) * g.out_len()];
        S::gemm(
            g.cout,
            rows,
            cols_n,
            S::one(),
            w,
            (rows as isize, 1),
            b,
            (cols_n as isize, 1),
            S::zero(),
            on,
            (cols_n as isize, 1),
        );
    }
    out
}

/// Accumulates input and/or weight gradients.
pub(crate) fn backward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    dy: &[S],
    dx: Option<&mut [S]>,
    dw: Option<&mut [S]>,
) {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![S::zero(); if g.is_pointwise() { 0 } else { rows * cols_n }];
    let mut dcols = vec![S::zero(); if g.is_pointwise() { 0 } else { rows * cols_n }];
    let mut dx = dx;
    let mut dw = dw;
    for n in 0..g.n {
        let dyn_ = &dy[n * g.out_len()..(n + 1) * g.out_len()];
        if let Some(dw) = dw.as_deref_mut() {
            let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
            let b: &[S] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            // dW (cout x rows) += dY (cout x hw) * cols^T (hw x rows)
            S::gemm(
                g.cout,
                cols_n,
                rows,
                S::one(),
                dyn_,
                (cols_n as isize, 1),
                b,
                (1, cols_n as isize),
                S::one(),
                dw,
                (rows as isize, 1),
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * g.in_len()..(n + 1) * g.in_len()];
            if g.is_pointwise() {
                S::gemm(
                    rows,
                    g.cout,
                    cols_n,
                    S::one(),
                    w,
                    (1, rows as isize),
                    dyn_,
                    (cols_n as isize, 1),
                    S::one(),
                    dxn,
                    (cols_n as isize, 1),
                );
            } else {
                S::gemm(
                    rows,
                    g.cout,
                    cols_n,
                    S::one(),
                    w,
                    (1, rows as isize),
                    dyn_,
                    (cols_n as isize, 1),
                    S::zero(),
                    &mut dcols,
                    (cols_n as isize, 1),
                );
                col2im(g, &dcols, dxn);
            }
        }
    }
}
