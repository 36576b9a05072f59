//! Convolution kernels (im2col + GEMM). Layouts are NCHW; kernels are
//! `[cout, cin, k, k]` for convolution and `[cin, cout, 2, 2]` for the
//! transposed variant.

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
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
    pub fn new(x: [usize; 4], w: [usize; 4], stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, wd] = x;
        let [cout, wcin, k, k2] = w;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d: kernel expects {wcin} input channels, input has {cin}"
            )));
        }
        if k != k2 || k == 0 {
            return Err(Error::Geometry(format!("conv2d: kernel {k}x{k2} must be square and non-empty")));
        }
        if stride == 0 {
            return Err(Error::Geometry("conv2d: stride 0".into()));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Geometry(format!(
                "conv2d: kernel {k} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        Ok(Self {
            n,
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let opix = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * opix..(row + 1) * opix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let opix = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * opix..(row + 1) * opix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let opix = g.ho * g.wo;
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * opix;
    let mut out = vec![T::zero(); g.n * out_sz];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * opix]
    };
    for n in 0..g.n {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let on = &mut out[n * out_sz..(n + 1) * out_sz];
        for (co, row) in on.chunks_mut(opix).enumerate() {
            row.iter_mut().for_each(|v| *v = b[co]);
        }
        let src = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        T::gemm(false, false, g.cout, opix, g.col_rows(), T::one(), w, src, T::one(), on);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub w: Option<Vec<T>>,
    pub b: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    needs: [bool; 3],
) -> ConvGrads<T> {
    let opix = g.ho * g.wo;
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * opix;
    let rows = g.col_rows();
    let mut gx = needs[0].then(|| vec![T::zero(); g.n * in_sz]);
    let mut gw = needs[1].then(|| vec![T::zero(); w.len()]);
    let mut gb = needs[2].then(|| vec![T::zero(); g.cout]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * opix }];
    let mut gcols = vec![T::zero(); if needs[0] && !g.is_pointwise() { rows * opix } else { 0 }];
    for n in 0..g.n {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let gn = &gout[n * out_sz..(n + 1) * out_sz];
        if let Some(gb) = gb.as_mut() {
            for (co, row) in gn.chunks(opix).enumerate() {
                gb[co] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let src = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            T::gemm(false, true, g.cout, rows, opix, T::one(), gn, src, T::one(), gw);
        }
        if let Some(gx) = gx.as_mut() {
            let gxn = &mut gx[n * in_sz..(n + 1) * in_sz];
            if g.is_pointwise() {
                T::gemm(true, false, rows, opix, g.cout, T::one(), w, gn, T::zero(), gxn);
            } else {
                T::gemm(true, false, rows, opix, g.cout, T::one(), w, gn, T::zero(), &mut gcols);
                col2im(g, &gcols, gxn);
            }
        }
    }
    ConvGrads { x: gx, w: gw, b: gb }
}

pub(crate) fn conv_t2_forward<T: Scalar>(x_shape: [usize; 4], cout: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let [n, cin, h, wd] = x_shape;
    let pix = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let out_sz = cout * oh * ow;
    let mut out = vec![T::zero(); n * out_sz];
    let mut cols = vec![T::zero(); cout * 4 * pix];
    for s in 0..n {
        let xn = &x[s * cin * pix..(s + 1) * cin * pix];
        // cols[(co, a, b), pix] = sum_ci w[ci, (co, a, b)] x[ci, pix]
        T::gemm(true, false, cout * 4, pix, cin, T::one(), w, xn, T::zero(), &mut cols);
        let on = &mut out[s * out_sz..(s + 1) * out_sz];
        for co in 0..cout {
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &cols[(co * 4 + a * 2 + bb) * pix..(co * 4 + a * 2 + bb + 1) * pix];
                    for i in 0..h {
                        for j in 0..wd {
                            on[(co * oh + 2 * i + a) * ow + 2 * j + bb] = row[i * wd + j] + b[co];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_t2_backward<T: Scalar>(
    x_shape: [usize; 4],
    cout: usize,
    x: &[T],
    w: &[T],
    gout: &[T],
    needs: [bool; 3],
) -> ConvGrads<T> {
    let [n, cin, h, wd] = x_shape;
    let pix = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let out_sz = cout * oh * ow;
    let mut gx = needs[0].then(|| vec![T::zero(); x.len()]);
    let mut gw = needs[1].then(|| vec![T::zero(); w.len()]);
    let mut gb = needs[2].then(|| vec![T::zero(); cout]);
    let mut gcols = vec![T::zero(); cout * 4 * pix];
    for s in 0..n {
        let gn = &gout[s * out_sz..(s + 1) * out_sz];
        if let Some(gb) = gb.as_mut() {
            for (co, plane) in gn.chunks(oh * ow).enumerate() {
                gb[co] += plane.iter().copied().sum::<T>();
            }
        }
        if gx.is_none() && gw.is_none() {
            continue;
        }
        for co in 0..cout {
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &mut gcols[(co * 4 + a * 2 + bb) * pix..(co * 4 + a * 2 + bb + 1) * pix];
                    for i in 0..h {
                        for j in 0..wd {
                            row[i * wd + j] = gn[(co * oh + 2 * i + a) * ow + 2 * j + bb];
                        }
                    }
                }
            }
        }
        let xn = &x[s * cin * pix..(s + 1) * cin * pix];
        if let Some(gx) = gx.as_mut() {
            let gxn = &mut gx[s * cin * pix..(s + 1) * cin * pix];
            T::gemm(false, false, cin, pix, cout * 4, T::one(), w, &gcols, T::zero(), gxn);
        }
        if let Some(gw) = gw.as_mut() {
            T::gemm(false, true, cin, cout * 4, pix, T::one(), xn, &gcols, T::one(), gw);
        }
    }
    ConvGrads { x: gx, w: gw, b: gb }
}
