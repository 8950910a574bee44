//! im2col convolution kernels.
//!
//! The unfolded matrix has one row per `(c_in, kh, kw)` tap and one column per
//! output pixel. Rows are materialised one at a time, only for taps that carry
//! at least one nonzero weight (forward, input gradient) or at least one
//! weight whose gradient is requested. At extreme sparsity this skips almost
//! all of the unfold work while keeping a single im2col + matmul code path.

use crate::error::{Error, Result};

use super::Real;

/// Geometry of a 2-d cross-correlation with square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::shape("conv2d", x_shape, w_shape));
        }
        let (batch, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (c_out, wc_in, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if wc_in != c_in || kh != kw {
            return Err(Error::shape("conv2d", x_shape, w_shape));
        }
        if stride == 0 {
            return Err(Error::Input("conv2d stride must be positive".into()));
        }
        let k = kh;
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::shape("conv2d", x_shape, w_shape));
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    /// Rows of the unfolded matrix (`c_in * k * k`).
    pub fn taps(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Output pixels per image.
    pub fn pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.h_out, self.w_out]
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.pixels()
    }

    /// Writes unfolded row `tap` of one image into `row`.
    fn fill_row<T: Real>(&self, img: &[T], tap: usize, row: &mut [T]) {
        let kk = self.k * self.k;
        let ci = tap / kk;
        let kh = (tap % kk) / self.k;
        let kw = tap % self.k;
        let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
        for oh in 0..self.h_out {
            let ih = (oh * self.stride + kh) as isize - self.pad as isize;
            let dst = &mut row[oh * self.w_out..(oh + 1) * self.w_out];
            if ih < 0 || ih >= self.h as isize {
                dst.iter_mut().for_each(|v| *v = T::zero());
                continue;
            }
            let src = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
            for (ow, d) in dst.iter_mut().enumerate() {
                let iw = (ow * self.stride + kw) as isize - self.pad as isize;
                *d = if iw < 0 || iw >= self.w as isize {
                    T::zero()
                } else {
                    src[iw as usize]
                };
            }
        }
    }

    /// Accumulates row `tap` back into the input-gradient image (col2im).
    fn scatter_row<T: Real>(&self, dimg: &mut [T], tap: usize, row: &[T]) {
        let kk = self.k * self.k;
        let ci = tap / kk;
        let kh = (tap % kk) / self.k;
        let kw = tap % self.k;
        let plane = &mut dimg[ci * self.h * self.w..(ci + 1) * self.h * self.w];
        for oh in 0..self.h_out {
            let ih = (oh * self.stride + kh) as isize - self.pad as isize;
            if ih < 0 || ih >= self.h as isize {
                continue;
            }
            let dst = &mut plane[ih as usize * self.w..(ih as usize + 1) * self.w];
            let src = &row[oh * self.w_out..(oh + 1) * self.w_out];
            for (ow, &g) in src.iter().enumerate() {
                let iw = (ow * self.stride + kw) as isize - self.pad as isize;
                if iw >= 0 && (iw as usize) < self.w {
                    dst[iw as usize] += g;
                }
            }
        }
    }
}

/// Nonzero weights grouped by unfolded row: `(tap, [(c_out, weight)])`.
fn weight_columns<T: Real>(geom: &ConvGeom, weight: &[T]) -> Vec<(usize, Vec<(usize, T)>)> {
    let taps = geom.taps();
    let mut cols: Vec<Vec<(usize, T)>> = vec![Vec::new(); taps];
    for co in 0..geom.c_out {
        for (tap, &v) in weight[co * taps..(co + 1) * taps].iter().enumerate() {
            if v != T::zero() {
                cols[tap].push((co, v));
            }
        }
    }
    cols.into_iter()
        .enumerate()
        .filter(|(_, c)| !c.is_empty())
        .collect()
}

pub(crate) fn forward<T: Real>(geom: &ConvGeom, x: &[T], weight: &[T]) -> Vec<T> {
    let pixels = geom.pixels();
    let mut out = vec![T::zero(); geom.batch * geom.out_len()];
    let cols = weight_columns(geom, weight);
    let mut row = vec![T::zero(); pixels];
    for b in 0..geom.batch {
        let img = &x[b * geom.in_len()..(b + 1) * geom.in_len()];
        let dst = &mut out[b * geom.out_len()..(b + 1) * geom.out_len()];
        for (tap, entries) in &cols {
            geom.fill_row(img, *tap, &mut row);
            for &(co, wv) in entries {
                let o = &mut dst[co * pixels..(co + 1) * pixels];
                for (o, &r) in o.iter_mut().zip(&row) {
                    *o += wv * r;
                }
            }
        }
    }
    out
}

pub(crate) fn backward_input<T: Real>(
    geom: &ConvGeom,
    weight: &[T],
    dout: &[T],
    dx: &mut [T],
) {
    let pixels = geom.pixels();
    let cols = weight_columns(geom, weight);
    let mut row = vec![T::zero(); pixels];
    for b in 0..geom.batch {
        let g = &dout[b * geom.out_len()..(b + 1) * geom.out_len()];
        let dimg = &mut dx[b * geom.in_len()..(b + 1) * geom.in_len()];
        for (tap, entries) in &cols {
            row.iter_mut().for_each(|v| *v = T::zero());
            for &(co, wv) in entries {
                for (r, &gv) in row.iter_mut().zip(&g[co * pixels..(co + 1) * pixels]) {
                    *r += wv * gv;
                }
            }
            geom.scatter_row(dimg, *tap, &row);
        }
    }
}

/// Accumulates weight gradients. `support` restricts the computed entries to
/// the given flat indices; `None` computes the dense gradient.
pub(crate) fn backward_weight<T: Real>(
    geom: &ConvGeom,
    x: &[T],
    dout: &[T],
    support: Option<&[u32]>,
    dw: &mut [T],
) {
    let taps = geom.taps();
    let pixels = geom.pixels();
    let rows: Vec<(usize, Vec<usize>)> = match support {
        None => (0..taps).map(|t| (t, (0..geom.c_out).collect())).collect(),
        Some(idx) => {
            let mut by_tap: Vec<Vec<usize>> = vec![Vec::new(); taps];
            for &flat in idx {
                let flat = flat as usize;
                by_tap[flat % taps].push(flat / taps);
            }
            by_tap
                .into_iter()
                .enumerate()
                .filter(|(_, c)| !c.is_empty())
                .collect()
        }
    };
    let mut row = vec![T::zero(); pixels];
    for b in 0..geom.batch {
        let img = &x[b * geom.in_len()..(b + 1) * geom.in_len()];
        let g = &dout[b * geom.out_len()..(b + 1) * geom.out_len()];
        for (tap, cos) in &rows {
            geom.fill_row(img, *tap, &mut row);
            for &co in cos {
                let acc: T = g[co * pixels..(co + 1) * pixels]
                    .iter()
                    .zip(&row)
                    .map(|(&a, &b)| a * b)
                    .sum();
                dw[co * taps + tap] += acc;
            }
        }
    }
}
