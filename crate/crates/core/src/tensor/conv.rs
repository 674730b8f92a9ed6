use rayon::prelude::*;

use super::{gemm, Element};
use crate::error::{Error, Result};

/// `floor((input + 2·padding − kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, c, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("conv2d", input, weight)),
        };
        let (o, k) = match *weight {
            [o, ci, kh, kw] if ci == c && kh == kw => (o, kh),
            _ => return Err(Error::shape("conv2d", input, weight)),
        };
        if bias != [o] {
            return Err(Error::shape("conv2d bias", weight, bias));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be at least 1"));
        }
        let (oh, ow) = match (
            conv_output_extent(h, k, stride, pad),
            conv_output_extent(w, k, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(Error::shape("conv2d", input, weight)),
        };
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.out_plane();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
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

fn col2im<T: Element>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_plane();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and the im2col buffers (kept for the weight gradient).
pub(crate) fn forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let rows = g.col_rows();
    let p = g.out_plane();
    let mut out = vec![T::zero(); g.n * g.o * p];
    let mut cols = vec![T::zero(); g.n * rows * p];
    out.par_chunks_mut(g.o * p)
        .zip(cols.par_chunks_mut(rows * p))
        .zip(x.par_chunks(g.c * g.h * g.w))
        .for_each(|((out_n, col_n), x_n)| {
            im2col(x_n, g, col_n);
            for (oc, plane) in out_n.chunks_mut(p).enumerate() {
                plane.fill(bias[oc]);
            }
            gemm(g.o, rows, p, weight, false, col_n, false, out_n, true);
        });
    (out, cols)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Element>(
    dout: &[T],
    weight: &[T],
    cols: &[T],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let rows = g.col_rows();
    let p = g.out_plane();

    let input = need[0].then(|| {
        let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
        dx.par_chunks_mut(g.c * g.h * g.w)
            .zip(dout.par_chunks(g.o * p))
            .for_each_init(
                || vec![T::zero(); rows * p],
                |dcol, (dx_n, dout_n)| {
                    gemm(rows, g.o, p, weight, true, dout_n, false, dcol, false);
                    col2im(dcol, g, dx_n);
                },
            );
        dx
    });

    // Per-sample partials summed in batch order keep the result independent
    // of the thread count.
    let weight_grad = need[1].then(|| {
        let partials: Vec<Vec<T>> = dout
            .par_chunks(g.o * p)
            .zip(cols.par_chunks(rows * p))
            .map(|(dout_n, col_n)| {
                let mut dw = vec![T::zero(); g.o * rows];
                gemm(g.o, p, rows, dout_n, false, col_n, true, &mut dw, false);
                dw
            })
            .collect();
        let mut dw = vec![T::zero(); g.o * rows];
        for part in &partials {
            dw.iter_mut().zip(part).for_each(|(a, &b)| *a += b);
        }
        dw
    });

    let bias = need[2].then(|| {
        let mut db = vec![T::zero(); g.o];
        for dout_n in dout.chunks(g.o * p) {
            for (oc, plane) in dout_n.chunks(p).enumerate() {
                db[oc] += plane.iter().copied().sum::<T>();
            }
        }
        db
    });

    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}
