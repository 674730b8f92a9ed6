use super::Element;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], k: usize, stride: usize) -> Result<Self> {
        let [n, c, h, w] = match *input {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::invalid(format!("maxpool2d: expected rank-4 input, got {input:?}"))),
        };
        if k == 0 || stride == 0 {
            return Err(Error::invalid("maxpool2d: kernel and stride must be at least 1"));
        }
        if h < k || w < k {
            return Err(Error::invalid(format!(
                "maxpool2d: window {k}x{k} larger than input {h}x{w}"
            )));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            stride,
            oh: (h - k) / stride + 1,
            ow: (w - k) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.oh, self.ow]
    }
}

/// Max over each window; `argmax` holds the flat input index of the winner,
/// the first element in row-major window order on ties.
pub(crate) fn forward<T: Element>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let planes = g.n * g.c;
    let mut out = Vec::with_capacity(planes * g.oh * g.ow);
    let mut argmax = Vec::with_capacity(planes * g.oh * g.ow);
    for pl in 0..planes {
        let base = pl * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best_idx = base + oy * g.stride * g.w + ox * g.stride;
                let mut best = x[best_idx];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let idx = base + (oy * g.stride + ky) * g.w + ox * g.stride + kx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn backward<T: Element>(dout: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dout.iter().zip(argmax) {
        dx[i] += g;
    }
    dx
}
