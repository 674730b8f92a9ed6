use super::Element;

/// Source taps for one output coordinate under half-pixel-centre mapping:
/// `src = (dst + 0.5)·in/out − 0.5`, clamped to the input.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

pub(crate) fn forward<T: Element>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in &ty {
            let fy = T::of(y.frac);
            let (r0, r1) = (&src[y.lo * w..(y.lo + 1) * w], &src[y.hi * w..(y.hi + 1) * w]);
            for t in &tx {
                let fx = T::of(t.frac);
                let top = r0[t.lo] + (r0[t.hi] - r0[t.lo]) * fx;
                let bot = r1[t.lo] + (r1[t.hi] - r1[t.lo]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    out
}

pub(crate) fn backward<T: Element>(
    dout: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        for (yi, y) in ty.iter().enumerate() {
            let fy = T::of(y.frac);
            for (xi, t) in tx.iter().enumerate() {
                let g = src[yi * ow + xi];
                let fx = T::of(t.frac);
                let one = T::one();
                dst[y.lo * w + t.lo] += g * (one - fy) * (one - fx);
                dst[y.lo * w + t.hi] += g * (one - fy) * fx;
                dst[y.hi * w + t.lo] += g * fy * (one - fx);
                dst[y.hi * w + t.hi] += g * fy * fx;
            }
        }
    }
    dx
}
