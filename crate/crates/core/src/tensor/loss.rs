use super::Element;

/// Per-element smooth-L1 (`0.5·z²` below 1, `|z| − 0.5` otherwise).
pub(crate) fn smooth_l1_elem(z: f64) -> f64 {
    if z.abs() < 1.0 {
        0.5 * z * z
    } else {
        z.abs() - 0.5
    }
}

/// `Σ_m w_m Σ_s h(x_ms − y_ms) / (S·M)` over `M` rows of `S` sides.
/// Rows with zero weight are skipped, so their targets may be anything.
pub(crate) fn smooth_l1_forward<T: Element>(
    pred: &[T],
    target: &[T],
    weights: &[T],
    sides: usize,
) -> T {
    let rows = weights.len();
    let denom = (sides * rows) as f64;
    let mut acc = 0.0f64;
    for (m, &wm) in weights.iter().enumerate() {
        if wm == T::zero() {
            continue;
        }
        let row: f64 = (0..sides)
            .map(|s| smooth_l1_elem((pred[m * sides + s] - target[m * sides + s]).as_f64()))
            .sum();
        acc += wm.as_f64() * row;
    }
    T::of(acc / denom)
}

pub(crate) fn smooth_l1_backward<T: Element>(
    upstream: T,
    pred: &[T],
    target: &[T],
    weights: &[T],
    sides: usize,
) -> Vec<T> {
    let rows = weights.len();
    let scale = upstream / T::of((sides * rows) as f64);
    let mut grad = vec![T::zero(); pred.len()];
    for (m, &wm) in weights.iter().enumerate() {
        if wm == T::zero() {
            continue;
        }
        for s in 0..sides {
            let i = m * sides + s;
            let z = pred[i] - target[i];
            let dz = if z.abs() < T::one() { z } else { z.signum() };
            grad[i] = scale * wm * dz;
        }
    }
    grad
}

/// Softmax probabilities per row and the mean negative log-likelihood of the
/// labelled class.
pub(crate) fn cross_entropy_forward<T: Element>(
    logits: &[T],
    labels: &[usize],
    classes: usize,
) -> (T, Vec<T>) {
    let rows = labels.len();
    let mut probs = Vec::with_capacity(logits.len());
    let mut nll = 0.0f64;
    for (m, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits[m * classes..(m + 1) * classes]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        nll += lse - row[label];
        probs.extend(row.iter().map(|v| T::of((v - lse).exp())));
    }
    (T::of(nll / rows as f64), probs)
}

pub(crate) fn cross_entropy_backward<T: Element>(
    upstream: T,
    probs: &[T],
    labels: &[usize],
    classes: usize,
) -> Vec<T> {
    let scale = upstream / T::of(labels.len() as f64);
    let mut grad: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (m, &label) in labels.iter().enumerate() {
        grad[m * classes + label] = grad[m * classes + label] - scale;
    }
    grad
}
