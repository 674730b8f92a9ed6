//! Browser bindings for the static demo page in `www/`.
//!
//! Three operations are exposed: rendering frames of a synthetic sequence,
//! sampling the one-cycle learning-rate schedule, and measuring what frame
//! dropping alone costs an otherwise perfect tracker.

use buftrack::eval::{metrics_from_overlaps, CURVE_POINTS};
use buftrack::iou;
use buftrack::optim::OneCycle;
use buftrack::pipeline::{should_drop, speedup_factor};
use buftrack::synth::{GenOptions, SequenceSpec};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn demo_spec(seed: u64, length: usize) -> SequenceSpec {
    SequenceSpec::random(
        seed,
        &GenOptions {
            length,
            ..GenOptions::default()
        },
    )
}

/// One rendered frame with its ground truth.
#[wasm_bindgen]
pub struct Frame {
    width: u32,
    height: u32,
    rgba: Vec<u8>,
    bbox: Vec<f64>,
    present: bool,
}

#[wasm_bindgen]
impl Frame {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Pixels in RGBA order, ready for `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// Target box as `[x, y, w, h]`.
    pub fn bbox(&self) -> Vec<f64> {
        self.bbox.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn present(&self) -> bool {
        self.present
    }
}

/// Frame `t` of the synthetic sequence generated from `seed`.
#[wasm_bindgen]
pub fn render_frame(seed: u64, length: usize, t: usize) -> Result<Frame, JsError> {
    let spec = demo_spec(seed, length.max(1));
    if t >= spec.length {
        return Err(js_err(format!("frame {t} outside a {}-frame sequence", spec.length)));
    }
    let (img, _) = spec.render(t);
    let ann = spec.annotation(t);
    let rgba = img
        .pixels()
        .flat_map(|p| [p.0[0], p.0[1], p.0[2], 255])
        .collect();
    Ok(Frame {
        width: img.width(),
        height: img.height(),
        rgba,
        bbox: vec![ann.bbox.x, ann.bbox.y, ann.bbox.w, ann.bbox.h],
        present: ann.present,
    })
}

/// Learning rate at every step `0..=total_steps` of one cycle.
#[wasm_bindgen]
pub fn one_cycle_curve(total_steps: usize, max_lr: f64) -> Result<Vec<f64>, JsError> {
    if total_steps == 0 || !(max_lr > 0.0) {
        return Err(js_err("need at least one step and a positive learning rate"));
    }
    let s = OneCycle::new(total_steps, max_lr);
    (0..=total_steps).map(|i| s.lr_at(i).map_err(js_err)).collect()
}

/// Success curve (101 thresholds) of a tracker that reports the exact
/// ground truth on processed frames and holds its last box on dropped ones.
/// `eta = 0` disables dropping. The speedup factor is appended as the last
/// element.
#[wasm_bindgen]
pub fn drop_success_curve(seed: u64, length: usize, eta: usize) -> Result<Vec<f64>, JsError> {
    let eta = (eta > 0).then_some(eta);
    let sf = speedup_factor(eta).map_err(js_err)?;
    let spec = demo_spec(seed, length.max(2));
    let mut held = spec.annotation(0);
    let mut overlaps = Vec::with_capacity(spec.length - 1);
    for t in 1..spec.length {
        let gt = spec.annotation(t);
        if !should_drop(t, eta).map_err(js_err)? {
            held = gt;
        }
        overlaps.push(match (gt.present, held.present) {
            (true, _) => iou(&held.bbox, &gt.bbox),
            (false, false) => 1.0,
            (false, true) => 0.0,
        });
    }
    let m = metrics_from_overlaps(&overlaps);
    let mut out = m.curve;
    debug_assert_eq!(out.len(), CURVE_POINTS);
    out.push(sf);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_buffer_matches_dimensions() {
        let f = render_frame(3, 20, 5).unwrap();
        assert_eq!(f.rgba().len(), (f.width() * f.height() * 4) as usize);
        assert_eq!(f.bbox().len(), 4);
    }

    #[test]
    fn schedule_curve_endpoints() {
        let c = one_cycle_curve(100, 1e-2).unwrap();
        assert_eq!(c.len(), 101);
        assert_eq!(c[0], 1e-2 / 25.0);
        assert_eq!(c[100], 1e-2 / 1e4);
    }

    #[test]
    fn no_drop_oracle_is_perfect() {
        let c = drop_success_curve(1, 50, 0).unwrap();
        assert_eq!(c.len(), CURVE_POINTS + 1);
        assert_eq!(c[50], 1.0);
        assert_eq!(c[CURVE_POINTS], 1.0);
        let d = drop_success_curve(1, 50, 2).unwrap();
        assert_eq!(d[CURVE_POINTS], 2.0);
        assert!(d[90] <= c[90]);
    }
}
