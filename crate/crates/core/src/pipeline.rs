//! Online tracking loop: search-region cropping, sparse exemplar refresh,
//! frame dropping and per-stage timing.

use std::io::Write;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::buffer::{is_refresh_frame, ExemplarBuffer, DEFAULT_BETA_MAX, DEFAULT_XI};
use crate::error::{Error, Result};
use crate::head::Prediction;
use crate::model::TrackerModel;
use crate::tensor::Tensor;

/// Whether frame `frame_index` is skipped under dropping interval `eta`
/// (`None` never drops).
pub fn should_drop(frame_index: usize, eta: Option<usize>) -> Result<bool> {
    match eta {
        None => Ok(false),
        Some(e) if e < 2 => Err(Error::config("eta", format!("{e} would drop every frame; use at least 2"))),
        Some(e) => Ok(frame_index % e == 0),
    }
}

/// `η/(η−1)`; the no-drop sentinel gives 1.
pub fn speedup_factor(eta: Option<usize>) -> Result<f64> {
    match eta {
        None => Ok(1.0),
        Some(e) if e < 2 => Err(Error::config("eta", format!("{e} is below 2"))),
        Some(e) => Ok(e as f64 / (e as f64 - 1.0)),
    }
}

/// A frame converted to planar `f32` with per-channel means.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedFrame {
    pub width: usize,
    pub height: usize,
    /// `3 × height × width`, channel-major, intensity units.
    pub planes: Vec<f32>,
    pub mean: [f32; 3],
}

impl DecodedFrame {
    pub fn from_image(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let n = w * h;
        let mut planes = vec![0.0f32; 3 * n];
        let mut sums = [0.0f64; 3];
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                let v = p.0[c] as f32;
                planes[c * n + i] = v;
                sums[c] += v as f64;
            }
        }
        let mean = sums.map(|s| (s / n as f64) as f32);
        Self {
            width: w,
            height: h,
            planes,
            mean,
        }
    }

    pub fn bounds(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width as f64, self.height as f64)
    }
}

/// Bilinear resampling of `region` (frame pixels, may extend past the
/// borders) to `3 × out.0 × out.1`, in intensity units. Taps outside the
/// frame read the per-channel frame mean.
pub fn crop_resize(frame: &DecodedFrame, region: &BBox, out: (usize, usize)) -> Result<Tensor<f32>> {
    let (oh, ow) = out;
    if oh == 0 || ow == 0 {
        return Err(Error::invalid("crop_resize: output size must be positive"));
    }
    if !(region.is_finite() && region.w > 0.0 && region.h > 0.0)
        || region.intersection(&frame.bounds()) <= 0.0
    {
        return Err(Error::invalid(format!(
            "crop_resize: region {region:?} is empty after clamping to {}×{}",
            frame.width, frame.height
        )));
    }
    let (w, h) = (frame.width as isize, frame.height as isize);
    let axis = |start: f64, len: f64, n: usize, limit: isize| -> Vec<(isize, isize, f32)> {
        let scale = len / n as f64;
        (0..n)
            .map(|j| {
                let u = start + (j as f64 + 0.5) * scale - 0.5;
                let lo = u.floor();
                let frac = (u - lo) as f32;
                let lo = lo as isize;
                let valid = |i: isize| if (0..limit).contains(&i) { i } else { -1 };
                (valid(lo), valid(lo + 1), frac)
            })
            .collect()
    };
    let xs = axis(region.x, region.w, ow, w);
    let ys = axis(region.y, region.h, oh, h);
    let plane = frame.width * frame.height;
    let mut data = Vec::with_capacity(3 * oh * ow);
    for c in 0..3 {
        let src = &frame.planes[c * plane..(c + 1) * plane];
        let mean = frame.mean[c];
        let at = |y: isize, x: isize| -> f32 {
            if y < 0 || x < 0 {
                mean
            } else {
                src[y as usize * frame.width + x as usize]
            }
        };
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![3, oh, ow], data)
}

/// Maps intensities to the model's input range, `(v/255 − 0.5)/0.25`.
pub fn normalize_input(t: &mut Tensor<f32>) {
    for v in t.data_mut() {
        *v = (*v / 255.0 - 0.5) / 0.25;
    }
}

/// Square search region of side `scale · max(w, h)` centred on `b`.
pub fn search_region(b: &BBox, scale: f64) -> BBox {
    let (cx, cy) = b.center();
    let side = scale * b.max_side();
    BBox::from_center(cx, cy, side, side)
}

/// Exemplar region for a search scale: half the search side, so exemplar and
/// scene crops share a pixel scale when the exemplar input is half the scene
/// input.
pub fn exemplar_region(b: &BBox, search_scale: f64) -> BBox {
    search_region(b, search_scale / 2.0)
}

/// Normalized `(cx, cy, w, h)` of `b` relative to `region`.
pub fn normalize_box(b: &BBox, region: &BBox) -> [f64; 4] {
    let (cx, cy) = b.center();
    [
        (cx - region.x) / region.w,
        (cy - region.y) / region.h,
        b.w / region.w,
        b.h / region.h,
    ]
}

pub fn denormalize_box(v: [f64; 4], region: &BBox) -> BBox {
    BBox::from_center(
        region.x + v[0] * region.w,
        region.y + v[1] * region.h,
        v[2] * region.w,
        v[3] * region.h,
    )
}

/// Crop + normalize into a `1×3×H×W` model input.
pub fn model_input(frame: &DecodedFrame, region: &BBox, size: (usize, usize)) -> Result<Tensor<f32>> {
    let mut t = crop_resize(frame, region, size)?;
    normalize_input(&mut t);
    t.reshape(vec![1, 3, size.0, size.1])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshSource {
    /// The tracker's own prediction, gated by objectness.
    Predicted,
    /// The annotation passed to [`Tracker::step`].
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub beta_max: usize,
    pub xi: usize,
    /// Frame-dropping interval; `None` processes every frame.
    pub eta: Option<usize>,
    pub search_scale: f64,
    /// Search-region growth per consecutive absent frame, and its cap.
    pub absent_growth: f64,
    pub max_growth: f64,
    pub objectness_gate: f64,
    pub refresh_source: RefreshSource,
    /// On refresh frames only featurize the exemplar and hold the box.
    pub refresh_drops_scene: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            beta_max: DEFAULT_BETA_MAX,
            xi: DEFAULT_XI,
            eta: None,
            search_scale: 2.0,
            absent_growth: 1.25,
            max_growth: 4.0,
            objectness_gate: 0.5,
            refresh_source: RefreshSource::Predicted,
            refresh_drops_scene: false,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        should_drop(1, self.eta)?;
        if self.beta_max < 1 {
            return Err(Error::config("beta_max", "must be at least 1"));
        }
        if self.xi < 1 {
            return Err(Error::config("xi", "must be at least 1"));
        }
        if !(self.search_scale > 0.0) {
            return Err(Error::config("search_scale", "must be positive"));
        }
        if !(self.absent_growth >= 1.0 && self.max_growth >= 1.0) {
            return Err(Error::config("absent_growth", "growth factors must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.objectness_gate) {
            return Err(Error::config("objectness_gate", "must be a probability"));
        }
        Ok(())
    }
}

pub const STAGES: [&str; 6] = [
    "decode",
    "crop_resize",
    "scene_forward",
    "exemplar_forward",
    "head",
    "bookkeeping",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub decode: u64,
    pub crop_resize: u64,
    pub scene_forward: u64,
    pub exemplar_forward: u64,
    pub head: u64,
    pub bookkeeping: u64,
    /// Wall time of the whole step.
    pub total: u64,
}

impl StageTimings {
    pub fn stages(&self) -> [u64; 6] {
        [
            self.decode,
            self.crop_resize,
            self.scene_forward,
            self.exemplar_forward,
            self.head,
            self.bookkeeping,
        ]
    }
}

struct Stopwatch(Instant);

impl Stopwatch {
    fn start() -> Self {
        Self(Instant::now())
    }

    fn lap(&mut self) -> u64 {
        let now = Instant::now();
        let ns = now.duration_since(self.0).as_nanos() as u64;
        self.0 = now;
        ns
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub scene_forwards: usize,
    pub exemplar_forwards: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub frame_index: usize,
    pub bbox: BBox,
    pub objectness: f64,
    pub dropped: bool,
    /// An exemplar was featurized and pushed this frame.
    pub refreshed: bool,
    pub timings: StageTimings,
}

/// One trace line. Field order is part of the format:
/// `frame_index, dropped, bbox, objectness, refresh, refresh_source,
/// buffer_frames, injected_mask, timings_ns`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub frame_index: usize,
    pub dropped: bool,
    pub bbox: [f64; 4],
    pub objectness: f64,
    pub refresh: bool,
    pub refresh_source: Option<RefreshSource>,
    pub buffer_frames: Vec<usize>,
    pub injected_mask: Vec<bool>,
    pub timings_ns: StageTimings,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerState {
    pub current_bbox: BBox,
    pub buffer: ExemplarBuffer<f32>,
    pub frame_index: usize,
    pub last_objectness: f64,
    /// Current multiplier on `search_scale` (grows while the target is
    /// reported absent).
    pub growth: f64,
    frame_dims: (usize, usize),
}

pub struct Tracker<'m> {
    model: &'m TrackerModel<f32>,
    config: TrackerConfig,
    state: TrackerState,
    counts: CallCounts,
}

impl<'m> Tracker<'m> {
    /// Featurizes the initial exemplar and fills the buffer with it. This is
    /// the only place ground truth is required.
    pub fn init(
        model: &'m TrackerModel<f32>,
        frame: &RgbImage,
        gt_bbox: &BBox,
        config: TrackerConfig,
    ) -> Result<Self> {
        config.validate()?;
        if config.beta_max != model.beta_max() {
            return Err(Error::config(
                "beta_max",
                format!("model was built for {} slots, not {}", model.beta_max(), config.beta_max),
            ));
        }
        let dims = (frame.width() as usize, frame.height() as usize);
        let clamped = gt_bbox.clamp_to(dims.0, dims.1);
        if !(gt_bbox.is_finite() && gt_bbox.area() > 0.0 && clamped.intersection(gt_bbox) > 0.0) {
            return Err(Error::invalid(format!("degenerate initial box {gt_bbox:?}")));
        }
        let decoded = DecodedFrame::from_image(frame);
        let input = model_input(
            &decoded,
            &exemplar_region(&clamped, config.search_scale),
            model.exemplar_size(),
        )?;
        let features = model.featurize(&input)?;
        let buffer = ExemplarBuffer::init(features, config.beta_max, config.xi)?;
        Ok(Self {
            model,
            config,
            state: TrackerState {
                current_bbox: clamped,
                buffer,
                frame_index: 0,
                last_objectness: 1.0,
                growth: 1.0,
                frame_dims: dims,
            },
            counts: CallCounts {
                scene_forwards: 0,
                exemplar_forwards: 1,
            },
        })
    }

    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn counts(&self) -> CallCounts {
        self.counts
    }

    /// Pins distractor features at buffer positions for the rest of the run.
    pub fn inject_distractors(&mut self, slots: &[usize], features: &[Tensor<f32>]) -> Result<()> {
        self.state.buffer.inject_distractor(slots, features)
    }

    fn featurize_exemplar(&mut self, frame: &DecodedFrame, b: &BBox, t: &mut StageTimings, sw: &mut Stopwatch) -> Result<Tensor<f32>> {
        let input = model_input(
            frame,
            &exemplar_region(b, self.config.search_scale),
            self.model.exemplar_size(),
        )?;
        t.crop_resize += sw.lap();
        let f = self.model.featurize(&input)?;
        self.counts.exemplar_forwards += 1;
        t.exemplar_forward += sw.lap();
        Ok(f)
    }

    /// Advances one frame. `reference` is consulted only when refreshing from
    /// ground truth.
    pub fn step(&mut self, frame: &RgbImage, reference: Option<&BBox>) -> Result<TrackResult> {
        let started = Instant::now();
        let mut sw = Stopwatch::start();
        let dims = (frame.width() as usize, frame.height() as usize);
        if dims != self.state.frame_dims {
            return Err(Error::invalid(format!(
                "frame is {}×{} but the tracker was initialized on {}×{}",
                dims.0, dims.1, self.state.frame_dims.0, self.state.frame_dims.1
            )));
        }
        self.state.frame_index += 1;
        let idx = self.state.frame_index;
        let mut t = StageTimings::default();
        let dropped = should_drop(idx, self.config.eta)?;
        let mut refreshed = false;
        if !dropped {
            let decoded = DecodedFrame::from_image(frame);
            t.decode += sw.lap();
            let refresh = is_refresh_frame(idx, self.config.xi);
            if !(refresh && self.config.refresh_drops_scene) {
                self.track(&decoded, &mut t, &mut sw)?;
            }
            if refresh {
                let source = match self.config.refresh_source {
                    RefreshSource::Predicted => (self.state.last_objectness
                        >= self.config.objectness_gate)
                        .then_some(self.state.current_bbox),
                    RefreshSource::GroundTruth => reference.copied(),
                };
                if let Some(b) = source {
                    let b = b.clamp_to(dims.0, dims.1);
                    let f = self.featurize_exemplar(&decoded, &b, &mut t, &mut sw)?;
                    self.state.buffer.push(f, idx)?;
                    refreshed = true;
                }
            }
        }
        let mut result = TrackResult {
            frame_index: idx,
            bbox: self.state.current_bbox,
            objectness: self.state.last_objectness,
            dropped,
            refreshed,
            timings: t,
        };
        result.timings.bookkeeping = sw.lap();
        result.timings.total = started.elapsed().as_nanos() as u64;
        Ok(result)
    }

    fn track(&mut self, frame: &DecodedFrame, t: &mut StageTimings, sw: &mut Stopwatch) -> Result<()> {
        let scale = self.config.search_scale * self.state.growth;
        let region = search_region(&self.state.current_bbox, scale);
        let input = model_input(frame, &region, self.model.scene_size())?;
        t.crop_resize += sw.lap();
        let scene = self.model.featurize(&input)?;
        self.counts.scene_forwards += 1;
        t.scene_forward += sw.lap();
        let stack = self.state.buffer.as_stack();
        let pred: Prediction = self.model.predict(&scene, &stack)?[0];
        t.head += sw.lap();
        let objectness = pred.objectness();
        self.state.last_objectness = objectness;
        if objectness >= self.config.objectness_gate {
            let b = denormalize_box(pred.bbox, &region);
            if b.is_finite() && b.area() > 0.0 {
                self.state.current_bbox = b.clamp_to(frame.width, frame.height);
            }
            self.state.growth = 1.0;
        } else {
            self.state.growth = (self.state.growth * self.config.absent_growth).min(self.config.max_growth);
        }
        Ok(())
    }

    pub fn trace_record(&self, r: &TrackResult) -> TraceRecord {
        TraceRecord {
            frame_index: r.frame_index,
            dropped: r.dropped,
            bbox: [r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h],
            objectness: r.objectness,
            refresh: r.refreshed,
            refresh_source: r.refreshed.then_some(self.config.refresh_source),
            buffer_frames: self.state.buffer.frame_indices(),
            injected_mask: self.state.buffer.injected_mask(),
            timings_ns: r.timings,
        }
    }
}

/// Output of [`track_sequence`]. `results[k]` is frame `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackRun {
    pub results: Vec<TrackResult>,
    pub trace: Vec<TraceRecord>,
    pub counts: CallCounts,
    pub init_ns: u64,
}

impl TrackRun {
    pub fn write_trace(&self, mut w: impl Write) -> Result<()> {
        for r in &self.trace {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Optional distractor features pinned at init.
pub struct Injection<'a> {
    pub slots: &'a [usize],
    pub features: &'a [Tensor<f32>],
}

/// Tracks a whole sequence from its first annotation.
pub fn track_sequence(
    model: &TrackerModel<f32>,
    frames: &[RgbImage],
    annotations: &[crate::synth::Annotation],
    config: &TrackerConfig,
    injection: Option<Injection<'_>>,
) -> Result<TrackRun> {
    if frames.is_empty() || frames.len() != annotations.len() {
        return Err(Error::invalid(format!(
            "{} frames but {} annotations",
            frames.len(),
            annotations.len()
        )));
    }
    let started = Instant::now();
    let mut tracker = Tracker::init(model, &frames[0], &annotations[0].bbox, config.clone())?;
    if let Some(inj) = injection {
        tracker.inject_distractors(inj.slots, inj.features)?;
    }
    let init_ns = started.elapsed().as_nanos() as u64;
    let mut results = Vec::with_capacity(frames.len() - 1);
    let mut trace = Vec::with_capacity(frames.len() - 1);
    for (frame, ann) in frames.iter().zip(annotations).skip(1) {
        let r = tracker.step(frame, Some(&ann.bbox))?;
        trace.push(tracker.trace_record(&r));
        results.push(r);
    }
    Ok(TrackRun {
        results,
        trace,
        counts: tracker.counts(),
        init_ns,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageShare {
    pub stage: String,
    pub total_ns: u64,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileReport {
    /// Instrumented stages followed by `other`.
    pub stages: Vec<StageShare>,
    pub total_ns: u64,
    pub frames: usize,
    /// Frames per second over the frame loop, excluding initialization.
    pub fps: f64,
    pub dominant: String,
}

pub fn profile_report(results: &[TrackResult]) -> ProfileReport {
    let mut sums = [0u64; 6];
    let mut total = 0u64;
    for r in results {
        for (s, v) in sums.iter_mut().zip(r.timings.stages()) {
            *s += v;
        }
        total += r.timings.total;
    }
    let instrumented: u64 = sums.iter().sum();
    let other = total.saturating_sub(instrumented);
    let denom = total.max(instrumented).max(1) as f64;
    let stages: Vec<StageShare> = STAGES
        .iter()
        .zip(sums)
        .map(|(n, v)| (n.to_string(), v))
        .chain(std::iter::once(("other".to_string(), other)))
        .map(|(stage, total_ns)| StageShare {
            percent: 100.0 * total_ns as f64 / denom,
            stage,
            total_ns,
        })
        .collect();
    let dominant = stages
        .iter()
        .max_by_key(|s| s.total_ns)
        .map(|s| s.stage.clone())
        .unwrap_or_default();
    ProfileReport {
        stages,
        total_ns: total,
        frames: results.len(),
        fps: if total == 0 {
            0.0
        } else {
            results.len() as f64 / (total as f64 * 1e-9)
        },
        dominant,
    }
}

impl ProfileReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<18}{:>14}{:>10}\n", "stage", "total_ms", "percent");
        for st in &self.stages {
            s.push_str(&format!(
                "{:<18}{:>14.3}{:>9.2}%\n",
                st.stage,
                st.total_ns as f64 / 1e6,
                st.percent
            ));
        }
        s.push_str(&format!(
            "frames {}  fps {:.1}  dominant stage: {}\n",
            self.frames, self.fps, self.dominant
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn drop_schedule() {
        let dropped: Vec<usize> = (1..=9).filter(|&i| should_drop(i, Some(3)).unwrap()).collect();
        assert_eq!(dropped, [3, 6, 9]);
        assert!(!should_drop(4, None).unwrap());
        assert!(should_drop(1, Some(1)).is_err());
        assert_eq!(speedup_factor(Some(2)).unwrap(), 2.0);
        assert_eq!(speedup_factor(None).unwrap(), 1.0);
        assert!(speedup_factor(Some(0)).is_err());
    }

    #[test]
    fn checkerboard_downsample() {
        let img = RgbImage::from_fn(4, 4, |x, y| {
            let v = if (x + y) % 2 == 0 { 255 } else { 0 };
            Rgb([v, v, 0])
        });
        let f = DecodedFrame::from_image(&img);
        let out = crop_resize(&f, &f.bounds(), (2, 2)).unwrap();
        assert_eq!(&out.data()[..4], &[127.5; 4]);
        assert_eq!(&out.data()[8..], &[0.0; 4]);
    }

    #[test]
    fn full_frame_identity() {
        let img = RgbImage::from_fn(5, 3, |x, y| Rgb([(x * 40) as u8, (y * 70) as u8, 9]));
        let f = DecodedFrame::from_image(&img);
        let out = crop_resize(&f, &f.bounds(), (3, 5)).unwrap();
        assert_eq!(out.data(), f.planes.as_slice());
    }

    #[test]
    fn box_normalization_round_trips() {
        let region = BBox::new(-4.0, 10.0, 40.0, 40.0);
        let b = BBox::new(3.0, 12.0, 10.0, 20.0);
        let back = denormalize_box(normalize_box(&b, &region), &region);
        assert!((back.x - b.x).abs() < 1e-12 && (back.h - b.h).abs() < 1e-12);
    }

    #[test]
    fn empty_region_rejected() {
        let f = DecodedFrame::from_image(&RgbImage::new(4, 4));
        assert!(crop_resize(&f, &BBox::new(10.0, 10.0, 2.0, 2.0), (2, 2)).is_err());
        assert!(crop_resize(&f, &BBox::new(1.0, 1.0, 0.0, 2.0), (2, 2)).is_err());
    }
}
