//! Deterministic synthetic tracking sequences and their on-disk layout.
//!
//! A sequence shows one target shape moving over a panning textured
//! background, optionally with look-alike distractors, occluders, absence
//! spans, size/aspect deformation and per-frame pixel noise.
//!
//! Directory layout written by [`write_dataset`]:
//!
//! ```text
//! <root>/seq_<id>/frames/000000.ppm, 000001.ppm, ...
//! <root>/seq_<id>/groundtruth.txt   one line per frame: frame,x,y,w,h,present
//! <root>/seq_<id>/spec.json         generator parameters
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Ellipse,
    Cross,
    Ring,
}

pub const SHAPE_KINDS: [ShapeKind; 4] = [
    ShapeKind::Rect,
    ShapeKind::Ellipse,
    ShapeKind::Cross,
    ShapeKind::Ring,
];

impl ShapeKind {
    /// Whether the pixel centred at `(px, py)` is covered by a shape filling
    /// `b`.
    fn covers(self, b: &BBox, px: f64, py: f64) -> bool {
        let (cx, cy) = b.center();
        let (dx, dy) = ((px - cx).abs(), (py - cy).abs());
        match self {
            ShapeKind::Rect => true,
            ShapeKind::Ellipse => {
                let (rx, ry) = (b.w / 2.0, b.h / 2.0);
                (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0
            }
            ShapeKind::Cross => dx <= b.w / 6.0 || dy <= b.h / 6.0,
            ShapeKind::Ring => {
                let t = (b.w.min(b.h) / 5.0).max(2.0);
                !(dx < b.w / 2.0 - t && dy < b.h / 2.0 - t)
            }
        }
    }
}

/// Trajectory and size model shared by targets and distractors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    /// Initial centre `(x, y)` in pixels.
    pub center: (f64, f64),
    /// Initial `(w, h)` in pixels.
    pub size: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// Sinusoidal jitter amplitude in pixels and its period in frames.
    pub jitter: f64,
    pub jitter_period: f64,
    /// Relative size/aspect oscillation amplitude and its period in frames.
    pub deform: f64,
    pub deform_period: f64,
}

/// Position `x` folded into `[lo, hi]` by reflection at both ends.
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let span = hi - lo;
    let m = (x - lo).rem_euclid(2.0 * span);
    lo + if m <= span { m } else { 2.0 * span - m }
}

impl Motion {
    /// Integer-aligned box at frame `t`, inside a `width × height` frame.
    pub fn box_at(&self, t: usize, width: usize, height: usize) -> BBox {
        let t = t as f64;
        let s = self.deform * (2.0 * PI * t / self.deform_period).sin();
        let w = (self.size.0 * (1.0 + s)).round().clamp(2.0, width as f64);
        let h = (self.size.1 * (1.0 - 0.5 * s)).round().clamp(2.0, height as f64);
        let phase = 2.0 * PI * t / self.jitter_period;
        let cx = self.center.0 + self.velocity.0 * t + self.jitter * phase.sin();
        let cy = self.center.1 + self.velocity.1 * t + self.jitter * (0.77 * phase).cos();
        let cx = reflect(cx, w / 2.0, width as f64 - w / 2.0);
        let cy = reflect(cy, h / 2.0, height as f64 - h / 2.0);
        let x = (cx - w / 2.0).round().clamp(0.0, width as f64 - w);
        let y = (cy - h / 2.0).round().clamp(0.0, height as f64 - h);
        BBox::new(x, y, w, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub kind: ShapeKind,
    pub color: [u8; 3],
    /// Colour of the horizontal band through the middle of the shape.
    pub stripe: [u8; 3],
    pub motion: Motion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub duration: usize,
}

impl Span {
    pub fn contains(&self, t: usize) -> bool {
        t >= self.start && t < self.start + self.duration
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub span: Span,
    /// Fraction of the target width hidden, from its left edge. From
    /// [`Occluder::FULL`] on the target is hidden completely.
    pub coverage: f64,
    pub color: [u8; 3],
}

impl Occluder {
    /// Coverage at which the cover spans the whole target. Below 1 because a
    /// thin uncovered sliver of a rounded shape may contain no pixel centre.
    pub const FULL: f64 = 0.9;

    pub fn hides_target(&self) -> bool {
        self.coverage >= Self::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [u8; 3],
    /// Texture amplitude in intensity units.
    pub amplitude: f64,
    /// Spatial frequencies (radians per pixel) and phases.
    pub freq: (f64, f64),
    pub phase: (f64, f64),
    /// Camera pan in pixels per frame.
    pub pan: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub length: usize,
    /// `(height, width)` in pixels.
    pub frame_size: (usize, usize),
    pub target: ObjectSpec,
    pub distractors: Vec<ObjectSpec>,
    pub occluders: Vec<Occluder>,
    pub absence_spans: Vec<Span>,
    pub background: Background,
    /// Uniform per-channel noise amplitude.
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub frame_index: usize,
    pub bbox: BBox,
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<RgbImage>,
    pub annotations: Vec<Annotation>,
    /// Generator parameters when known (always for generated sequences).
    pub spec: Option<SequenceSpec>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(width, height)` of the frames.
    pub fn frame_dims(&self) -> (usize, usize) {
        let (w, h) = self.frames[0].dimensions();
        (w as usize, h as usize)
    }

    /// Boxes of the distractor objects at frame `t`, if the spec is known.
    pub fn distractor_boxes(&self, t: usize) -> Vec<BBox> {
        self.spec
            .as_ref()
            .map(|s| s.distractor_boxes(t))
            .unwrap_or_default()
    }
}

/// Knobs for [`SequenceSpec::random`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenOptions {
    pub length: usize,
    pub frame_size: (usize, usize),
    pub min_size: f64,
    pub max_size: f64,
    pub max_speed: f64,
    pub max_distractors: usize,
    /// Probability that a distractor copies the target's kind and colours.
    pub same_kind_prob: f64,
    pub occlusion_prob: f64,
    pub absence_prob: f64,
    pub noise: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            length: 100,
            frame_size: (128, 128),
            min_size: 20.0,
            max_size: 36.0,
            max_speed: 1.5,
            max_distractors: 2,
            same_kind_prob: 0.3,
            occlusion_prob: 0.3,
            absence_prob: 0.25,
            noise: 6.0,
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    // Saturated colours: one channel high, one low, one anywhere.
    let mut c = [rng.random_range(200..=255u8), rng.random_range(0..=60u8), rng.random::<u8>()];
    let r = rng.random_range(0..3);
    c.rotate_left(r);
    c
}

fn random_object(rng: &mut ChaCha8Rng, o: &GenOptions) -> ObjectSpec {
    let (fh, fw) = (o.frame_size.0 as f64, o.frame_size.1 as f64);
    let size = (
        rng.random_range(o.min_size..=o.max_size),
        rng.random_range(o.min_size..=o.max_size),
    );
    let angle = rng.random_range(0.0..2.0 * PI);
    let speed = rng.random_range(0.0..=o.max_speed);
    ObjectSpec {
        kind: SHAPE_KINDS[rng.random_range(0..SHAPE_KINDS.len())],
        color: random_color(rng),
        stripe: random_color(rng),
        motion: Motion {
            center: (
                rng.random_range(size.0 / 2.0..fw - size.0 / 2.0),
                rng.random_range(size.1 / 2.0..fh - size.1 / 2.0),
            ),
            size,
            velocity: (speed * angle.cos(), speed * angle.sin()),
            jitter: rng.random_range(0.0..3.0),
            jitter_period: rng.random_range(15.0..40.0),
            deform: rng.random_range(0.0..0.2),
            deform_period: rng.random_range(30.0..80.0),
        },
    }
}

fn random_span(rng: &mut ChaCha8Rng, length: usize) -> Span {
    let duration = rng.random_range(4..=8).min(length / 4).max(1);
    let start = rng.random_range(length / 4..(3 * length / 4).max(length / 4 + 1));
    Span {
        start,
        duration: duration.min(length - start),
    }
}

impl SequenceSpec {
    /// A random but fully seeded specification.
    pub fn random(seed: u64, options: &GenOptions) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = random_object(&mut rng, options);
        let n_distractors = rng.random_range(0..=options.max_distractors);
        let distractors = (0..n_distractors)
            .map(|_| {
                let mut d = random_object(&mut rng, options);
                if rng.random_bool(options.same_kind_prob) {
                    d.kind = target.kind;
                    d.color = target.color;
                    d.stripe = target.stripe;
                }
                d
            })
            .collect();
        let occluders = if rng.random_bool(options.occlusion_prob) {
            vec![Occluder {
                span: random_span(&mut rng, options.length),
                coverage: rng.random_range(0.4..1.3),
                color: [rng.random_range(90..160); 3],
            }]
        } else {
            Vec::new()
        };
        let absence_spans = if rng.random_bool(options.absence_prob) {
            vec![random_span(&mut rng, options.length)]
        } else {
            Vec::new()
        };
        let background = Background {
            base: [
                rng.random_range(40..200),
                rng.random_range(40..200),
                rng.random_range(40..200),
            ],
            amplitude: rng.random_range(10.0..40.0),
            freq: (rng.random_range(0.04..0.2), rng.random_range(0.04..0.2)),
            phase: (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)),
            pan: (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
        };
        Self {
            length: options.length,
            frame_size: options.frame_size,
            target,
            distractors,
            occluders,
            absence_spans,
            background,
            noise: options.noise,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.frame_size;
        if self.length == 0 {
            return Err(Error::config("length", "must be at least 1"));
        }
        if h < 4 || w < 4 {
            return Err(Error::config("frame_size", "must be at least 4×4"));
        }
        for (field, obj) in std::iter::once(("target", &self.target))
            .chain(self.distractors.iter().map(|d| ("distractors", d)))
        {
            let m = &obj.motion;
            if !(m.size.0 >= 2.0 && m.size.1 >= 2.0) || m.size.0 > w as f64 || m.size.1 > h as f64 {
                return Err(Error::config(field, format!("size {:?} does not fit the frame", m.size)));
            }
            if !(m.jitter_period > 0.0 && m.deform_period > 0.0) {
                return Err(Error::config(field, "periods must be positive"));
            }
            if !(0.0..0.5).contains(&m.deform) {
                return Err(Error::config(field, "deform must be in [0, 0.5)"));
            }
        }
        let in_range = |s: &Span| s.duration > 0 && s.start + s.duration <= self.length;
        if !self.absence_spans.iter().all(in_range) {
            return Err(Error::config("absence_spans", "span outside the sequence"));
        }
        if !self.occluders.iter().all(|o| in_range(&o.span) && o.coverage > 0.0) {
            return Err(Error::config("occluders", "span outside the sequence or empty coverage"));
        }
        if self.noise < 0.0 {
            return Err(Error::config("noise", "must be non-negative"));
        }
        Ok(())
    }

    pub fn target_box(&self, t: usize) -> BBox {
        self.target
            .motion
            .box_at(t, self.frame_size.1, self.frame_size.0)
    }

    pub fn distractor_boxes(&self, t: usize) -> Vec<BBox> {
        self.distractors
            .iter()
            .map(|d| d.motion.box_at(t, self.frame_size.1, self.frame_size.0))
            .collect()
    }

    fn occluder_at(&self, t: usize) -> Option<&Occluder> {
        self.occluders.iter().find(|o| o.span.contains(t))
    }

    pub fn is_absent(&self, t: usize) -> bool {
        self.absence_spans.iter().any(|s| s.contains(t))
    }

    pub fn is_present(&self, t: usize) -> bool {
        !self.is_absent(t) && self.occluder_at(t).is_none_or(|o| !o.hides_target())
    }

    pub fn annotation(&self, t: usize) -> Annotation {
        Annotation {
            frame_index: t,
            bbox: self.target_box(t),
            present: self.is_present(t),
        }
    }

    /// Renders frame `t` and the mask of visible target pixels.
    pub fn render(&self, t: usize) -> (RgbImage, Vec<bool>) {
        let (h, w) = self.frame_size;
        let bg = &self.background;
        let (ox, oy) = (bg.pan.0 * t as f64, bg.pan.1 * t as f64);
        let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let v = bg.amplitude
                * (bg.freq.0 * (x as f64 + ox) + bg.phase.0).sin()
                * (bg.freq.1 * (y as f64 + oy) + bg.phase.1).sin();
            Rgb(bg.base.map(|c| (c as f64 + v).clamp(0.0, 255.0) as u8))
        });
        for d in &self.distractors {
            let b = d.motion.box_at(t, w, h);
            draw_object(&mut img, d, &b, None);
        }
        let mut mask = vec![false; w * h];
        if !self.is_absent(t) {
            let b = self.target_box(t);
            draw_object(&mut img, &self.target, &b, Some(&mut mask));
            if let Some(o) = self.occluder_at(t) {
                let full = o.hides_target();
                let margin = if full { 2.0 } else { 0.0 };
                let cover = BBox::new(
                    b.x - margin,
                    b.y - 2.0,
                    if full { b.w } else { b.w * o.coverage } + 2.0 * margin,
                    b.h + 4.0,
                );
                fill_box(&mut img, &cover, o.color, &mut mask);
            }
        }
        if self.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            for p in img.pixels_mut() {
                for c in p.0.iter_mut() {
                    let n = rng.random_range(-self.noise..=self.noise);
                    *c = (*c as f64 + n).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        (img, mask)
    }

    pub fn generate(&self, name: impl Into<String>) -> Result<Sequence> {
        self.validate()?;
        let (frames, annotations) = (0..self.length)
            .map(|t| (self.render(t).0, self.annotation(t)))
            .unzip();
        Ok(Sequence {
            name: name.into(),
            frames,
            annotations,
            spec: Some(self.clone()),
        })
    }
}

/// Pixel rows/columns whose centres fall inside `b`, clipped to the image.
fn pixel_range(lo: f64, len: f64, limit: u32) -> std::ops::Range<u32> {
    let a = (lo - 0.5).ceil().max(0.0) as u32;
    let b = ((lo + len - 0.5).ceil().max(0.0) as u32).min(limit);
    a..b.max(a)
}

fn draw_object(img: &mut RgbImage, obj: &ObjectSpec, b: &BBox, mut mask: Option<&mut Vec<bool>>) {
    let (w, h) = img.dimensions();
    let (_, cy) = b.center();
    for y in pixel_range(b.y, b.h, h) {
        for x in pixel_range(b.x, b.w, w) {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if !obj.kind.covers(b, px, py) {
                continue;
            }
            let c = if (py - cy).abs() <= b.h / 10.0 {
                obj.stripe
            } else {
                obj.color
            };
            img.put_pixel(x, y, Rgb(c));
            if let Some(m) = mask.as_deref_mut() {
                m[(y * w + x) as usize] = true;
            }
        }
    }
}

fn fill_box(img: &mut RgbImage, b: &BBox, color: [u8; 3], mask: &mut [bool]) {
    let (w, h) = img.dimensions();
    for y in pixel_range(b.y, b.h, h) {
        for x in pixel_range(b.x, b.w, w) {
            img.put_pixel(x, y, Rgb(color));
            mask[(y * w + x) as usize] = false;
        }
    }
}

/// `count` sequences named `seq_0000`, `seq_0001`, ... with seeds derived
/// from `seed`. Generation runs in parallel; results are in name order.
pub fn generate_dataset(count: usize, seed: u64, options: &GenOptions) -> Result<Vec<Sequence>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let spec = SequenceSpec::random(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), options);
            spec.generate(format!("seq_{i:04}"))
        })
        .collect()
}

fn annotation_line(a: &Annotation) -> String {
    format!(
        "{},{},{},{},{},{}",
        a.frame_index,
        a.bbox.x,
        a.bbox.y,
        a.bbox.w,
        a.bbox.h,
        u8::from(a.present)
    )
}

fn parse_annotation(path: &Path, line_no: usize, line: &str) -> Result<Annotation> {
    let err = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        reason,
    };
    let fields: Vec<&str> = line.trim().split(',').collect();
    if fields.len() != 6 {
        return Err(err(format!("expected 6 fields, found {}", fields.len())));
    }
    let frame_index = fields[0]
        .parse()
        .map_err(|_| err(format!("bad frame index `{}`", fields[0])))?;
    let mut v = [0.0; 4];
    for (slot, f) in v.iter_mut().zip(&fields[1..5]) {
        *slot = f.parse().map_err(|_| err(format!("bad number `{f}`")))?;
    }
    let present = match fields[5] {
        "1" => true,
        "0" => false,
        other => return Err(err(format!("present flag must be 0 or 1, got `{other}`"))),
    };
    let bbox = BBox::new(v[0], v[1], v[2], v[3]);
    if present && !(bbox.is_finite() && bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(err("present frame with an invalid box".into()));
    }
    Ok(Annotation {
        frame_index,
        bbox,
        present,
    })
}

pub fn write_sequence(seq: &Sequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let frames = dir.join("frames");
    fs::create_dir_all(&frames)?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.save_with_format(frames.join(format!("{i:06}.ppm")), image::ImageFormat::Pnm)?;
    }
    let mut text = String::new();
    for a in &seq.annotations {
        text.push_str(&annotation_line(a));
        text.push('\n');
    }
    fs::write(dir.join("groundtruth.txt"), text)?;
    if let Some(spec) = &seq.spec {
        let json = serde_json::to_string_pretty(spec).expect("spec serializes");
        fs::write(dir.join("spec.json"), json)?;
    }
    Ok(())
}

pub fn read_sequence(dir: impl AsRef<Path>) -> Result<Sequence> {
    let dir = dir.as_ref();
    let gt_path = dir.join("groundtruth.txt");
    let text = fs::read_to_string(&gt_path)?;
    let annotations = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_annotation(&gt_path, i + 1, l))
        .collect::<Result<Vec<_>>>()?;
    for (i, a) in annotations.iter().enumerate() {
        if a.frame_index != i {
            return Err(Error::Parse {
                path: gt_path.clone(),
                line: i + 1,
                reason: format!("frame index {} out of order (expected {i})", a.frame_index),
            });
        }
    }
    let frames = (0..annotations.len())
        .map(|i| {
            let path = dir.join("frames").join(format!("{i:06}.ppm"));
            Ok(image::open(&path)?.to_rgb8())
        })
        .collect::<Result<Vec<_>>>()?;
    let spec_path = dir.join("spec.json");
    let spec = if spec_path.exists() {
        let text = fs::read_to_string(&spec_path)?;
        Some(serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: spec_path,
            line: e.line(),
            reason: e.to_string(),
        })?)
    } else {
        None
    };
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sequence {
        name,
        frames,
        annotations,
        spec,
    })
}

pub fn write_dataset(seqs: &[Sequence], root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    seqs.par_iter()
        .map(|s| write_sequence(s, root.join(&s.name)))
        .collect()
}

/// Sequence directories under `root` (names starting with `seq_`), in
/// lexicographic order.
pub fn list_dataset(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root.as_ref())?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("seq_"))
        })
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn read_dataset(root: impl AsRef<Path>) -> Result<Vec<Sequence>> {
    list_dataset(root)?.par_iter().map(read_sequence).collect()
}
