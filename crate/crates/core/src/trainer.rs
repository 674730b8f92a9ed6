//! Sample generation and the training loop.
//!
//! Every training sample is a scene crop, the `beta_max` exemplar crops a
//! tracker would hold at that frame, the normalized target box and a presence
//! label. A configurable fraction of samples are negatives: either a crop of
//! the same frame that misses the target entirely or a crop taken from a
//! different sequence.

use std::io::Write;
use std::path::PathBuf;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::head::{loss_joint, JointLossTerms, DEFAULT_ALPHA};
use crate::model::TrackerModel;
use crate::optim::{Adam, AdamConfig, OneCycle};
use crate::pipeline::{exemplar_region, model_input, normalize_box, search_region, DecodedFrame};
use crate::synth::Sequence;
use crate::tensor::{Graph, Tensor};

/// Shift and log-scale jitter applied to the previous-frame box that centres the search region.
const PREV_BOX_JITTER: (f64, f64) = (0.25, 0.15);
/// Jitter applied to buffered exemplar boxes.
const EXEMPLAR_JITTER: (f64, f64) = (0.15, 0.15);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub cycles: usize,
    /// Samples drawn per cycle as a fraction of all annotated frames.
    pub samples_per_cycle: f64,
    /// Explicit optimizer steps per cycle; overrides `samples_per_cycle`.
    pub steps_per_cycle: Option<usize>,
    pub negative_fraction: f64,
    /// Per-slot probability of replacing a training exemplar with a
    /// distractor.
    pub distractor_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 3e-3,
            weight_decay: 1e-2,
            alpha: DEFAULT_ALPHA,
            batch_size: 32,
            cycles: 5,
            samples_per_cycle: 0.25,
            steps_per_cycle: None,
            negative_fraction: 0.30,
            distractor_prob: 0.25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_lr", self.max_lr),
            ("alpha", self.alpha),
            ("samples_per_cycle", self.samples_per_cycle),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("{v} must be positive")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.cycles == 0 {
            return Err(Error::config("cycles", "must be at least 1"));
        }
        if self.steps_per_cycle == Some(0) {
            return Err(Error::config("steps_per_cycle", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.negative_fraction) {
            return Err(Error::config("negative_fraction", "must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::config("distractor_prob", "must be a probability"));
        }
        Ok(())
    }

    pub fn steps_per_cycle(&self, dataset_frames: usize) -> usize {
        self.steps_per_cycle.unwrap_or_else(|| {
            let samples = self.samples_per_cycle * dataset_frames as f64;
            ((samples / self.batch_size as f64).ceil() as usize).max(1)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Positive,
    /// Same frame, crop disjoint from the target.
    ShiftedCrop,
    /// Crop from another sequence.
    ForeignScene,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×H×W`, normalized model input.
    pub scene: Tensor<f32>,
    /// `beta_max` crops of `3×h×w`, oldest first.
    pub exemplars: Vec<Tensor<f32>>,
    /// Normalized `(cx, cy, w, h)`; zeros for negatives.
    pub bbox: [f32; 4],
    pub y_obj: usize,
    pub kind: SampleKind,
    pub sequence: usize,
    pub frame: usize,
    /// Scene region in frame pixels of the sequence it was cropped from.
    pub region: BBox,
}

/// Stacked samples ready for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub scenes: Tensor<f32>,
    pub exemplars: Tensor<f32>,
    pub bbox: Tensor<f32>,
    pub y_obj: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let n = samples.len();
        let s = samples[0].scene.shape().to_vec();
        let e = samples[0].exemplars[0].shape().to_vec();
        let beta = samples[0].exemplars.len();
        let mut scenes = Vec::with_capacity(n * s.iter().product::<usize>());
        let mut exemplars = Vec::with_capacity(n * beta * e.iter().product::<usize>());
        let mut bbox = Vec::with_capacity(n * 4);
        for sm in samples {
            scenes.extend_from_slice(sm.scene.data());
            for x in &sm.exemplars {
                exemplars.extend_from_slice(x.data());
            }
            bbox.extend_from_slice(&sm.bbox);
        }
        Ok(Self {
            scenes: Tensor::new(vec![n, s[0], s[1], s[2]], scenes)?,
            exemplars: Tensor::new(vec![n * beta, e[0], e[1], e[2]], exemplars)?,
            bbox: Tensor::new(vec![n, 4], bbox)?,
            y_obj: samples.iter().map(|s| s.y_obj).collect(),
        })
    }
}

/// Geometry shared by sampling and tracking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub beta_max: usize,
    pub xi: usize,
    pub search_scale: f64,
    pub scene_size: (usize, usize),
    pub exemplar_size: (usize, usize),
    pub negative_fraction: f64,
    pub distractor_prob: f64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent RNG stream per `(seed, a, b)`.
pub fn stream_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed) ^ a) ^ b))
}

pub struct Sampler<'a> {
    sequences: &'a [Sequence],
    config: SamplerConfig,
    /// `(sequence, frame)` pairs usable as positives: target present on the
    /// frame and on the one before.
    positives: Vec<(usize, usize)>,
}

impl<'a> Sampler<'a> {
    pub fn new(sequences: &'a [Sequence], config: SamplerConfig) -> Result<Self> {
        let positives: Vec<(usize, usize)> = sequences
            .iter()
            .enumerate()
            .flat_map(|(s, seq)| {
                (1..seq.annotations.len())
                    .filter(move |&t| seq.annotations[t].present && seq.annotations[t - 1].present)
                    .map(move |t| (s, t))
            })
            .collect();
        if positives.is_empty() {
            return Err(Error::invalid("dataset has no frames usable for training"));
        }
        Ok(Self {
            sequences,
            config,
            positives,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn num_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    fn crop(&self, frame: &RgbImage, region: &BBox, size: (usize, usize)) -> Result<Tensor<f32>> {
        let decoded = DecodedFrame::from_image(frame);
        let t = model_input(&decoded, region, size)?;
        t.reshape(vec![3, size.0, size.1])
    }

    /// Mimics a tracker's slightly-off previous estimate.
    fn perturb(&self, b: &BBox, shift: f64, scale: f64, rng: &mut ChaCha8Rng) -> BBox {
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        let (cx, cy) = b.center();
        let m = b.max_side();
        let s = (scale * n.sample(rng)).clamp(-2.5 * scale, 2.5 * scale).exp();
        BBox::from_center(
            cx + shift * m * n.sample(rng).clamp(-2.5, 2.5),
            cy + shift * m * n.sample(rng).clamp(-2.5, 2.5),
            b.w * s,
            b.h * s,
        )
    }

    /// Search-scale multiplier: mostly 1, occasionally widened as after
    /// reported absences.
    fn growth(&self, rng: &mut ChaCha8Rng) -> f64 {
        if rng.random_bool(0.15) {
            rng.random_range(1.0..4.0)
        } else {
            1.0
        }
    }

    fn distractor_exemplar(&self, own: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
        let s = self.other_sequence(own, rng);
        let seq = &self.sequences[s];
        let t = rng.random_range(0..seq.len());
        let boxes = seq.distractor_boxes(t);
        let target = seq.annotations[t].bbox;
        let (w, h) = seq.frame_dims();
        let b = if !boxes.is_empty() {
            boxes[rng.random_range(0..boxes.len())]
        } else {
            let side = target.max_side();
            let mut b = target;
            for _ in 0..20 {
                b = BBox::new(
                    rng.random_range(0.0..(w as f64 - side).max(1.0)),
                    rng.random_range(0.0..(h as f64 - side).max(1.0)),
                    side,
                    side,
                );
                if b.intersection(&target) == 0.0 {
                    break;
                }
            }
            b
        };
        self.crop(
            &seq.frames[t],
            &exemplar_region(&b, self.config.search_scale),
            self.config.exemplar_size,
        )
    }

    fn other_sequence(&self, own: usize, rng: &mut ChaCha8Rng) -> usize {
        let n = self.sequences.len();
        if n == 1 {
            return own;
        }
        let k = rng.random_range(0..n - 1);
        if k >= own {
            k + 1
        } else {
            k
        }
    }

    /// Exemplar crops a tracker would hold at frame `t`: refresh frames
    /// spaced `xi` apart ending at the latest one before `t`, falling back to
    /// the nearest earlier frame with the target present.
    fn exemplars(&self, s: usize, t: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f32>>> {
        let seq = &self.sequences[s];
        let xi = self.config.xi;
        let latest = ((t.saturating_sub(1)) / xi) * xi;
        (0..self.config.beta_max)
            .map(|j| {
                if rng.random_bool(self.config.distractor_prob) {
                    return self.distractor_exemplar(s, rng);
                }
                let back = (self.config.beta_max - 1 - j) * xi;
                let mut f = latest.saturating_sub(back);
                while f > 0 && !seq.annotations[f].present {
                    f -= 1;
                }
                let b = if f == 0 {
                    seq.annotations[0].bbox
                } else {
                    self.perturb(&seq.annotations[f].bbox, EXEMPLAR_JITTER.0, EXEMPLAR_JITTER.1, rng)
                };
                self.crop(
                    &seq.frames[f],
                    &exemplar_region(&b, self.config.search_scale),
                    self.config.exemplar_size,
                )
            })
            .collect()
    }

    fn positive(&self, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let (s, t) = self.positives[rng.random_range(0..self.positives.len())];
        let seq = &self.sequences[s];
        let prev = self.perturb(&seq.annotations[t - 1].bbox, PREV_BOX_JITTER.0, PREV_BOX_JITTER.1, rng);
        let region = search_region(&prev, self.config.search_scale * self.growth(rng));
        let target = normalize_box(&seq.annotations[t].bbox, &region);
        Ok(Sample {
            scene: self.crop(&seq.frames[t], &region, self.config.scene_size)?,
            exemplars: self.exemplars(s, t, rng)?,
            bbox: target.map(|v| v as f32),
            y_obj: 1,
            kind: SampleKind::Positive,
            sequence: s,
            frame: t,
            region,
        })
    }

    /// A target-free scene: half the time a crop of the same frame disjoint
    /// from the target, otherwise (or when no disjoint crop fits) a crop of
    /// another sequence.
    pub fn make_negative_sample(&self, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let (s, t) = self.positives[rng.random_range(0..self.positives.len())];
        let seq = &self.sequences[s];
        let target = seq.annotations[t].bbox;
        let side = self.config.search_scale * self.growth(rng) * target.max_side();
        let random_region = |seq: &Sequence, rng: &mut ChaCha8Rng| {
            let (w, h) = seq.frame_dims();
            BBox::from_center(
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                side,
                side,
            )
        };
        let mut shifted = None;
        if rng.random_bool(0.5) {
            for _ in 0..20 {
                let r = random_region(seq, rng);
                if r.intersection(&target) == 0.0 {
                    shifted = Some(r);
                    break;
                }
            }
        }
        let (kind, src_seq, src_frame, region) = match shifted {
            Some(r) => (SampleKind::ShiftedCrop, s, t, r),
            None => {
                let o = self.other_sequence(s, rng);
                let other = &self.sequences[o];
                let f = rng.random_range(0..other.len());
                (SampleKind::ForeignScene, o, f, random_region(other, rng))
            }
        };
        Ok(Sample {
            scene: self.crop(
                &self.sequences[src_seq].frames[src_frame],
                &region,
                self.config.scene_size,
            )?,
            exemplars: self.exemplars(s, t, rng)?,
            bbox: [0.0; 4],
            y_obj: 0,
            kind,
            sequence: src_seq,
            frame: src_frame,
            region,
        })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Sample> {
        if rng.random_bool(self.config.negative_fraction) {
            self.make_negative_sample(rng)
        } else {
            self.positive(rng)
        }
    }

    /// Batch for optimizer step `step`; sample `i` uses its own RNG stream,
    /// so the result does not depend on thread scheduling.
    pub fn batch(&self, seed: u64, step: usize, size: usize) -> Result<Vec<Sample>> {
        (0..size)
            .into_par_iter()
            .map(|i| self.sample(&mut stream_rng(seed, step as u64, i as u64)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub l_bbox: f64,
    pub l_obj: f64,
    pub l_joint: f64,
}

pub fn write_log_csv(rows: &[LogRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "step,lr,l_bbox,l_obj,l_joint")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.step, r.lr, r.l_bbox, r.l_obj, r.l_joint)?;
    }
    Ok(())
}

/// Forward, backward and one Adam update on `batch`. Returns the loss terms
/// measured before the update.
pub fn train_step(
    model: &mut TrackerModel<f32>,
    adam: &mut Adam,
    batch: &Batch,
    alpha: f64,
    lr: f64,
    step: usize,
) -> Result<JointLossTerms> {
    let (terms, gb, gh) = {
        let g = Graph::new();
        let bb = model.backbone.params.bind(&g);
        let hp = model.head.params.bind(&g);
        let scenes = g.constant(batch.scenes.clone());
        let exemplars = g.constant(batch.exemplars.clone());
        let out = model.forward(&bb, &hp, scenes, exemplars)?;
        let loss = loss_joint(&out, &batch.bbox, &batch.y_obj, alpha)?;
        let terms = loss.terms();
        if !(terms.l_joint.is_finite() && terms.l_bbox.is_finite() && terms.l_obj.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        g.backward(loss.l_joint)?;
        (terms, bb.grads(), hp.grads())
    };
    model.backbone.params.zero_grads();
    model.head.params.zero_grads();
    model.backbone.params.accumulate_grads(gb)?;
    model.head.params.accumulate_grads(gh)?;
    adam.step(&mut [&mut model.backbone.params, &mut model.head.params], lr)?;
    Ok(terms)
}

/// Optional side outputs of [`train`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Directory receiving `cycle_<k>.ckpt` after each cycle.
    pub checkpoint_dir: Option<PathBuf>,
    pub on_step: Option<&'a mut dyn FnMut(&LogRow)>,
}

pub struct TrainOutcome {
    pub model: TrackerModel<f32>,
    pub log: Vec<LogRow>,
}

/// Runs `cycles` one-cycle schedules over freshly sampled batches. The
/// schedule restarts each cycle; `step` in the log is global.
pub fn train(
    mut model: TrackerModel<f32>,
    dataset: &[Sequence],
    sampler_config: SamplerConfig,
    config: &TrainConfig,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let sampler = Sampler::new(dataset, sampler_config)?;
    let per_cycle = config.steps_per_cycle(sampler.num_frames());
    let schedule = OneCycle::new(per_cycle, config.max_lr);
    let mut adam = Adam::new(AdamConfig {
        weight_decay: config.weight_decay,
        ..Default::default()
    });
    let mut log = Vec::with_capacity(per_cycle * config.cycles);
    if let Some(dir) = &hooks.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut step = 0;
    for cycle in 0..config.cycles {
        for local in 0..per_cycle {
            let lr = schedule.lr_at(local)?;
            let samples = sampler.batch(config.seed, step, config.batch_size)?;
            let batch = Batch::from_samples(&samples)?;
            let terms = train_step(&mut model, &mut adam, &batch, config.alpha, lr, step)?;
            let row = LogRow {
                step,
                lr,
                l_bbox: terms.l_bbox,
                l_obj: terms.l_obj,
                l_joint: terms.l_joint,
            };
            if let Some(f) = hooks.on_step.as_mut() {
                f(&row);
            }
            log.push(row);
            step += 1;
        }
        if let Some(dir) = &hooks.checkpoint_dir {
            model.save(dir.join(format!("cycle_{cycle}.ckpt")))?;
        }
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            negative_fraction: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn steps_per_cycle_rounds_up() {
        let c = TrainConfig::default();
        assert_eq!(c.steps_per_cycle(5000), 40);
        let c = TrainConfig {
            steps_per_cycle: Some(7),
            ..Default::default()
        };
        assert_eq!(c.steps_per_cycle(5000), 7);
    }

    #[test]
    fn log_csv_header() {
        let mut out = Vec::new();
        write_log_csv(
            &[LogRow {
                step: 0,
                lr: 0.5,
                l_bbox: 1.0,
                l_obj: 2.0,
                l_joint: 3.0,
            }],
            &mut out,
        )
        .unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "step,lr,l_bbox,l_obj,l_joint\n0,0.5,1,2,3\n");
    }
}

