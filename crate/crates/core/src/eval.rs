//! Overlap metrics, success curves and the two robustness sweeps.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::bbox::{iou, BBox};
use crate::buffer::distractor_slots;
use crate::error::{Error, Result};
use crate::model::TrackerModel;
use crate::pipeline::{
    exemplar_region, model_input, speedup_factor, track_sequence, DecodedFrame, Injection,
    TrackRun, TrackerConfig,
};
use crate::synth::{Annotation, Sequence};
use crate::tensor::Tensor;
use crate::trainer::stream_rng;

pub const SR_THRESHOLDS: [f64; 4] = [0.25, 0.50, 0.75, 0.90];
/// Curve resolution: thresholds `k/100` for `k = 0..=100`.
pub const CURVE_POINTS: usize = 101;

pub fn curve_threshold(k: usize) -> f64 {
    k as f64 / 100.0
}

/// What the tracker reported for one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrackedBox {
    pub bbox: BBox,
    /// False when the tracker declared the target absent.
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub ao: f64,
    /// `(threshold, success rate)` for [`SR_THRESHOLDS`].
    pub sr: Vec<(f64, f64)>,
    /// Success fraction at each of the [`CURVE_POINTS`] thresholds.
    pub curve: Vec<f64>,
    pub auc: f64,
    pub frames: usize,
}

impl Metrics {
    pub fn sr_at(&self, threshold: f64) -> Option<f64> {
        self.sr
            .iter()
            .find(|(t, _)| (*t - threshold).abs() < 1e-12)
            .map(|(_, v)| *v)
    }
}

/// Per-frame overlap. Frames without the target score 1 when the tracker
/// declared absence and 0 otherwise.
pub fn frame_overlaps(preds: &[TrackedBox], gts: &[Annotation]) -> Result<Vec<f64>> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} annotations",
            preds.len(),
            gts.len()
        )));
    }
    Ok(preds
        .iter()
        .zip(gts)
        .map(|(p, g)| match (g.present, p.present) {
            (true, _) => iou(&p.bbox, &g.bbox),
            (false, false) => 1.0,
            (false, true) => 0.0,
        })
        .collect())
}

/// Metrics from per-frame overlaps. Success at threshold `θ` counts
/// overlaps strictly greater than `θ`.
pub fn metrics_from_overlaps(overlaps: &[f64]) -> Metrics {
    let n = overlaps.len();
    let mut sorted = overlaps.to_vec();
    sorted.sort_by(f64::total_cmp);
    let above = |theta: f64| -> f64 {
        if n == 0 {
            return 0.0;
        }
        let at_or_below = sorted.partition_point(|&o| o <= theta);
        (n - at_or_below) as f64 / n as f64
    };
    let curve: Vec<f64> = (0..CURVE_POINTS).map(|k| above(curve_threshold(k))).collect();
    let sr = SR_THRESHOLDS
        .iter()
        .map(|&t| (t, curve[(t * 100.0).round() as usize]))
        .collect();
    let ao = if n == 0 {
        0.0
    } else {
        overlaps.iter().sum::<f64>() / n as f64
    };
    let auc = curve.iter().sum::<f64>() / CURVE_POINTS as f64;
    Metrics {
        ao,
        sr,
        curve,
        auc,
        frames: n,
    }
}

pub fn sequence_metrics(preds: &[TrackedBox], gts: &[Annotation]) -> Result<Metrics> {
    Ok(metrics_from_overlaps(&frame_overlaps(preds, gts)?))
}

/// Element-wise mean of per-sequence metrics.
pub fn mean_metrics(all: &[Metrics]) -> Metrics {
    let k = all.len().max(1) as f64;
    let mean = |f: &dyn Fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / k;
    Metrics {
        ao: mean(&|m| m.ao),
        sr: SR_THRESHOLDS
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, mean(&|m| m.sr[i].1)))
            .collect(),
        curve: (0..CURVE_POINTS).map(|j| mean(&|m| m.curve[j])).collect(),
        auc: mean(&|m| m.auc),
        frames: all.iter().map(|m| m.frames).sum(),
    }
}

/// Tracker outputs for frames `1..` of a run.
pub fn tracked_boxes(run: &TrackRun, gate: f64) -> Vec<TrackedBox> {
    run.results
        .iter()
        .map(|r| TrackedBox {
            bbox: r.bbox,
            present: r.objectness >= gate,
        })
        .collect()
}

/// Metrics of a run against the sequence, skipping the initialization frame.
pub fn run_metrics(run: &TrackRun, seq: &Sequence, gate: f64) -> Result<Metrics> {
    sequence_metrics(&tracked_boxes(run, gate), &seq.annotations[1..])
}

/// Reference rows (SR at 0.25/0.50/0.75/0.90) measured on natural video at
/// full scale, printed next to desk-scale results for comparison only.
pub const REFERENCE_DISTRACTOR_ROWS: [(u32, [f64; 4]); 4] = [
    (0, [0.922, 0.845, 0.663, 0.363]),
    (25, [0.924, 0.851, 0.665, 0.357]),
    (50, [0.920, 0.844, 0.649, 0.350]),
    (75, [0.916, 0.835, 0.619, 0.335]),
];

/// Exemplar features of a non-target region of another sequence: one of its
/// distractor objects when it has any, else a target-sized patch disjoint
/// from its target.
pub fn distractor_features(
    model: &TrackerModel<f32>,
    dataset: &[Sequence],
    own: usize,
    count: usize,
    seed: u64,
    search_scale: f64,
) -> Result<Vec<Tensor<f32>>> {
    use rand::Rng;
    let mut rng = stream_rng(seed, 0xD157, own as u64);
    (0..count)
        .map(|_| {
            let o = if dataset.len() > 1 {
                let k = rng.random_range(0..dataset.len() - 1);
                if k >= own {
                    k + 1
                } else {
                    k
                }
            } else {
                own
            };
            let seq = &dataset[o];
            let t = rng.random_range(0..seq.len());
            let target = seq.annotations[t].bbox;
            let boxes = seq.distractor_boxes(t);
            let (w, h) = seq.frame_dims();
            let b = if boxes.is_empty() {
                let side = target.max_side();
                let mut b = BBox::new(0.0, 0.0, side, side);
                for _ in 0..50 {
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
            } else {
                boxes[rng.random_range(0..boxes.len())]
            };
            let frame = DecodedFrame::from_image(&seq.frames[t]);
            let input = model_input(&frame, &exemplar_region(&b, search_scale), model.exemplar_size())?;
            model.featurize(&input)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistractorRow {
    pub percentage: u32,
    pub metrics: Metrics,
}

pub struct DistractorSweep {
    pub rows: Vec<DistractorRow>,
    /// `runs[p][s]`: run of sequence `s` at percentage index `p`.
    pub runs: Vec<Vec<TrackRun>>,
}

/// Tracks every sequence at each distractor percentage, pinning distractor
/// features into the newest buffer slots. `0` runs without any injection.
pub fn run_distractor_sweep(
    model: &TrackerModel<f32>,
    dataset: &[Sequence],
    percentages: &[u32],
    config: &TrackerConfig,
    seed: u64,
) -> Result<DistractorSweep> {
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &p in percentages {
        let slots = distractor_slots(p, config.beta_max)?;
        let per_seq: Vec<(TrackRun, Metrics)> = dataset
            .par_iter()
            .enumerate()
            .map(|(s, seq)| {
                let features = if slots.is_empty() {
                    Vec::new()
                } else {
                    distractor_features(model, dataset, s, slots.len(), seed, config.search_scale)?
                };
                let injection = (!slots.is_empty()).then_some(Injection {
                    slots: &slots,
                    features: &features,
                });
                let run = track_sequence(model, &seq.frames, &seq.annotations, config, injection)?;
                let m = run_metrics(&run, seq, config.objectness_gate)?;
                Ok((run, m))
            })
            .collect::<Result<_>>()?;
        let (r, m): (Vec<_>, Vec<_>) = per_seq.into_iter().unzip();
        rows.push(DistractorRow {
            percentage: p,
            metrics: mean_metrics(&m),
        });
        runs.push(r);
    }
    Ok(DistractorSweep { rows, runs })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DropRow {
    pub eta: Option<usize>,
    pub metrics: Metrics,
    pub processed_frames: usize,
    pub total_frames: usize,
    pub measured_fps: f64,
    pub predicted_sf: f64,
}

pub struct DropSweep {
    pub rows: Vec<DropRow>,
    pub runs: Vec<Vec<TrackRun>>,
}

/// Tracks every sequence for the no-drop sentinel followed by each `eta`.
pub fn run_drop_sweep(
    model: &TrackerModel<f32>,
    dataset: &[Sequence],
    etas: &[usize],
    config: &TrackerConfig,
) -> Result<DropSweep> {
    let mut all: Vec<Option<usize>> = vec![None];
    all.extend(etas.iter().map(|&e| Some(e)));
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for eta in all {
        let predicted_sf = speedup_factor(eta)?;
        let cfg = TrackerConfig {
            eta,
            ..config.clone()
        };
        let per_seq: Vec<(TrackRun, Metrics)> = dataset
            .par_iter()
            .map(|seq| {
                let run = track_sequence(model, &seq.frames, &seq.annotations, &cfg, None)?;
                let m = run_metrics(&run, seq, cfg.objectness_gate)?;
                Ok((run, m))
            })
            .collect::<Result<_>>()?;
        let (r, m): (Vec<TrackRun>, Vec<Metrics>) = per_seq.into_iter().unzip();
        let total_frames = r.iter().map(|x| x.results.len()).sum();
        let processed_frames = r
            .iter()
            .flat_map(|x| &x.results)
            .filter(|x| !x.dropped)
            .count();
        let ns: u64 = r.iter().flat_map(|x| &x.results).map(|x| x.timings.total).sum();
        rows.push(DropRow {
            eta,
            metrics: mean_metrics(&m),
            processed_frames,
            total_frames,
            measured_fps: if ns == 0 {
                0.0
            } else {
                total_frames as f64 / (ns as f64 * 1e-9)
            },
            predicted_sf,
        });
        runs.push(r);
    }
    Ok(DropSweep { rows, runs })
}

pub fn write_distractor_csv(rows: &[DistractorRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "percentage,sr_0.25,sr_0.50,sr_0.75,sr_0.90,ao,auc,ref_sr_0.25,ref_sr_0.50,ref_sr_0.75,ref_sr_0.90")?;
    for r in rows {
        let reference = REFERENCE_DISTRACTOR_ROWS
            .iter()
            .find(|(p, _)| *p == r.percentage)
            .map(|(_, v)| v.map(|x| x.to_string()).join(","))
            .unwrap_or_else(|| ",,,".into());
        let sr: Vec<String> = r.metrics.sr.iter().map(|(_, v)| v.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},{}",
            r.percentage,
            sr.join(","),
            r.metrics.ao,
            r.metrics.auc,
            reference
        )?;
    }
    Ok(())
}

/// `timing` adds the measured FPS column, the only non-deterministic one.
pub fn write_drop_csv(rows: &[DropRow], mut w: impl Write, timing: bool) -> Result<()> {
    write!(w, "eta,ao,sr_0.50,processed_frames,total_frames,predicted_sf")?;
    writeln!(w, "{}", if timing { ",measured_fps" } else { "" })?;
    for r in rows {
        let eta = r.eta.map(|e| e.to_string()).unwrap_or_else(|| "none".into());
        write!(
            w,
            "{},{},{},{},{},{}",
            eta,
            r.metrics.ao,
            r.metrics.sr_at(0.5).unwrap_or(0.0),
            r.processed_frames,
            r.total_frames,
            r.predicted_sf
        )?;
        if timing {
            write!(w, ",{:.2}", r.measured_fps)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_curve_csv(series: &[(String, &Metrics)], mut w: impl Write) -> Result<()> {
    write!(w, "threshold")?;
    for (name, _) in series {
        write!(w, ",{name}")?;
    }
    writeln!(w)?;
    for k in 0..CURVE_POINTS {
        write!(w, "{}", curve_threshold(k))?;
        for (_, m) in series {
            write!(w, ",{}", m.curve[k])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Standalone SVG success plot: overlap threshold against success rate, one
/// line per series, legend labelled with AUC.
pub fn success_plot_svg(title: &str, series: &[(String, &Metrics)]) -> String {
    let (w, h) = (480.0, 360.0);
    let (left, right, top, bottom) = (56.0, 16.0, 36.0, 48.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |t: f64| left + t * pw;
    let y = |v: f64| top + (1.0 - v) * ph;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s.push_str(&format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        w / 2.0,
        escape(title)
    ));
    for i in 0..=10 {
        let t = i as f64 / 10.0;
        s.push_str(&format!(
            "<line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{0:.1}\" y2=\"{2:.1}\" stroke=\"#ddd\"/>\n",
            x(t),
            top,
            top + ph
        ));
        s.push_str(&format!(
            "<line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{2:.1}\" y2=\"{1:.1}\" stroke=\"#ddd\"/>\n",
            left,
            y(t),
            left + pw
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{t:.1}</text>\n",
            x(t),
            top + ph + 16.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{t:.1}</text>\n",
            left - 6.0,
            y(t) + 4.0
        ));
    }
    s.push_str(&format!(
        "<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">Overlap threshold</text>\n",
        left + pw / 2.0,
        h - 10.0
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">Success rate</text>\n",
        top + ph / 2.0,
        top + ph / 2.0
    ));
    for (i, (name, m)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = m
            .curve
            .iter()
            .enumerate()
            .map(|(k, v)| format!("{:.2},{:.2}", x(curve_threshold(k)), y(*v)))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        let ly = top + 16.0 + 16.0 * i as f64;
        s.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            left + 10.0,
            left + 30.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\">{} [AUC {:.3}]</text>\n",
            left + 36.0,
            ly + 4.0,
            escape(name),
            m.auc
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
