//! Tracking-loop accounting, buffer schedule and distractor-injection audits
//! on an untrained model (the invariants do not depend on accuracy).

use buftrack::backbone::BackboneConfig;
use buftrack::eval::{mean_metrics, run_distractor_sweep, run_metrics};
use buftrack::model::TrackerModel;
use buftrack::pipeline::{
    profile_report, track_sequence, RefreshSource, TrackRun, TrackerConfig,
};
use buftrack::synth::{generate_dataset, GenOptions, Sequence};

fn model() -> TrackerModel<f32> {
    TrackerModel::build(BackboneConfig::preset("desk-tiny").unwrap(), 4, 17).unwrap()
}

fn data(count: usize, length: usize) -> Vec<Sequence> {
    let opts = GenOptions {
        length,
        ..GenOptions::default()
    };
    generate_dataset(count, 21, &opts).unwrap()
}

fn run(model: &TrackerModel<f32>, seq: &Sequence, config: &TrackerConfig) -> TrackRun {
    track_sequence(model, &seq.frames, &seq.annotations, config, None).unwrap()
}

#[test]
fn one_scene_forward_per_processed_frame() {
    let m = model();
    let seqs = data(2, 61);
    for eta in [None, Some(2), Some(3), Some(7)] {
        let cfg = TrackerConfig {
            eta,
            ..TrackerConfig::default()
        };
        for seq in &seqs {
            let r = run(&m, seq, &cfg);
            let total = seq.len() - 1;
            assert_eq!(r.results.len(), total);
            let dropped = r.results.iter().filter(|x| x.dropped).count();
            let processed = total - dropped;
            assert_eq!(dropped, eta.map_or(0, |e| total / e), "eta {eta:?}");
            assert_eq!(r.counts.scene_forwards, processed);
            let refreshes = r.results.iter().filter(|x| x.refreshed).count();
            assert_eq!(r.counts.exemplar_forwards, 1 + refreshes);
            let (w, h) = seq.frame_dims();
            for x in &r.results {
                assert!(!(x.dropped && x.refreshed), "refresh on a dropped frame");
                let b = x.bbox;
                assert!(b.x >= 0.0 && b.y >= 0.0 && b.right() <= w as f64 && b.bottom() <= h as f64);
            }
        }
    }
}

#[test]
fn dropped_frames_hold_the_previous_box() {
    let m = model();
    let seq = &data(1, 40)[0];
    let r = run(&m, seq, &TrackerConfig {
        eta: Some(2),
        ..TrackerConfig::default()
    });
    for w in r.results.windows(2) {
        if w[1].dropped {
            assert_eq!(w[1].bbox, w[0].bbox);
        }
    }
}

#[test]
fn scheduled_refreshes_keep_exact_spacing() {
    let m = model();
    let seq = &data(1, 80)[0];
    for xi in [3, 5, 8] {
        let cfg = TrackerConfig {
            xi,
            refresh_source: RefreshSource::GroundTruth,
            ..TrackerConfig::default()
        };
        let r = run(&m, seq, &cfg);
        for rec in &r.trace {
            let frames = &rec.buffer_frames;
            assert_eq!(frames.len(), 4);
            for w in frames.windows(2) {
                assert!(
                    (w[0] == 0 && w[1] == 0) || w[1] == w[0] + xi,
                    "xi {xi} frame {}: {frames:?}",
                    rec.frame_index
                );
            }
            let newest = *frames.last().unwrap();
            assert_eq!(newest, rec.frame_index / xi * xi, "xi {xi}: {frames:?}");
        }
    }
}

#[test]
fn injection_fills_the_requested_slots() {
    let m = model();
    let seqs = data(3, 30);
    let cfg = TrackerConfig::default();
    let sweep = run_distractor_sweep(&m, &seqs, &[0, 25, 50, 75], &cfg, 5).unwrap();
    for (row, runs) in sweep.rows.iter().zip(&sweep.runs) {
        let k = (row.percentage / 25) as usize;
        let expected: Vec<bool> = (0..4).map(|i| i >= 4 - k).collect();
        for r in runs {
            for rec in &r.trace {
                assert_eq!(rec.injected_mask, expected, "{}%", row.percentage);
            }
        }
    }

    let baseline: Vec<TrackRun> = seqs.iter().map(|s| run(&m, s, &cfg)).collect();
    for (a, b) in baseline.iter().zip(&sweep.runs[0]) {
        assert_eq!(a.results.len(), b.results.len());
        for (x, y) in a.results.iter().zip(&b.results) {
            assert_eq!(
                (x.bbox, x.objectness.to_bits(), x.dropped, x.refreshed),
                (y.bbox, y.objectness.to_bits(), y.dropped, y.refreshed)
            );
        }
    }
    let base_metrics: Vec<_> = baseline
        .iter()
        .zip(&seqs)
        .map(|(r, s)| run_metrics(r, s, cfg.objectness_gate).unwrap())
        .collect();
    assert_eq!(mean_metrics(&base_metrics), sweep.rows[0].metrics);
}

#[test]
fn sweeps_are_deterministic() {
    let m = model();
    let seqs = data(3, 25);
    let cfg = TrackerConfig::default();
    let a = run_distractor_sweep(&m, &seqs, &[0, 50], &cfg, 8).unwrap();
    let b = run_distractor_sweep(&m, &seqs, &[0, 50], &cfg, 8).unwrap();
    assert_eq!(a.rows, b.rows);
}

#[test]
fn profile_shares_sum_to_one_hundred() {
    let m = model();
    let seq = &data(1, 40)[0];
    let r = run(&m, seq, &TrackerConfig::default());
    let report = profile_report(&r.results);
    let sum: f64 = report.stages.iter().map(|s| s.percent).sum();
    assert!((sum - 100.0).abs() <= 0.1, "{sum}");
    assert_eq!(report.stages.last().unwrap().stage, "other");
    assert!(report.stages.iter().any(|s| s.stage == report.dominant));
    assert_eq!(report.frames, seq.len() - 1);
}
