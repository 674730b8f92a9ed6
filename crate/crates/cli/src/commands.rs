use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use buftrack::backbone::{count_flops, count_params, BackboneConfig, PRESETS};
use buftrack::eval::{
    mean_metrics, run_distractor_sweep, run_drop_sweep, run_metrics, success_plot_svg,
    write_curve_csv, write_distractor_csv, write_drop_csv, Metrics, REFERENCE_DISTRACTOR_ROWS,
};
use buftrack::model::TrackerModel;
use buftrack::pipeline::{profile_report, track_sequence, RefreshSource, TrackRun, TrackerConfig};
use buftrack::synth::{generate_dataset, read_dataset, read_sequence, write_dataset, Sequence};
use buftrack::trainer::{train, write_log_csv, LogRow, SamplerConfig, TrainHooks};
use rayon::prelude::*;

use crate::run::{self, RunDir};
use crate::{
    Command, CountArgs, EvalArgs, GenDataArgs, SweepDistractorArgs, SweepDropArgs, TrackArgs,
    TrackerArgs, TrainArgs,
};

/// A referenced input path that does not exist.
#[derive(Debug)]
pub struct MissingFile(pub String);

impl std::fmt::Display for MissingFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for MissingFile {}

/// A required option given neither on the command line nor in the config file.
#[derive(Debug)]
pub struct MissingOption(pub &'static str);

impl std::fmt::Display for MissingOption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "--{} is required (flag or config file)", self.0)
    }
}

impl std::error::Error for MissingOption {}

pub fn dispatch(command: Command, runs: &Path) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a, runs),
        Command::Train(a) => train_cmd(a, runs),
        Command::Track(a) => track(a, runs),
        Command::Eval(a) => eval(a, runs),
        Command::SweepDistractor(a) => sweep_distractor(a, runs),
        Command::SweepDrop(a) => sweep_drop(a, runs),
        Command::Profile(a) => profile(a, runs),
        Command::Count(a) => count(a),
    }
}

fn require(path: &Path, option: &'static str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(MissingOption(option).into());
    }
    if !path.exists() {
        return Err(MissingFile(format!("{} does not exist", path.display())).into());
    }
    Ok(())
}

fn apply_tracker(cfg: &mut TrackerConfig, a: &TrackerArgs) {
    if let Some(x) = a.xi {
        cfg.xi = x;
    }
    if let Some(e) = a.eta {
        cfg.eta = Some(e);
    }
    if let Some(b) = a.beta_max {
        cfg.beta_max = b;
    }
    if a.gt_refresh {
        cfg.refresh_source = RefreshSource::GroundTruth;
    }
}

fn load_backbone(spec: &str) -> Result<BackboneConfig> {
    if let Some(cfg) = BackboneConfig::preset(spec) {
        return Ok(cfg);
    }
    let path = Path::new(spec);
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        return Ok(BackboneConfig::from_toml_str(&text)?);
    }
    if spec.ends_with(".toml") || spec.contains('/') {
        return Err(MissingFile(format!("{spec} does not exist")).into());
    }
    Err(buftrack::Error::Config {
        field: "backbone".into(),
        reason: format!("unknown preset `{spec}` (known: {})", PRESETS.join(", ")),
    }
    .into())
}

fn load_model(path: &Path, tracker: &mut TrackerConfig, beta_given: bool) -> Result<TrackerModel> {
    require(path, "model")?;
    let model = TrackerModel::load(path).with_context(|| format!("loading {}", path.display()))?;
    if !beta_given {
        tracker.beta_max = model.beta_max();
    }
    Ok(model)
}

/// A dataset directory, or a single sequence directory.
fn load_sequences(data: &Path) -> Result<Vec<Sequence>> {
    require(data, "data")?;
    if data.join("groundtruth.txt").exists() {
        return Ok(vec![read_sequence(data)?]);
    }
    let seqs = read_dataset(data)?;
    if seqs.is_empty() {
        return Err(MissingFile(format!("{} contains no sequences", data.display())).into());
    }
    Ok(seqs)
}

fn load_one(data: &Path, name: Option<&str>) -> Result<Sequence> {
    require(data, "data")?;
    match name {
        Some(n) => {
            let dir = data.join(n);
            require(&dir, "sequence")?;
            Ok(read_sequence(dir)?)
        }
        None => Ok(read_sequence(data)?),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn finish(dir: &RunDir) {
    println!("{}", dir.path.display());
}

fn gen_data(a: GenDataArgs, runs: &Path) -> Result<()> {
    let mut cfg: run::GenDataConfig = run::load(a.config_file.as_deref())?;
    if let Some(c) = a.count {
        cfg.count = c;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(l) = a.length {
        cfg.options.length = l;
    }
    let seqs = generate_dataset(cfg.count, cfg.seed, &cfg.options)?;
    let dir = RunDir::create(runs, "gen-data", &cfg)?;
    write_dataset(&seqs, dir.file("dataset"))?;
    eprintln!("wrote {} sequences of {} frames", seqs.len(), cfg.options.length);
    finish(&dir);
    Ok(())
}

fn train_cmd(a: TrainArgs, runs: &Path) -> Result<()> {
    let mut cfg: run::TrainRunConfig = run::load(a.config_file.as_deref())?;
    if let Some(d) = a.data {
        cfg.data = d;
    }
    if let Some(b) = a.backbone {
        cfg.backbone = b;
    }
    let t = &mut cfg.train;
    if let Some(s) = a.steps {
        t.steps_per_cycle = Some(s);
    }
    if let Some(c) = a.cycles {
        t.cycles = c;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(v) = a.max_lr {
        t.max_lr = v;
    }
    if let Some(v) = a.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = a.alpha {
        t.alpha = v;
    }
    if let Some(s) = a.seed {
        t.seed = s;
        cfg.init_seed = s;
    }
    apply_tracker(&mut cfg.tracker, &a.tracker);
    cfg.train.validate()?;
    cfg.tracker.validate()?;
    let backbone = load_backbone(&cfg.backbone)?;
    let dataset = load_sequences(&cfg.data)?;
    let model = TrackerModel::build(backbone, cfg.tracker.beta_max, cfg.init_seed)?;
    let sampler = SamplerConfig {
        beta_max: cfg.tracker.beta_max,
        xi: cfg.tracker.xi,
        search_scale: cfg.tracker.search_scale,
        scene_size: model.scene_size(),
        exemplar_size: model.exemplar_size(),
        negative_fraction: cfg.train.negative_fraction,
        distractor_prob: cfg.train.distractor_prob,
    };
    let dir = RunDir::create(runs, "train", &cfg)?;
    let total = cfg.train.steps_per_cycle(dataset.iter().map(|s| s.len()).sum()) * cfg.train.cycles;
    let mut progress = |r: &LogRow| {
        if r.step % 50 == 0 || r.step + 1 == total {
            eprintln!(
                "step {:>6}/{total}  lr {:.3e}  l_bbox {:.5}  l_obj {:.5}",
                r.step, r.lr, r.l_bbox, r.l_obj
            );
        }
    };
    let outcome = train(
        model,
        &dataset,
        sampler,
        &cfg.train,
        TrainHooks {
            checkpoint_dir: Some(dir.file("checkpoints")),
            on_step: Some(&mut progress),
        },
    )?;
    outcome.model.save(dir.file("model.ckpt"))?;
    let mut log = create(&dir.file("train_log.csv"))?;
    write_log_csv(&outcome.log, &mut log)?;
    log.flush()?;
    finish(&dir);
    Ok(())
}

fn write_boxes(run: &TrackRun, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "frame,x,y,w,h,objectness,dropped,refreshed")?;
    for r in &run.results {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.frame_index,
            r.bbox.x,
            r.bbox.y,
            r.bbox.w,
            r.bbox.h,
            r.objectness,
            r.dropped as u8,
            r.refreshed as u8
        )?;
    }
    w.flush()?;
    Ok(())
}

fn write_trace(run: &TrackRun, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = create(path)?;
    run.write_trace(&mut w)?;
    w.flush()?;
    Ok(())
}

fn resolve_track(a: TrackArgs) -> Result<(run::TrackRunConfig, TrackerModel, Sequence)> {
    let mut cfg: run::TrackRunConfig = run::load(a.config_file.as_deref())?;
    if let Some(m) = a.model {
        cfg.model = m;
    }
    if let Some(d) = a.data {
        cfg.data = d;
    }
    if let Some(s) = a.sequence {
        cfg.sequence = Some(s);
    }
    apply_tracker(&mut cfg.tracker, &a.tracker);
    let model = load_model(&cfg.model, &mut cfg.tracker, a.tracker.beta_max.is_some())?;
    cfg.tracker.validate()?;
    let seq = load_one(&cfg.data, cfg.sequence.as_deref())?;
    Ok((cfg, model, seq))
}

fn track(a: TrackArgs, runs: &Path) -> Result<()> {
    let (cfg, model, seq) = resolve_track(a)?;
    let run = track_sequence(&model, &seq.frames, &seq.annotations, &cfg.tracker, None)?;
    let dir = RunDir::create(runs, "track", &cfg)?;
    write_boxes(&run, &dir.file("boxes.csv"))?;
    write_trace(&run, &dir.file("trace.jsonl"))?;
    let m = run_metrics(&run, &seq, cfg.tracker.objectness_gate)?;
    eprintln!(
        "{}: {} frames  AO {:.3}  SR@0.50 {:.3}",
        seq.name,
        m.frames,
        m.ao,
        m.sr_at(0.5).unwrap_or(0.0)
    );
    finish(&dir);
    Ok(())
}

fn metrics_row(name: &str, m: &Metrics) -> String {
    let sr: Vec<String> = m.sr.iter().map(|(_, v)| v.to_string()).collect();
    format!("{name},{},{},{},{}", m.frames, m.ao, sr.join(","), m.auc)
}

fn eval(a: EvalArgs, runs: &Path) -> Result<()> {
    let mut cfg: run::EvalRunConfig = run::load(a.config_file.as_deref())?;
    if let Some(m) = a.model {
        cfg.model = m;
    }
    if let Some(d) = a.data {
        cfg.data = d;
    }
    apply_tracker(&mut cfg.tracker, &a.tracker);
    let model = load_model(&cfg.model, &mut cfg.tracker, a.tracker.beta_max.is_some())?;
    cfg.tracker.validate()?;
    let seqs = load_sequences(&cfg.data)?;
    let per_seq: Vec<Metrics> = seqs
        .par_iter()
        .map(|s| {
            let run = track_sequence(&model, &s.frames, &s.annotations, &cfg.tracker, None)?;
            Ok(run_metrics(&run, s, cfg.tracker.objectness_gate)?)
        })
        .collect::<Result<_>>()?;
    let mean = mean_metrics(&per_seq);
    let dir = RunDir::create(runs, "eval", &cfg)?;
    let mut w = create(&dir.file("metrics.csv"))?;
    writeln!(w, "sequence,frames,ao,sr_0.25,sr_0.50,sr_0.75,sr_0.90,auc")?;
    for (s, m) in seqs.iter().zip(&per_seq) {
        writeln!(w, "{}", metrics_row(&s.name, m))?;
    }
    writeln!(w, "{}", metrics_row("mean", &mean))?;
    w.flush()?;
    let series = [("tracker".to_string(), &mean)];
    write_curve_csv(&series, create(&dir.file("curve.csv"))?)?;
    std::fs::write(dir.file("success.svg"), success_plot_svg("Success plot", &series))?;
    eprintln!(
        "{} sequences  AO {:.3}  SR@0.50 {:.3}  AUC {:.3}",
        seqs.len(),
        mean.ao,
        mean.sr_at(0.5).unwrap_or(0.0),
        mean.auc
    );
    finish(&dir);
    Ok(())
}

fn sweep_distractor(a: SweepDistractorArgs, runs: &Path) -> Result<()> {
    let mut cfg: run::DistractorRunConfig = run::load(a.config_file.as_deref())?;
    if let Some(m) = a.model {
        cfg.model = m;
    }
    if let Some(d) = a.data {
        cfg.data = d;
    }
    if let Some(p) = a.percentages {
        cfg.percentages = p;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    apply_tracker(&mut cfg.tracker, &a.tracker);
    let model = load_model(&cfg.model, &mut cfg.tracker, a.tracker.beta_max.is_some())?;
    cfg.tracker.validate()?;
    let seqs = load_sequences(&cfg.data)?;
    let sweep = run_distractor_sweep(&model, &seqs, &cfg.percentages, &cfg.tracker, cfg.seed)?;
    let dir = RunDir::create(runs, "sweep-distractor", &cfg)?;
    write_distractor_csv(&sweep.rows, create(&dir.file("distractor.csv"))?)?;
    let series: Vec<(String, &Metrics)> = sweep
        .rows
        .iter()
        .map(|r| (format!("{}%", r.percentage), &r.metrics))
        .collect();
    write_curve_csv(&series, create(&dir.file("curve.csv"))?)?;
    std::fs::write(
        dir.file("success.svg"),
        success_plot_svg("Distractor injection", &series),
    )?;
    for (row, runs_p) in sweep.rows.iter().zip(&sweep.runs) {
        for (seq, run) in seqs.iter().zip(runs_p) {
            write_trace(
                run,
                &dir.path
                    .join("traces")
                    .join(format!("p{:02}", row.percentage))
                    .join(format!("{}.jsonl", seq.name)),
            )?;
        }
    }
    eprintln!("{:>6} {:>8} {:>8} {:>8} {:>8} | reference SR@0.25/0.50/0.75/0.90", "pct", "SR@.25", "SR@.50", "SR@.75", "SR@.90");
    for r in &sweep.rows {
        let sr: Vec<String> = r.metrics.sr.iter().map(|(_, v)| format!("{v:>8.3}")).collect();
        let reference = REFERENCE_DISTRACTOR_ROWS
            .iter()
            .find(|(p, _)| *p == r.percentage)
            .map(|(_, v)| v.map(|x| format!("{x:.3}")).join(" "))
            .unwrap_or_else(|| "-".into());
        eprintln!("{:>5}% {} | {reference}", r.percentage, sr.join(" "));
    }
    finish(&dir);
    Ok(())
}

fn sweep_drop(a: SweepDropArgs, runs: &Path) -> Result<()> {
    let mut cfg: run::DropRunConfig = run::load(a.config_file.as_deref())?;
    if let Some(m) = a.model {
        cfg.model = m;
    }
    if let Some(d) = a.data {
        cfg.data = d;
    }
    if let Some(e) = a.etas {
        cfg.etas = e;
    }
    apply_tracker(&mut cfg.tracker, &a.tracker);
    cfg.tracker.eta = None;
    let model = load_model(&cfg.model, &mut cfg.tracker, a.tracker.beta_max.is_some())?;
    cfg.tracker.validate()?;
    let seqs = load_sequences(&cfg.data)?;
    let sweep = run_drop_sweep(&model, &seqs, &cfg.etas, &cfg.tracker)?;
    let dir = RunDir::create(runs, "sweep-drop", &cfg)?;
    write_drop_csv(&sweep.rows, create(&dir.file("drop.csv"))?, false)?;
    write_drop_csv(&sweep.rows, create(&dir.file("drop_timing.csv"))?, true)?;
    for r in &sweep.rows {
        eprintln!(
            "eta {:>4}  AO {:.3}  SR@0.50 {:.3}  processed {}/{}  fps {:.1}  predicted SF {:.3}",
            r.eta.map(|e| e.to_string()).unwrap_or_else(|| "none".into()),
            r.metrics.ao,
            r.metrics.sr_at(0.5).unwrap_or(0.0),
            r.processed_frames,
            r.total_frames,
            r.measured_fps,
            r.predicted_sf
        );
    }
    finish(&dir);
    Ok(())
}

fn profile(a: TrackArgs, runs: &Path) -> Result<()> {
    let (cfg, model, seq) = resolve_track(a)?;
    let run = track_sequence(&model, &seq.frames, &seq.annotations, &cfg.tracker, None)?;
    let report = profile_report(&run.results);
    let dir = RunDir::create(runs, "profile", &cfg)?;
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(dir.file("profile.json"), json + "\n")?;
    print!("{}", report.to_table());
    finish(&dir);
    Ok(())
}

fn count(a: CountArgs) -> Result<()> {
    let cfg = load_backbone(&a.config)?;
    println!("{}", count_params(&cfg)?);
    if a.flops {
        for (label, input) in [("scene", cfg.input_scene), ("exemplar", cfg.input_exemplar)] {
            let report = count_flops(&cfg, input)?;
            println!("{label} {}x{}: {} FLOPs", input.0, input.1, report.total);
            for l in &report.per_layer {
                println!("  {:>3} {:<8} {:>16} {:?}", l.index, l.kind, l.flops, l.output_shape);
            }
        }
    }
    Ok(())
}
