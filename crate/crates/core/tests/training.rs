//! End-to-end training properties on a small model and a short synthetic
//! dataset.

use buftrack::backbone::{BackboneConfig, LayerSpec};
use buftrack::head::{loss_joint, Head, HeadConfig};
use buftrack::model::{ModelConfig, TrackerModel};
use buftrack::optim::{Adam, AdamConfig, OneCycle};
use buftrack::synth::{generate_dataset, GenOptions, Sequence};
use buftrack::tensor::Graph;
use buftrack::trainer::{
    stream_rng, train, train_step, Batch, SampleKind, Sampler, SamplerConfig, TrainConfig,
    TrainHooks,
};

fn small_model(seed: u64) -> TrackerModel<f32> {
    let backbone = BackboneConfig {
        name: "small".into(),
        input_scene: (16, 16),
        input_exemplar: (8, 8),
        layers: vec![
            LayerSpec::Conv {
                in_channels: 3,
                out_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            LayerSpec::Conv {
                in_channels: 8,
                out_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
        ],
    };
    let mut head = HeadConfig::for_backbone(&backbone, 4).unwrap();
    head.conv_channels = 8;
    head.hidden = 32;
    TrackerModel::from_config(ModelConfig { backbone, head }, seed).unwrap()
}

fn dataset() -> Vec<Sequence> {
    let opts = GenOptions {
        length: 30,
        ..GenOptions::default()
    };
    generate_dataset(6, 3, &opts).unwrap()
}

fn sampler_config(model: &TrackerModel<f32>, negative_fraction: f64) -> SamplerConfig {
    SamplerConfig {
        beta_max: 4,
        xi: 5,
        search_scale: 2.0,
        scene_size: model.scene_size(),
        exemplar_size: model.exemplar_size(),
        negative_fraction,
        distractor_prob: 0.25,
    }
}

#[test]
fn overfits_a_fixed_batch() {
    let mut model = small_model(1);
    let data = dataset();
    let sampler = Sampler::new(&data, sampler_config(&model, 0.3)).unwrap();
    let batch = Batch::from_samples(&sampler.batch(7, 0, 32).unwrap()).unwrap();
    let mut adam = Adam::new(AdamConfig {
        weight_decay: 0.0,
        ..Default::default()
    });
    let initial = train_step(&mut model, &mut adam, &batch, 10.0, 3e-3, 0).unwrap().l_joint;
    let mut last = initial;
    for step in 1..500 {
        last = train_step(&mut model, &mut adam, &batch, 10.0, 3e-3, step).unwrap().l_joint;
        if last < 0.05 * initial {
            break;
        }
    }
    assert!(last < 0.05 * initial, "loss {initial} -> {last}");
}

#[test]
fn negatives_never_reach_box_parameters() {
    let model = small_model(2);
    let data = dataset();
    let sampler = Sampler::new(&data, sampler_config(&model, 0.3)).unwrap();
    let negatives: Vec<_> = (0..6)
        .map(|i| sampler.make_negative_sample(&mut stream_rng(4, 0, i)).unwrap())
        .collect();
    let batch = Batch::from_samples(&negatives).unwrap();

    let g = Graph::new();
    let bb = model.backbone.params.bind(&g);
    let hp = model.head.params.bind(&g);
    let out = model
        .forward(&bb, &hp, g.constant(batch.scenes.clone()), g.constant(batch.exemplars.clone()))
        .unwrap();
    let loss = loss_joint(&out, &batch.bbox, &batch.y_obj, 10.0).unwrap();
    g.backward(loss.l_joint).unwrap();
    let names = Head::<f32>::bbox_param_names();
    let grads = hp.grads();
    let mut seen = 0;
    for ((name, _), grad) in model.head.params.iter().zip(&grads) {
        if names.iter().any(|n| n == name) {
            seen += 1;
            if let Some(grad) = grad {
                assert!(grad.data().iter().all(|&v| v == 0.0), "{name} has a nonzero gradient");
            }
        } else if name.contains("weight") {
            let grad = grad.as_ref().expect("objectness path reaches every other layer");
            assert!(grad.data().iter().any(|&v| v != 0.0), "{name} received no gradient");
        }
    }
    assert_eq!(seen, 2);
}

#[test]
fn negative_samples_exclude_the_target() {
    let model = small_model(3);
    let data = dataset();
    let sampler = Sampler::new(&data, sampler_config(&model, 0.3)).unwrap();
    let mut kinds = [0usize; 2];
    for i in 0..200 {
        let s = sampler.make_negative_sample(&mut stream_rng(6, 1, i)).unwrap();
        assert_eq!(s.y_obj, 0);
        assert_eq!(s.bbox, [0.0; 4]);
        match s.kind {
            SampleKind::ShiftedCrop => {
                let target = data[s.sequence].annotations[s.frame].bbox;
                assert_eq!(s.region.intersection(&target), 0.0);
                kinds[0] += 1;
            }
            SampleKind::ForeignScene => kinds[1] += 1,
            SampleKind::Positive => panic!("positive from make_negative_sample"),
        }
    }
    assert!(kinds[0] > 0 && kinds[1] > 0, "{kinds:?}");
}

#[test]
fn negative_fraction_is_respected() {
    let model = small_model(4);
    let data = dataset();
    let sampler = Sampler::new(&data, sampler_config(&model, 0.3)).unwrap();
    let mut negatives = 0;
    let mut total = 0;
    for step in 0..16 {
        for s in sampler.batch(11, step, 500).unwrap() {
            total += 1;
            negatives += usize::from(s.y_obj == 0);
            assert_eq!(s.y_obj == 0, s.kind != SampleKind::Positive);
        }
    }
    let frac = negatives as f64 / total as f64;
    assert!((frac - 0.3).abs() <= 0.02, "{frac}");
}

fn short_run(seed: u64) -> (TrackerModel<f32>, Vec<buftrack::trainer::LogRow>) {
    let data = dataset();
    let model = small_model(seed);
    let sc = sampler_config(&model, 0.3);
    let config = TrainConfig {
        batch_size: 4,
        cycles: 2,
        steps_per_cycle: Some(120),
        seed,
        ..TrainConfig::default()
    };
    let out = train(model, &data, sc, &config, TrainHooks::default()).unwrap();
    (out.model, out.log)
}

#[test]
fn training_is_deterministic_and_logs_the_schedule() {
    let (m1, log1) = short_run(9);
    let (m2, log2) = short_run(9);
    assert_eq!(log1, log2);
    for ((n1, t1), (n2, t2)) in m1
        .backbone
        .params
        .iter()
        .chain(m1.head.params.iter())
        .zip(m2.backbone.params.iter().chain(m2.head.params.iter()))
    {
        assert_eq!(n1, n2);
        assert_eq!(t1.data(), t2.data(), "{n1}");
    }

    let schedule = OneCycle::new(120, TrainConfig::default().max_lr);
    assert_eq!(log1.len(), 240);
    for (i, row) in log1.iter().enumerate() {
        assert_eq!(row.step, i);
        assert_eq!(row.lr, schedule.lr_at(i % 120).unwrap(), "step {i}");
        assert!(row.l_joint.is_finite());
    }
}
