//! Oracles shared by the integration tests. Everything here uses forward
//! evaluation or direct recounting only, never the code under test's
//! backward rules or metric shortcuts.
#![allow(dead_code)]

pub mod gradops;

use buftrack::backbone::{BackboneConfig, LayerSpec};
use buftrack::head::loss_joint;
use buftrack::model::TrackerModel;
use buftrack::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape.to_vec(), |_| n.sample(rng))
}

/// Values with `|x| < margin` pushed to `±margin`.
pub fn away_from_zero(mut t: Tensor<f64>, margin: f64) -> Tensor<f64> {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin };
        }
    }
    t
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub type LossFn<'a> = dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> buftrack::Result<Var<'g, f64>> + 'a;

fn eval(inputs: &[Tensor<f64>], f: &LossFn<'_>) -> f64 {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    f(&g, &vars).unwrap().value().item()
}

/// Worst relative error between the tape gradient and central differences
/// over every coordinate of every input.
pub fn gradcheck(inputs: &[Tensor<f64>], h: f64, f: &LossFn<'_>) -> f64 {
    let g = Graph::new();
    let vars: Vec<_> = inputs
        .iter()
        .map(|t| g.variable(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&g, &vars).unwrap();
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).expect("input reaches the loss");
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus, f) - eval(&minus, f)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Overlaps > θ counted one frame at a time.
pub fn brute_success(overlaps: &[f64], theta: f64) -> f64 {
    if overlaps.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for &o in overlaps {
        if o > theta {
            hits += 1;
        }
    }
    hits as f64 / overlaps.len() as f64
}

/// Small backbone for exhaustive gradient checks: conv, relu, pool, conv,
/// relu on 16×16 scenes and 8×8 exemplars.
pub fn micro_backbone() -> BackboneConfig {
    BackboneConfig {
        name: "micro".into(),
        input_scene: (16, 16),
        input_exemplar: (8, 8),
        layers: vec![
            LayerSpec::Conv {
                in_channels: 3,
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            LayerSpec::Conv {
                in_channels: 3,
                out_channels: 2,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            LayerSpec::Relu,
        ],
    }
}

/// Micro backbone plus a narrow head, in f64.
pub fn micro_model(beta: usize, seed: u64) -> TrackerModel<f64> {
    let backbone = micro_backbone();
    let mut head = buftrack::head::HeadConfig::for_backbone(&backbone, beta).unwrap();
    head.conv_channels = 3;
    head.hidden = 5;
    TrackerModel::from_config(
        buftrack::model::ModelConfig { backbone, head },
        seed,
    )
    .unwrap()
}

/// Joint loss of `model` on a fixed batch, evaluated without gradients.
pub fn joint_loss_value(
    model: &TrackerModel<f64>,
    scenes: &Tensor<f64>,
    exemplars: &Tensor<f64>,
    gt: &Tensor<f64>,
    y: &[usize],
) -> f64 {
    let g = Graph::new();
    let bb = model.backbone.params.bind_frozen(&g);
    let hp = model.head.params.bind_frozen(&g);
    let out = model
        .forward(&bb, &hp, g.constant(scenes.clone()), g.constant(exemplars.clone()))
        .unwrap();
    loss_joint(&out, gt, y, 10.0).unwrap().terms().l_joint
}

/// Random `count` distinct indices below `n` (all of them when `n ≤ count`).
pub fn sample_coords(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= count {
        return (0..n).collect();
    }
    let mut picked = Vec::with_capacity(count);
    while picked.len() < count {
        let i = rng.random_range(0..n);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked
}
