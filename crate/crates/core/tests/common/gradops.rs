//! Finite-difference checks for every differentiable operation and for the
//! assembled model, returning the worst relative error of each.

use buftrack::head::loss_joint;
use buftrack::tensor::{Graph, Tensor, Var};

use super::{
    away_from_zero, gradcheck, joint_loss_value, micro_model, randn, rel_err, rng, sample_coords,
};

pub const OP_H: f64 = 1e-3;

/// Random linear read-out so tensor-valued ops reduce to a scalar with a
/// non-uniform gradient.
fn readout<'g>(g: &'g Graph<f64>, y: Var<'g, f64>, seed: u64) -> buftrack::Result<Var<'g, f64>> {
    let r = randn(&y.shape(), 1.0, &mut rng(seed));
    Ok(y.mul(g.constant(r))?.sum())
}

pub fn op_checks() -> Vec<(&'static str, f64)> {
    let mut r = rng(11);
    let mut out = Vec::new();

    let x = randn(&[2, 3, 8, 8], 1.0, &mut r);
    let w = randn(&[4, 3, 3, 3], 0.3, &mut r);
    let b = randn(&[4], 0.3, &mut r);
    out.push((
        "conv2d",
        gradcheck(&[x.clone(), w.clone(), b.clone()], OP_H, &|g, v| {
            readout(g, v[0].conv2d(v[1], v[2], 1, 0)?, 1)
        }),
    ));
    out.push((
        "conv2d stride 2 pad 1",
        gradcheck(&[x, w, b], OP_H, &|g, v| readout(g, v[0].conv2d(v[1], v[2], 2, 1)?, 2)),
    ));

    // Distinct values spaced well beyond h keep the argmax fixed.
    let mut pool_in = Tensor::from_fn(vec![1, 2, 6, 6], |i| ((i * 37) % 72) as f64 * 0.05);
    for (v, n) in pool_in.data_mut().iter_mut().zip(randn(&[72], 0.005, &mut r).data()) {
        *v += n;
    }
    out.push((
        "max_pool2d",
        gradcheck(&[pool_in], OP_H, &|g, v| readout(g, v[0].max_pool2d(2, 2)?, 3)),
    ));

    let a = away_from_zero(randn(&[3, 5], 1.0, &mut r), 0.05);
    out.push(("relu", gradcheck(&[a.clone()], OP_H, &|g, v| readout(g, v[0].relu(), 4))));
    out.push(("sigmoid", gradcheck(&[a.clone()], OP_H, &|g, v| readout(g, v[0].sigmoid(), 5))));

    let lw = randn(&[4, 5], 0.5, &mut r);
    let lb = randn(&[4], 0.5, &mut r);
    out.push((
        "linear",
        gradcheck(&[a.clone(), lw, lb], OP_H, &|g, v| readout(g, v[0].linear(v[1], v[2])?, 6)),
    ));

    let p = randn(&[1, 2, 4, 4], 1.0, &mut r);
    let q = randn(&[1, 3, 4, 4], 1.0, &mut r);
    out.push((
        "concat_channels + slice_channels",
        gradcheck(&[p, q], OP_H, &|g, v| {
            let c = g.concat_channels(&[v[0], v[1]])?;
            let s = c.slice_channels(1, 3)?;
            readout(g, c, 7)?.add(readout(g, s, 8)?)
        }),
    ));

    let m = randn(&[1, 2, 3, 5], 1.0, &mut r);
    out.push((
        "resize_bilinear up",
        gradcheck(&[m.clone()], OP_H, &|g, v| readout(g, v[0].resize_bilinear(7, 4)?, 9)),
    ));
    out.push((
        "resize_bilinear down",
        gradcheck(&[m], OP_H, &|g, v| readout(g, v[0].resize_bilinear(2, 3)?, 10)),
    ));

    let u = randn(&[2, 6], 1.0, &mut r);
    let t = randn(&[2, 6], 1.0, &mut r);
    out.push((
        "add sub mul scale",
        gradcheck(&[u.clone(), t.clone()], OP_H, &|g, v| {
            let s = v[0].add(v[1])?.mul(v[0].sub(v[1])?)?.scale(0.7);
            readout(g, s, 11)
        }),
    ));
    out.push((
        "reshape flatten mean",
        gradcheck(&[u.clone()], OP_H, &|g, v| {
            let y = v[0].reshape(vec![3, 4])?.flatten()?;
            Ok(readout(g, y, 12)?.add(v[0].mean())?)
        }),
    ));

    // Errors spread over both branches, none near the |z| = 1 seam.
    let target = Tensor::from_fn(vec![3, 4], |i| [0.1, -0.4, 2.0, 0.3][i % 4] * (1.0 + i as f64 * 0.1));
    let pred = Tensor::from_fn(vec![3, 4], |i| [0.6, 0.2, -0.5, 3.1][i % 4] - (i as f64) * 0.07);
    out.push((
        "smooth_l1",
        gradcheck(&[pred], OP_H, &|_, v| v[0].smooth_l1(&target, &[1.0, 0.0, 2.0])),
    ));

    let logits = randn(&[4, 2], 1.5, &mut r);
    out.push((
        "cross_entropy",
        gradcheck(&[logits], OP_H, &|_, v| v[0].cross_entropy(&[0, 1, 1, 0])),
    ));
    out
}

/// Composite check: every parameter tensor of a micro backbone+head model
/// at `coords` random coordinates each, plus the worst error seen.
pub fn composite_check(coords: usize, h: f64) -> (usize, f64) {
    let beta = 2;
    let mut model = micro_model(beta, 3);
    let mut r = rng(5);
    let n = 3;
    let scenes = randn(&[n, 3, 16, 16], 1.0, &mut r);
    let exemplars = randn(&[n * beta, 3, 8, 8], 1.0, &mut r);
    let gt = Tensor::from_fn(vec![n, 4], |i| 0.2 + 0.15 * (i % 4) as f64);
    let y = [1usize, 0, 1];

    let g = Graph::new();
    let bb = model.backbone.params.bind(&g);
    let hp = model.head.params.bind(&g);
    let out = model
        .forward(&bb, &hp, g.constant(scenes.clone()), g.constant(exemplars.clone()))
        .unwrap();
    let loss = loss_joint(&out, &gt, &y, 10.0).unwrap();
    g.backward(loss.l_joint).unwrap();
    let grads: Vec<Tensor<f64>> = bb
        .grads()
        .into_iter()
        .chain(hp.grads())
        .map(|gr| gr.expect("every parameter receives a gradient"))
        .collect();
    drop((bb, hp));

    let mut checked = 0;
    let mut worst = 0.0f64;
    let sizes: Vec<usize> = model
        .backbone
        .params
        .iter()
        .chain(model.head.params.iter())
        .map(|(_, t)| t.numel())
        .collect();
    for (k, &size) in sizes.iter().enumerate() {
        for i in sample_coords(size, coords, &mut r) {
            let set = |model: &mut buftrack::model::TrackerModel<f64>, value: Option<f64>| {
                let nb = model.backbone.params.len();
                let t = if k < nb {
                    model.backbone.params.iter_mut().nth(k).unwrap().1
                } else {
                    model.head.params.iter_mut().nth(k - nb).unwrap().1
                };
                let old = t.data()[i];
                if let Some(v) = value {
                    t.data_mut()[i] = v;
                }
                old
            };
            let original = set(&mut model, None);
            set(&mut model, Some(original + h));
            let plus = joint_loss_value(&model, &scenes, &exemplars, &gt, &y);
            set(&mut model, Some(original - h));
            let minus = joint_loss_value(&model, &scenes, &exemplars, &gt, &y);
            set(&mut model, Some(original));
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(grads[k].data()[i], numeric));
            checked += 1;
        }
    }
    (checked, worst)
}
