//! Matching head: fuses scene features with the exemplar stack and predicts a
//! box plus a two-class scene-objectness score. Also hosts the loss terms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{bias_name, he_layer, weight_name, BackboneConfig};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::tensor::loss::{cross_entropy_forward, smooth_l1_forward};
use crate::tensor::{Element, Tensor, Var};

pub const DEFAULT_ALPHA: f64 = 10.0;

/// Architecture of the head. Feature extents are those of the backbone's
/// scene output; the exemplar stack is resized to them before fusion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub scene_channels: usize,
    pub exemplar_channels: usize,
    pub beta_max: usize,
    pub feature_size: (usize, usize),
    pub conv_channels: usize,
    pub hidden: usize,
}

impl HeadConfig {
    pub fn for_backbone(backbone: &BackboneConfig, beta_max: usize) -> Result<Self> {
        let scene = backbone.output_shape(backbone.input_scene)?;
        let exemplar = backbone.output_shape(backbone.input_exemplar)?;
        match (scene.as_slice(), exemplar.as_slice()) {
            (&[cs, h, w], &[ce, _, _]) => Ok(Self {
                scene_channels: cs,
                exemplar_channels: ce,
                beta_max,
                feature_size: (h, w),
                conv_channels: 32,
                hidden: 64,
            }),
            _ => Err(Error::config(
                "backbone",
                format!(
                    "`{}` ends in flat features; the head needs spatial feature maps",
                    backbone.name
                ),
            )),
        }
    }

    pub fn fused_channels(&self) -> usize {
        self.scene_channels + self.beta_max * self.exemplar_channels
    }
}

/// Detached per-sample head output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Normalized `(cx, cy, w, h)` within the search region, each in `[0, 1]`.
    pub bbox: [f64; 4],
    /// Class 0 = absent, class 1 = present.
    pub obj_logits: [f64; 2],
}

impl Prediction {
    /// Softmax probability of class 1 (target present).
    pub fn objectness(&self) -> f64 {
        let [a, p] = self.obj_logits;
        1.0 / (1.0 + (a - p).exp())
    }
}

/// Graph outputs of [`Head::forward`].
#[derive(Clone, Copy)]
pub struct HeadOutput<'g, T: Element> {
    /// `N×4`, sigmoid-squashed.
    pub bbox: Var<'g, T>,
    /// `N×2` raw logits.
    pub obj_logits: Var<'g, T>,
}

impl<T: Element> HeadOutput<'_, T> {
    pub fn predictions(&self) -> Vec<Prediction> {
        let b = self.bbox.value();
        let l = self.obj_logits.value();
        b.data()
            .chunks_exact(4)
            .zip(l.data().chunks_exact(2))
            .map(|(b, l)| Prediction {
                bbox: [b[0].as_f64(), b[1].as_f64(), b[2].as_f64(), b[3].as_f64()],
                obj_logits: [l[0].as_f64(), l[1].as_f64()],
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head<T: Element = f32> {
    config: HeadConfig,
    pub params: ParamSet<T>,
}

const CONV1: usize = 0;
const CONV2: usize = 1;
const FC: usize = 2;
const BBOX: usize = 3;
const OBJ: usize = 4;

impl<T: Element> Head<T> {
    pub fn build(config: HeadConfig, seed: u64) -> Result<Self> {
        for (field, v) in [
            ("scene_channels", config.scene_channels),
            ("exemplar_channels", config.exemplar_channels),
            ("beta_max", config.beta_max),
            ("feature_size", config.feature_size.0.min(config.feature_size.1)),
            ("conv_channels", config.conv_channels),
            ("hidden", config.hidden),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144);
        let (fused, c) = (config.fused_channels(), config.conv_channels);
        let flat = c * config.feature_size.0 * config.feature_size.1;
        let layers = [
            (CONV1, vec![c, fused, 3, 3], fused * 9),
            (CONV2, vec![c, c, 3, 3], c * 9),
            (FC, vec![config.hidden, flat], flat),
            (BBOX, vec![4, config.hidden], config.hidden),
            (OBJ, vec![2, config.hidden], config.hidden),
        ];
        let mut params = ParamSet::new();
        for (i, shape, fan_in) in layers {
            let (w, b) = he_layer(&mut rng, shape, fan_in);
            params.push(weight_name("head", i), w);
            params.push(bias_name("head", i), b);
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    /// Names of the parameters feeding only the box output.
    pub fn bbox_param_names() -> [String; 2] {
        [weight_name("head", BBOX), bias_name("head", BBOX)]
    }

    /// `scene: N×Cs×h×w`, `stack: N×(β·Ce)×h'×w'`.
    pub fn forward<'g>(
        &self,
        params: &BoundParams<'g, T>,
        scene: Var<'g, T>,
        stack: Var<'g, T>,
    ) -> Result<HeadOutput<'g, T>> {
        let cfg = &self.config;
        let (ss, ks) = (scene.shape(), stack.shape());
        let (n, h, w) = match ss.as_slice() {
            &[n, c, h, w] if c == cfg.scene_channels => (n, h, w),
            _ => return Err(Error::shape("head scene features", &ss, &ks)),
        };
        if ks.len() != 4 || ks[0] != n || ks[1] != cfg.beta_max * cfg.exemplar_channels {
            return Err(Error::invalid(format!(
                "head expects an exemplar stack of {}×{} channels for batch {n}, got {ks:?}",
                cfg.beta_max, cfg.exemplar_channels
            )));
        }
        if (h, w) != cfg.feature_size {
            return Err(Error::shape(
                "head scene features",
                &[cfg.feature_size.0, cfg.feature_size.1],
                &[h, w],
            ));
        }
        let stack = if (ks[2], ks[3]) == (h, w) {
            stack
        } else {
            stack.resize_bilinear(h, w)?
        };
        let p = |i: usize| -> Result<(Var<'g, T>, Var<'g, T>)> {
            Ok((
                params.get(&weight_name("head", i))?,
                params.get(&bias_name("head", i))?,
            ))
        };
        let fused = params.graph().concat_channels(&[scene, stack])?;
        let (w1, b1) = p(CONV1)?;
        let (w2, b2) = p(CONV2)?;
        let (wf, bf) = p(FC)?;
        let (wb, bb) = p(BBOX)?;
        let (wo, bo) = p(OBJ)?;
        let x = fused.conv2d(w1, b1, 1, 1)?.relu();
        let x = x.conv2d(w2, b2, 1, 1)?.relu();
        let hidden = x.flatten()?.linear(wf, bf)?.relu();
        Ok(HeadOutput {
            bbox: hidden.linear(wb, bb)?.sigmoid(),
            obj_logits: hidden.linear(wo, bo)?,
        })
    }
}

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct JointLossTerms {
    pub l_bbox: f64,
    pub l_obj: f64,
    pub l_joint: f64,
    pub alpha: f64,
}

/// Differentiable loss terms.
#[derive(Clone, Copy)]
pub struct JointLoss<'g, T: Element> {
    pub l_bbox: Var<'g, T>,
    pub l_obj: Var<'g, T>,
    pub l_joint: Var<'g, T>,
    pub alpha: f64,
}

impl<T: Element> JointLoss<'_, T> {
    pub fn terms(&self) -> JointLossTerms {
        JointLossTerms {
            l_bbox: self.l_bbox.value().item().as_f64(),
            l_obj: self.l_obj.value().item().as_f64(),
            l_joint: self.l_joint.value().item().as_f64(),
            alpha: self.alpha,
        }
    }
}

fn check_labels(y_obj: &[usize]) -> Result<()> {
    match y_obj.iter().find(|&&y| y > 1) {
        Some(y) => Err(Error::invalid(format!("objectness label {y} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// Box loss with the bbox term of each sample weighted by its `y_obj`, plus
/// `alpha` times the objectness cross-entropy. Samples with `y_obj = 0`
/// contribute nothing, not even a zero-valued gradient path, to the box term.
pub fn loss_joint<'g, T: Element>(
    pred: &HeadOutput<'g, T>,
    gt_bbox: &Tensor<T>,
    y_obj: &[usize],
    alpha: f64,
) -> Result<JointLoss<'g, T>> {
    if !(alpha >= 0.0) {
        return Err(Error::config("alpha", format!("{alpha} is negative")));
    }
    check_labels(y_obj)?;
    let weights: Vec<T> = y_obj.iter().map(|&y| T::of(y as f64)).collect();
    let l_bbox = pred.bbox.smooth_l1(gt_bbox, &weights)?;
    let l_obj = pred.obj_logits.cross_entropy(y_obj)?;
    let l_joint = l_bbox.add(l_obj.scale(T::of(alpha)))?;
    Ok(JointLoss {
        l_bbox,
        l_obj,
        l_joint,
        alpha,
    })
}

/// Mean over `M` rows of the summed per-side smooth-L1 divided by 4:
/// `z²/(8M)` for `|z| < 1`, `(|z| − 0.5)/(4M)` otherwise.
pub fn loss_bbox(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64> {
    match pred.shape() {
        [_, 4] if pred.shape() == gt.shape() => {}
        _ => return Err(Error::shape("loss_bbox", pred.shape(), gt.shape())),
    }
    if !pred.data().iter().chain(gt.data()).all(|v| v.is_finite()) {
        return Err(Error::invalid("loss_bbox: non-finite input"));
    }
    let m = pred.shape()[0];
    let weights = vec![1.0; m];
    Ok(smooth_l1_forward(pred.data(), gt.data(), &weights, 4))
}

/// Mean negative log-softmax of the true class over `N×2` logits.
pub fn loss_obj(logits: &Tensor<f64>, y_obj: &[usize]) -> Result<f64> {
    check_labels(y_obj)?;
    match logits.shape() {
        [n, 2] if *n == y_obj.len() => {}
        other => return Err(Error::shape("loss_obj", other, &[y_obj.len(), 2])),
    }
    Ok(cross_entropy_forward(logits.data(), y_obj, 2).0)
}
