//! Convolutional feature extractor shared by the scene and exemplar branches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::tensor::{conv_output_extent, Element, Graph, Tensor, Var};

/// Image channels every backbone consumes.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Relu,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Linear { .. } => "linear",
        }
    }

    /// Learnable scalars in this layer.
    pub fn num_params(&self) -> usize {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => in_channels * out_channels * kernel * kernel + out_channels,
            LayerSpec::Linear {
                in_features,
                out_features,
            } => in_features * out_features + out_features,
            _ => 0,
        }
    }

    /// Per-sample output shape (`[c, h, w]` or `[f]`) for a per-sample input
    /// shape.
    fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let layer_err = |reason: String| Error::Layer { index, reason };
        match (*self, input) {
            (
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                &[c, h, w],
            ) => {
                if in_channels != c {
                    return Err(layer_err(format!(
                        "conv expects {in_channels} input channels but receives {c}"
                    )));
                }
                let oh = conv_output_extent(h, kernel, stride, padding);
                let ow = conv_output_extent(w, kernel, stride, padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                    _ => Err(layer_err(format!(
                        "conv kernel {kernel} does not fit a {h}×{w} input with padding {padding}"
                    ))),
                }
            }
            (LayerSpec::MaxPool { kernel, stride }, &[c, h, w]) => {
                if h < kernel || w < kernel {
                    return Err(layer_err(format!(
                        "pool window {kernel} larger than {h}×{w} input"
                    )));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            (LayerSpec::Relu, s) => Ok(s.to_vec()),
            (LayerSpec::Flatten, s) => Ok(vec![s.iter().product()]),
            (
                LayerSpec::Linear {
                    in_features,
                    out_features,
                },
                &[f],
            ) => {
                if f != in_features {
                    return Err(layer_err(format!(
                        "linear expects {in_features} features but receives {f}"
                    )));
                }
                Ok(vec![out_features])
            }
            (LayerSpec::Linear { .. }, s) => Err(layer_err(format!(
                "linear needs a flattened input, got shape {s:?}"
            ))),
            (_, s) => Err(layer_err(format!(
                "{} needs a channel×height×width input, got shape {s:?}",
                self.kind()
            ))),
        }
    }

    fn check_nonzero(&self, index: usize) -> Result<()> {
        let fields: &[(&str, usize)] = &match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => vec![
                ("in_channels", in_channels),
                ("out_channels", out_channels),
                ("kernel", kernel),
                ("stride", stride),
            ],
            LayerSpec::MaxPool { kernel, stride } => vec![("kernel", kernel), ("stride", stride)],
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![("in_features", in_features), ("out_features", out_features)],
            LayerSpec::Relu | LayerSpec::Flatten => vec![],
        };
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::Layer {
                index,
                reason: format!("{name} must be at least 1"),
            }),
            None => Ok(()),
        }
    }

    /// Multiply-accumulates for one sample, given the layer's output shape.
    fn macs(&self, output: &[usize]) -> u64 {
        match *self {
            LayerSpec::Conv {
                in_channels,
                kernel,
                ..
            } => {
                let out: usize = output.iter().product();
                (out * in_channels * kernel * kernel) as u64
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => (in_features * out_features) as u64,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    #[serde(default)]
    pub name: String,
    /// Scene crop size `(h, w)` in pixels.
    pub input_scene: (usize, usize),
    /// Exemplar crop size `(h, w)` in pixels.
    pub input_exemplar: (usize, usize),
    pub layers: Vec<LayerSpec>,
}

/// Per-sample FLOP accounting (2 per multiply-accumulate; bias, pooling and
/// activations are not counted).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub per_layer: Vec<LayerFlops>,
    pub total: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub index: usize,
    pub kind: &'static str,
    pub output_shape: Vec<usize>,
    pub flops: u64,
}

pub const PRESETS: [&str; 3] = ["alexnet-canonical", "alexnet-stripped", "desk-tiny"];

fn conv(i: usize, o: usize, k: usize, s: usize, p: usize) -> LayerSpec {
    LayerSpec::Conv {
        in_channels: i,
        out_channels: o,
        kernel: k,
        stride: s,
        padding: p,
    }
}

fn pool(k: usize, s: usize) -> LayerSpec {
    LayerSpec::MaxPool {
        kernel: k,
        stride: s,
    }
}

fn linear(i: usize, o: usize) -> LayerSpec {
    LayerSpec::Linear {
        in_features: i,
        out_features: o,
    }
}

fn alexnet_features() -> Vec<LayerSpec> {
    use LayerSpec::Relu;
    vec![
        conv(3, 64, 11, 4, 2),
        Relu,
        pool(3, 2),
        conv(64, 192, 5, 1, 2),
        Relu,
        pool(3, 2),
        conv(192, 384, 3, 1, 1),
        Relu,
        conv(384, 256, 3, 1, 1),
        Relu,
        conv(256, 256, 3, 1, 1),
        Relu,
        pool(3, 2),
    ]
}

impl BackboneConfig {
    /// Built-in configurations by name; see [`PRESETS`].
    pub fn preset(name: &str) -> Option<Self> {
        use LayerSpec::{Flatten, Relu};
        let config = match name {
            // torchvision AlexNet including its 1000-way classifier, at 224².
            "alexnet-canonical" => {
                let mut layers = alexnet_features();
                layers.extend([
                    Flatten,
                    linear(256 * 6 * 6, 4096),
                    Relu,
                    linear(4096, 4096),
                    Relu,
                    linear(4096, 1000),
                ]);
                BackboneConfig {
                    name: name.into(),
                    input_scene: (224, 224),
                    input_exemplar: (224, 224),
                    layers,
                }
            }
            // Convolutional AlexNet stack at tracking resolutions.
            "alexnet-stripped" => BackboneConfig {
                name: name.into(),
                input_scene: (255, 255),
                input_exemplar: (127, 127),
                layers: alexnet_features(),
            },
            "desk-tiny" => BackboneConfig {
                name: name.into(),
                input_scene: (64, 64),
                input_exemplar: (32, 32),
                layers: vec![
                    conv(3, 16, 5, 2, 2),
                    Relu,
                    pool(2, 2),
                    conv(16, 32, 3, 1, 1),
                    Relu,
                    pool(2, 2),
                    conv(32, 32, 3, 1, 1),
                    Relu,
                ],
            },
            _ => return None,
        };
        Some(config)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self =
            toml::from_str(text).map_err(|e| Error::config("backbone", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("backbone config is always serializable")
    }

    /// Checks the layer chain against both declared input sizes.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("layers", "a backbone needs at least one layer"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.check_nonzero(i)?;
        }
        for (field, size) in [
            ("input_scene", self.input_scene),
            ("input_exemplar", self.input_exemplar),
        ] {
            if size.0 == 0 || size.1 == 0 {
                return Err(Error::config(field, "extents must be positive"));
            }
            self.walk(size, |_, _, _| {})?;
        }
        Ok(())
    }

    /// Per-sample output shape for an `(h, w)` image.
    pub fn output_shape(&self, input: (usize, usize)) -> Result<Vec<usize>> {
        self.walk(input, |_, _, _| {})
    }

    /// Whether the final output is a spatial feature map.
    pub fn is_spatial(&self) -> bool {
        self.output_shape(self.input_scene)
            .map(|s| s.len() == 3)
            .unwrap_or(false)
    }

    fn walk(
        &self,
        input: (usize, usize),
        mut visit: impl FnMut(usize, &LayerSpec, &[usize]),
    ) -> Result<Vec<usize>> {
        let mut shape = vec![IMAGE_CHANNELS, input.0, input.1];
        for (i, layer) in self.layers.iter().enumerate() {
            layer.check_nonzero(i)?;
            shape = layer.output_shape(i, &shape)?;
            visit(i, layer, &shape);
        }
        Ok(shape)
    }
}

/// Exact learnable scalar count of a configuration.
pub fn count_params(config: &BackboneConfig) -> Result<usize> {
    config.validate()?;
    Ok(config.layers.iter().map(LayerSpec::num_params).sum())
}

/// Per-sample FLOPs for an `(h, w)` input.
pub fn count_flops(config: &BackboneConfig, input: (usize, usize)) -> Result<FlopReport> {
    if config.layers.is_empty() {
        return Err(Error::config("layers", "a backbone needs at least one layer"));
    }
    let mut per_layer = Vec::new();
    config.walk(input, |index, layer, out| {
        per_layer.push(LayerFlops {
            index,
            kind: layer.kind(),
            output_shape: out.to_vec(),
            flops: 2 * layer.macs(out),
        })
    })?;
    let total = per_layer.iter().map(|l| l.flops).sum();
    Ok(FlopReport { per_layer, total })
}

/// A configuration plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Element = f32> {
    config: BackboneConfig,
    pub params: ParamSet<T>,
}

pub(crate) fn weight_name(prefix: &str, index: usize) -> String {
    format!("{prefix}.{index}.weight")
}

pub(crate) fn bias_name(prefix: &str, index: usize) -> String {
    format!("{prefix}.{index}.bias")
}

/// He-normal weights (std `sqrt(2 / fan_in)`), zero bias.
pub(crate) fn he_layer<T: Element>(
    rng: &mut ChaCha8Rng,
    weight_shape: Vec<usize>,
    fan_in: usize,
) -> (Tensor<T>, Tensor<T>) {
    let std = (2.0 / fan_in as f64).sqrt();
    let out = weight_shape[0];
    let weight = Tensor::from_fn(weight_shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
    .with_requires_grad(true);
    let bias = Tensor::zeros(vec![out]).with_requires_grad(true);
    (weight, bias)
}

impl<T: Element> Backbone<T> {
    /// Validates `config` and initializes parameters deterministically from
    /// `seed`.
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (i, layer) in config.layers.iter().enumerate() {
            let (shape, fan_in) = match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (
                    vec![out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                ),
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => (vec![out_features, in_features], in_features),
                _ => continue,
            };
            let (w, b) = he_layer(&mut rng, shape, fan_in);
            params.push(weight_name("backbone", i), w);
            params.push(bias_name("backbone", i), b);
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Output shape (with batch) for a batch of `n` images of size `input`.
    pub fn feature_shape(&self, n: usize, input: (usize, usize)) -> Result<Vec<usize>> {
        let mut shape = vec![n];
        shape.extend(self.config.output_shape(input)?);
        Ok(shape)
    }

    /// Featurizes `N×3×H×W` images; `(H, W)` must be the scene or the
    /// exemplar size. Both branches run through this same code path.
    pub fn forward<'g>(&self, params: &BoundParams<'g, T>, images: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = images.shape();
        let ok = match shape.as_slice() {
            &[_, c, h, w] => {
                c == IMAGE_CHANNELS
                    && ((h, w) == self.config.input_scene || (h, w) == self.config.input_exemplar)
            }
            _ => false,
        };
        if !ok {
            return Err(Error::invalid(format!(
                "backbone input {:?} matches neither scene {:?} nor exemplar {:?} (3 channels)",
                shape, self.config.input_scene, self.config.input_exemplar
            )));
        }
        let mut x = images;
        for (i, layer) in self.config.layers.iter().enumerate() {
            x = match *layer {
                LayerSpec::Conv {
                    stride, padding, ..
                } => x.conv2d(
                    params.get(&weight_name("backbone", i))?,
                    params.get(&bias_name("backbone", i))?,
                    stride,
                    padding,
                )?,
                LayerSpec::MaxPool { kernel, stride } => x.max_pool2d(kernel, stride)?,
                LayerSpec::Relu => x.relu(),
                LayerSpec::Flatten => x.flatten()?,
                LayerSpec::Linear { .. } => x.linear(
                    params.get(&weight_name("backbone", i))?,
                    params.get(&bias_name("backbone", i))?,
                )?,
            };
        }
        Ok(x)
    }

    /// Inference-only featurization outside any training graph.
    pub fn featurize(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let params = self.params.bind_frozen(&g);
        let x = g.constant(images.clone().with_requires_grad(false));
        let out = self.forward(&params, x)?;
        Ok((*out.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_alexnet_layer_counts() {
        let cfg = BackboneConfig::preset("alexnet-canonical").unwrap();
        let per: Vec<usize> = cfg
            .layers
            .iter()
            .map(LayerSpec::num_params)
            .filter(|&n| n > 0)
            .collect();
        assert_eq!(
            per,
            [23296, 307392, 663936, 884992, 590080, 37752832, 16781312, 4097000]
        );
        assert_eq!(count_params(&cfg).unwrap(), 61_100_840);
    }

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            BackboneConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(BackboneConfig::preset("nope").is_none());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = BackboneConfig::preset("desk-tiny").unwrap();
        let text = cfg.to_toml_string();
        assert_eq!(BackboneConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn zero_sized_layer_names_index() {
        let cfg = BackboneConfig {
            name: String::new(),
            input_scene: (8, 8),
            input_exemplar: (8, 8),
            layers: vec![LayerSpec::Relu, pool(0, 1)],
        };
        match cfg.validate() {
            Err(Error::Layer { index: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
