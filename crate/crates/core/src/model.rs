//! Backbone and head bundled into one trainable tracker model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::head::{Head, HeadConfig, HeadOutput, Prediction};
use crate::params::BoundParams;
use crate::tensor::{load_checkpoint, save_checkpoint, Checkpoint, Element, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerModel<T: Element = f32> {
    pub backbone: Backbone<T>,
    pub head: Head<T>,
}

impl<T: Element> TrackerModel<T> {
    pub fn build(backbone: BackboneConfig, beta_max: usize, seed: u64) -> Result<Self> {
        let head = HeadConfig::for_backbone(&backbone, beta_max)?;
        Self::from_config(
            ModelConfig {
                backbone,
                head,
            },
            seed,
        )
    }

    pub fn from_config(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            backbone: Backbone::build(config.backbone, seed)?,
            head: Head::build(config.head, seed)?,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.config().clone(),
            head: self.head.config().clone(),
        }
    }

    pub fn beta_max(&self) -> usize {
        self.head.config().beta_max
    }

    pub fn scene_size(&self) -> (usize, usize) {
        self.backbone.config().input_scene
    }

    pub fn exemplar_size(&self) -> (usize, usize) {
        self.backbone.config().input_exemplar
    }

    pub fn num_params(&self) -> usize {
        self.backbone.params.num_scalars() + self.head.params.num_scalars()
    }

    /// Full forward: `scenes: N×3×Hs×Ws`, `exemplars: (N·β)×3×He×We` with
    /// each sample's β exemplars contiguous, oldest first.
    pub fn forward<'g>(
        &self,
        backbone: &BoundParams<'g, T>,
        head: &BoundParams<'g, T>,
        scenes: Var<'g, T>,
        exemplars: Var<'g, T>,
    ) -> Result<HeadOutput<'g, T>> {
        let n = scenes.shape()[0];
        let beta = self.beta_max();
        if exemplars.shape()[0] != n * beta {
            return Err(Error::invalid(format!(
                "{} exemplars for {n} scenes; expected {beta} per scene",
                exemplars.shape()[0]
            )));
        }
        let scene_f = self.backbone.forward(backbone, scenes)?;
        let ex_f = self.backbone.forward(backbone, exemplars)?;
        let s = ex_f.shape();
        let stack = ex_f.reshape(vec![n, beta * s[1], s[2], s[3]])?;
        self.head.forward(head, scene_f, stack)
    }

    /// Backbone features of `images`, outside any training graph.
    pub fn featurize(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.backbone.featurize(images)
    }

    /// Head evaluation on precomputed features.
    pub fn predict(&self, scene_features: &Tensor<T>, stack: &Tensor<T>) -> Result<Vec<Prediction>> {
        let g = Graph::new();
        let params = self.head.params.bind_frozen(&g);
        let scene = g.constant(scene_features.clone().with_requires_grad(false));
        let stack = g.constant(stack.clone().with_requires_grad(false));
        Ok(self.head.forward(&params, scene, stack)?.predictions())
    }

    pub fn cast<U: Element>(&self) -> TrackerModel<U> {
        let mut out = TrackerModel::<U>::from_config(self.config(), 0).expect("config already valid");
        out.backbone.params = self.backbone.params.cast();
        out.head.params = self.head.params.cast();
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let metadata = serde_json::to_string(&self.config()).expect("config serializes");
        let tensors = self
            .backbone
            .params
            .iter()
            .chain(self.head.params.iter())
            .map(|(n, t)| (n.to_string(), t.cast::<f32>().with_requires_grad(false)))
            .collect();
        Checkpoint { metadata, tensors }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&ckpt.metadata)
            .map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let mut model = Self::from_config(config, 0)?;
        model.backbone.params.load_from(|n| ckpt.get(n))?;
        model.head.params.load_from(|n| ckpt.get(n))?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}
