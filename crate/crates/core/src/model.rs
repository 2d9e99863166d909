//! The full lifting network: embedding, view fusion, temporal encoder.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::features::{Embedding, FeatureExtractor};
use crate::graph::Var;
use crate::mft::{mft_forward, Fusion, Mft, ViewMask};
use crate::nn::{Forward, Initializer, ParamStore};
use crate::pose::SkeletonTopology;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;
use crate::tft::{FrameMask, Tft};

/// Head outputs are decimetres; predictions are reported in millimetres.
pub const OUTPUT_SCALE_MM: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width `C`.
    pub channels: usize,
    /// Group count `D` of the fusion block; `K = C / D`.
    pub groups: usize,
    /// Longest (odd) clip the positional table supports.
    pub max_frames: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub encoder_layers: usize,
    pub dropout: f64,
    pub embedding: Embedding,
    pub fusion: Fusion,
    pub topology: SkeletonTopology,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 600,
            groups: 20,
            max_frames: 7,
            heads: 4,
            ffn_ratio: 2,
            encoder_layers: 2,
            dropout: 0.1,
            embedding: Embedding::Caa,
            fusion: Fusion::Full,
            topology: SkeletonTopology::h36m(),
        }
    }
}

impl ModelConfig {
    /// The reduced configuration used for desk-scale experiments.
    pub fn desk() -> Self {
        Self { channels: 120, ..Self::default() }
    }

    pub fn group_width(&self) -> usize {
        self.channels.checked_div(self.groups).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.channels == 0 || !self.channels.is_multiple_of(2) {
            return bad(format!("channels {} must be even and positive", self.channels));
        }
        if self.groups == 0 || !self.channels.is_multiple_of(self.groups) {
            return bad(format!("channels {} not divisible into {} groups", self.channels, self.groups));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return bad(format!("channels {} not divisible into {} heads", self.channels, self.heads));
        }
        if self.max_frames.is_multiple_of(2) {
            return bad(format!("max_frames {} must be odd", self.max_frames));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ffn_ratio == 0 || self.encoder_layers == 0 {
            return bad("ffn_ratio and encoder_layers must be positive".into());
        }
        self.topology.validate()
    }
}

/// One mini-batch of clips. `coords` is `[B, N, T, J, 2]`, `conf` is
/// `[B, N, T, J]`; each clip carries its own view and frame mask.
#[derive(Clone, Debug)]
pub struct PoseBatch<S> {
    pub coords: Tensor<S>,
    pub conf: Tensor<S>,
    pub view_masks: Vec<ViewMask>,
    pub frame_masks: Vec<FrameMask>,
}

impl<S: Scalar> PoseBatch<S> {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.conf.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// A batch with full fusion and every frame visible.
    pub fn unmasked(coords: Tensor<S>, conf: Tensor<S>) -> Result<Self> {
        let s = conf.shape().to_vec();
        if s.len() != 4 {
            return Err(shape_err("batch", format!("conf must be [B, N, T, J], got {s:?}")));
        }
        Ok(Self {
            view_masks: vec![ViewMask::full(s[1]); s[0]],
            frame_masks: vec![FrameMask { visible: vec![true; s[2]] }; s[0]],
            coords,
            conf,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.conf.shape();
        if s.len() != 4 {
            return Err(shape_err("batch", format!("conf must be [B, N, T, J], got {s:?}")));
        }
        let (b, n, t, j) = (s[0], s[1], s[2], s[3]);
        if self.coords.shape() != [b, n, t, j, 2] {
            return Err(shape_err("batch", format!("coords {:?} vs conf {s:?}", self.coords.shape())));
        }
        if self.view_masks.len() != b || self.frame_masks.len() != b {
            return Err(Error::Contract(format!("{b} clips need {b} view and frame masks")));
        }
        if t % 2 == 0 {
            return Err(Error::Contract(format!("clip length {t} must be odd")));
        }
        Ok(())
    }
}

/// Layer layout of an initialized network; the weights live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct MtfModel {
    pub config: ModelConfig,
    pub features: FeatureExtractor,
    pub mft: Option<Mft>,
    pub tft: Tft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub features: usize,
    pub mft: usize,
    pub tft: usize,
    pub total: usize,
}

impl MtfModel {
    /// Builds the layer layout and samples initial weights from `seed`.
    pub fn init<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<S>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed::rng(seed, "init", 0));
        let c = config.channels;
        let features =
            FeatureExtractor::register(&mut store, &mut init, "features", &config.topology, c, config.embedding, config.dropout)?;
        let mft = Mft::register(&mut store, &mut init, "mft", c, config.groups, config.fusion)?;
        let tft = Tft::register(
            &mut store,
            &mut init,
            "tft",
            c,
            config.heads,
            config.ffn_ratio * c,
            config.encoder_layers,
            config.max_frames,
            config.topology.num_joints(),
            config.dropout,
        )?;
        Ok((Self { config: config.clone(), features, mft, tft }, store))
    }

    /// The layer layout for `config`, checking that `store` holds exactly its tensors.
    pub fn bind<S: Scalar>(config: &ModelConfig, store: &ParamStore<S>) -> Result<Self> {
        let (model, reference) = Self::init::<S>(config, 0)?;
        let describe = |s: &ParamStore<S>| -> Vec<(String, Vec<usize>)> {
            s.params().iter().chain(s.buffers()).map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
        };
        if describe(&reference) != describe(store) {
            return Err(Error::Format("stored tensors do not match the model configuration".into()));
        }
        Ok(model)
    }

    /// Predicted root-relative poses in millimetres, `[B, N, J, 3]`.
    pub fn forward<S: Scalar>(&self, cx: &mut Forward<'_, S>, batch: &PoseBatch<S>) -> Result<Var> {
        batch.validate()?;
        let (b, n, t, j) = batch.dims();
        if j != self.config.topology.num_joints() {
            return Err(Error::Contract(format!("batch has {j} joints, model {}", self.config.topology.num_joints())));
        }
        if t > self.config.max_frames {
            return Err(Error::Contract(format!("clip of {t} frames exceeds max_frames {}", self.config.max_frames)));
        }
        let c = self.config.channels;
        let coords = batch.coords.reshape(&[b * n * t, j, 2])?;
        let conf = batch.conf.reshape(&[b * n * t, j])?;
        let x = self.features.forward(cx, &coords, &conf)?;
        let x = cx.graph.reshape(x, &[b, n, t, c])?;
        let x = mft_forward(cx, self.mft.as_ref(), x, &batch.view_masks)?;
        let x = cx.graph.reshape(x, &[b * n, t, c])?;
        let masks: Vec<&FrameMask> = batch.frame_masks.iter().flat_map(|m| std::iter::repeat_n(m, n)).collect();
        let y = self.tft.forward(cx, x, &masks)?;
        let y = cx.graph.scale(y, S::of(OUTPUT_SCALE_MM))?;
        cx.graph.reshape(y, &[b, n, j, 3])
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        let features = self.features.num_params();
        let mft = self.mft.as_ref().map_or(0, Mft::num_params);
        let tft = self.tft.num_params();
        ParamBreakdown { features, mft, tft, total: features + mft + tft }
    }

    /// Forward multiply-accumulates for one sample of `views` views and `frames` frames.
    pub fn macs(&self, views: usize, frames: usize) -> usize {
        views * frames * self.features.macs()
            + frames * self.mft.as_ref().map_or(0, |m| m.macs(views))
            + views * self.tft.macs(frames)
    }
}
