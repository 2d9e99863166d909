//! Temporal encoder and regression head.
//!
//! Each view's clip runs through pre-norm transformer encoder layers with
//! sinusoidal positional codes. Masked frames are removed from the key set,
//! and the middle frame's encoding is regressed to a 3D pose.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::graph::Var;
use crate::nn::{dropout, Forward, Initializer, LayerNorm, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Codes for positions `0..frames`: row `t` holds `sin(t / 10000^(2k/C))` at
/// column `2k` and the matching cosine at `2k + 1`.
pub fn positional_encode(frames: usize, channels: usize, max_frames: usize) -> Result<Tensor<f64>> {
    if frames > max_frames {
        return Err(Error::Contract(format!("{frames} frames exceed the code table of {max_frames}")));
    }
    Tensor::new(&[frames, channels], table(0, frames, channels))
}

fn table(start: usize, frames: usize, channels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames * channels);
    for t in start..start + frames {
        for col in 0..channels {
            let k = col / 2;
            let angle = t as f64 / 10000f64.powf(2.0 * k as f64 / channels as f64);
            out.push(if col % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

/// Codes for a centred clip of `frames` inside a table of `max_frames`, so the
/// middle frame always receives the same code.
pub fn clip_codes<S: Scalar>(frames: usize, channels: usize, max_frames: usize) -> Result<Tensor<S>> {
    if frames > max_frames || frames.is_multiple_of(2) || max_frames.is_multiple_of(2) {
        return Err(Error::Contract(format!("clip of {frames} frames in a table of {max_frames} (both must be odd)")));
    }
    let offset = (max_frames - frames) / 2;
    Tensor::from_f64(&[frames, channels], &table(offset, frames, channels))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameMask {
    pub visible: Vec<bool>,
}

impl FrameMask {
    pub fn frames(&self) -> usize {
        self.visible.len()
    }

    pub fn effective(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

/// Keeps the `effective` frames centred on the middle of `full`.
pub fn make_frame_mask(full: usize, effective: usize) -> Result<FrameMask> {
    if full.is_multiple_of(2) || effective.is_multiple_of(2) || effective > full {
        return Err(Error::Contract(format!("frame mask ({full}, {effective}) needs odd 1 <= effective <= full")));
    }
    let lo = (full - effective) / 2;
    Ok(FrameMask { visible: (0..full).map(|t| t >= lo && t < lo + effective).collect() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        dropout: f64,
    ) -> Self {
        let lin = |store: &mut ParamStore<S>, init: &mut Initializer, part: &str, i, o| {
            Linear::register(store, init, &format!("{name}.{part}"), i, o, true)
        };
        Self {
            norm1: LayerNorm::register(store, &format!("{name}.norm1"), width),
            query: lin(store, init, "query", width, width),
            key: lin(store, init, "key", width, width),
            value: lin(store, init, "value", width, width),
            output: lin(store, init, "output", width, width),
            norm2: LayerNorm::register(store, &format!("{name}.norm2"), width),
            ff1: lin(store, init, "ff1", width, hidden),
            ff2: lin(store, init, "ff2", hidden, width),
            heads,
            dropout,
        }
    }

    /// Splits `[S, T, C]` into `[S * H, T, C / H]`.
    fn split_heads<S: Scalar>(&self, cx: &mut Forward<'_, S>, x: Var, s: usize, t: usize, c: usize) -> Result<Var> {
        let h = self.heads;
        let x = cx.graph.reshape(x, &[s, t, h, c / h])?;
        let x = cx.graph.permute(x, &[0, 2, 1, 3])?;
        cx.graph.reshape(x, &[s * h, t, c / h])
    }

    /// Multi-head attention where `keep` has `S * H * T * T` entries.
    pub fn attention<S: Scalar>(&self, cx: &mut Forward<'_, S>, x: Var, keep: &[bool]) -> Result<Var> {
        let shape = cx.graph.shape(x).to_vec();
        let (s, t, c) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let q = self.query.forward(cx, x)?;
        let k = self.key.forward(cx, x)?;
        let v = self.value.forward(cx, x)?;
        let q = self.split_heads(cx, q, s, t, c)?;
        let k = self.split_heads(cx, k, s, t, c)?;
        let v = self.split_heads(cx, v, s, t, c)?;
        let scores = cx.graph.bmm(q, k, false, true)?;
        let scores = cx.graph.scale(scores, S::of(1.0 / ((c / h) as f64).sqrt()))?;
        let weights = cx.graph.masked_softmax(scores, keep, 2)?;
        let mixed = cx.graph.bmm(weights, v, false, false)?;
        let mixed = cx.graph.reshape(mixed, &[s, h, t, c / h])?;
        let mixed = cx.graph.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = cx.graph.reshape(mixed, &[s, t, c])?;
        self.output.forward(cx, mixed)
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Forward<'_, S>, x: Var, keep: &[bool]) -> Result<Var> {
        let h = self.norm1.forward(cx, x)?;
        let h = self.attention(cx, h, keep)?;
        let h = dropout(cx, h, self.dropout)?;
        let x = cx.graph.add(x, h)?;
        let h = self.norm2.forward(cx, x)?;
        let h = self.ff1.forward(cx, h)?;
        let h = cx.graph.relu(h)?;
        let h = dropout(cx, h, self.dropout)?;
        let h = self.ff2.forward(cx, h)?;
        let h = dropout(cx, h, self.dropout)?;
        cx.graph.add(x, h)
    }

    pub fn num_params(&self) -> usize {
        self.norm1.num_params()
            + self.norm2.num_params()
            + [&self.query, &self.key, &self.value, &self.output, &self.ff1, &self.ff2]
                .iter()
                .map(|l| l.num_params())
                .sum::<usize>()
    }

    /// Multiply-accumulates per frame for a clip of `frames`.
    pub fn macs(&self, frames: usize) -> usize {
        let projections = [&self.query, &self.key, &self.value, &self.output, &self.ff1, &self.ff2]
            .iter()
            .map(|l| l.macs())
            .sum::<usize>();
        projections + 2 * frames * self.query.output
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tft {
    pub channels: usize,
    pub max_frames: usize,
    pub joints: usize,
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Tft {
    #[allow(clippy::too_many_arguments)]
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        heads: usize,
        hidden: usize,
        layers: usize,
        max_frames: usize,
        joints: usize,
        dropout: f64,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Contract(format!("{channels} channels cannot split into {heads} heads")));
        }
        if max_frames.is_multiple_of(2) {
            return Err(Error::Contract(format!("clip length {max_frames} must be odd")));
        }
        let layers = (0..layers)
            .map(|l| EncoderLayer::register(store, init, &format!("{name}.layer{l}"), channels, heads, hidden, dropout))
            .collect();
        Ok(Self {
            channels,
            max_frames,
            joints,
            layers,
            norm: LayerNorm::register(store, &format!("{name}.norm"), channels),
            head: Linear::register(store, init, &format!("{name}.head"), channels, 3 * joints, true),
        })
    }

    /// Encodes `x: [S, T, C]` (one clip per row, one frame mask per clip) and
    /// returns the head output for the middle frames, `[S, 3 J]`.
    pub fn forward<S: Scalar>(&self, cx: &mut Forward<'_, S>, x: Var, masks: &[&FrameMask]) -> Result<Var> {
        let shape = cx.graph.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.channels || masks.len() != shape[0] {
            return Err(shape_err("tft", format!("{shape:?} with {} masks", masks.len())));
        }
        let (s, t, c) = (shape[0], shape[1], shape[2]);
        let mid = t / 2;
        for m in masks {
            if m.frames() != t || !m.visible[mid] {
                return Err(Error::InvalidMask(format!("frame mask of {} must cover {t} frames with the middle visible", m.frames())));
            }
        }
        let heads = self.layers.first().map_or(1, |l| l.heads);
        let mut keep = Vec::with_capacity(s * heads * t * t);
        for m in masks {
            for _ in 0..heads * t {
                keep.extend_from_slice(&m.visible);
            }
        }
        let codes = cx.constant(clip_codes(t, c, self.max_frames)?)?;
        let mut h = cx.graph.add_suffix(x, codes)?;
        for layer in &self.layers {
            h = layer.forward(cx, h, &keep)?;
        }
        let flat = cx.graph.reshape(h, &[s * t, c])?;
        let middle = cx.graph.gather_rows(flat, Arc::new((0..s).map(|i| i * t + mid).collect()))?;
        let middle = self.norm.forward(cx, middle)?;
        self.head.forward(cx, middle)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(EncoderLayer::num_params).sum::<usize>() + self.norm.num_params() + self.head.num_params()
    }

    /// Multiply-accumulates per view for a clip of `frames`.
    pub fn macs(&self, frames: usize) -> usize {
        frames * self.layers.iter().map(|l| l.macs(frames)).sum::<usize>() + self.head.macs()
    }
}
