//! Clip sampling from capture datasets.

use crate::error::{Error, Result};
use crate::mft::ViewMask;
use crate::model::PoseBatch;
use crate::pose::CaptureDataset;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tft::FrameMask;

/// A clip is identified by its sequence and middle frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ClipIndex {
    pub sequence: usize,
    pub centre: usize,
}

/// Middle frames at least `margin` frames from either end, every `stride` frames.
pub fn clip_indices(dataset: &CaptureDataset, sequences: &[usize], margin: usize, stride: usize) -> Result<Vec<ClipIndex>> {
    let frames = dataset.frames_per_sequence;
    if stride == 0 {
        return Err(Error::Contract("clip stride must be positive".into()));
    }
    if frames < 2 * margin + 1 {
        return Err(Error::Contract(format!("sequences of {frames} frames are shorter than a {}-frame clip", 2 * margin + 1)));
    }
    let mut out = Vec::new();
    for &sequence in sequences {
        if sequence >= dataset.sequences.len() {
            return Err(Error::Contract(format!("sequence {sequence} out of {}", dataset.sequences.len())));
        }
        out.extend((margin..frames - margin).step_by(stride).map(|centre| ClipIndex { sequence, centre }));
    }
    Ok(out)
}

/// Splits sequence indices into (train, validation); the last
/// `ceil(fraction * S)` sequences are held out.
pub fn split_sequences(count: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let held = if fraction <= 0.0 { 0 } else { ((fraction * count as f64).ceil() as usize).min(count.saturating_sub(1)) };
    ((0..count - held).collect(), (count - held..count).collect())
}

/// Inputs and targets for a set of clips: `frames` frames centred on each clip's
/// middle frame, restricted to `views` in the given order. Targets are the
/// middle frames' poses, `[B, N, J, 3]` in millimetres.
pub fn assemble<S: Scalar>(
    dataset: &CaptureDataset,
    clips: &[ClipIndex],
    views: &[usize],
    frames: usize,
    view_masks: Vec<ViewMask>,
    frame_masks: Vec<FrameMask>,
) -> Result<(PoseBatch<S>, Tensor<S>)> {
    let j = dataset.num_joints();
    let nv = dataset.num_views;
    if views.is_empty() || views.iter().any(|&v| v >= nv) {
        return Err(Error::Contract(format!("views {views:?} not available in a {nv}-view dataset")));
    }
    if frames.is_multiple_of(2) {
        return Err(Error::Contract(format!("clip length {frames} must be odd")));
    }
    let half = frames / 2;
    let (b, n) = (clips.len(), views.len());
    let mut coords = Vec::with_capacity(b * n * frames * j * 2);
    let mut conf = Vec::with_capacity(b * n * frames * j);
    let mut targets = Vec::with_capacity(b * n * j * 3);
    for clip in clips {
        if clip.centre < half || clip.centre + half >= dataset.frames_per_sequence {
            return Err(Error::Contract(format!("clip at frame {} does not fit {frames} frames", clip.centre)));
        }
        let seq = &dataset.sequences[clip.sequence];
        for &v in views {
            for f in clip.centre - half..=clip.centre + half {
                let slot = (f * nv + v) * j;
                coords.extend(seq.poses2d[slot * 2..(slot + j) * 2].iter().map(|&x| S::of(x as f64)));
                conf.extend(seq.conf[slot..slot + j].iter().map(|&x| S::of(x as f64)));
            }
            let slot = (clip.centre * nv + v) * j;
            targets.extend(seq.poses3d[slot * 3..(slot + j) * 3].iter().map(|&x| S::of(x as f64)));
        }
    }
    let batch = PoseBatch {
        coords: Tensor::new(&[b, n, frames, j, 2], coords)?,
        conf: Tensor::new(&[b, n, frames, j], conf)?,
        view_masks,
        frame_masks,
    };
    batch.validate()?;
    Ok((batch, Tensor::new(&[b, n, j, 3], targets)?))
}
