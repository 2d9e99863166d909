//! Evaluation over clip sets and the view-count by clip-length grid.

use serde::{Deserialize, Serialize};

use crate::data::{assemble, clip_indices};
use crate::error::{Error, Result};
use crate::mft::ViewMask;
use crate::model::{MtfModel, PoseBatch};
use crate::nn::{Forward, ParamStore};
use crate::pose::{mpjpe, CaptureDataset, Pose3D};
use crate::seed;
use crate::tensor::Tensor;
use crate::tft::FrameMask;

/// Produces `[B, N, J, 3]` millimetre poses for a batch. `targets` is offered
/// so reference predictors can be evaluated through the same path.
pub trait Predictor {
    fn predict(&self, batch: &PoseBatch<f32>, targets: &Tensor<f32>) -> Result<Vec<f64>>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a MtfModel,
    pub store: &'a ParamStore<f32>,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, batch: &PoseBatch<f32>, _targets: &Tensor<f32>) -> Result<Vec<f64>> {
        let mut cx = Forward::new(self.store, false, seed::rng(0, "eval", 0));
        let out = self.model.forward(&mut cx, batch)?;
        Ok(cx.graph.value(out).data().iter().map(|&v| v as f64).collect())
    }
}

/// Returns the ground truth.
pub struct GroundTruth;

impl Predictor for GroundTruth {
    fn predict(&self, _batch: &PoseBatch<f32>, targets: &Tensor<f32>) -> Result<Vec<f64>> {
        Ok(targets.data().iter().map(|&v| v as f64).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSpec {
    /// Views fed to the model, in order.
    pub views: Vec<usize>,
    /// Clip length seen by the model.
    pub frames: usize,
    /// Clip centres keep this distance from sequence ends, so specs with
    /// different `frames` share one set of middle frames.
    pub margin: usize,
    pub stride: usize,
    pub batch_size: usize,
    /// Off-diagonal view pairs dropped at this rate, one mask per clip.
    /// Zero means full fusion.
    pub mask_rate: f64,
    pub mask_seed: u64,
}

impl EvalSpec {
    pub fn new(views: Vec<usize>, frames: usize, margin: usize, stride: usize, batch_size: usize) -> Self {
        Self { views, frames, margin, stride, batch_size, mask_rate: 0.0, mask_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub mpjpe: f64,
    pub clips: usize,
    pub poses: usize,
}

/// Mean MPJPE over every (clip, view) middle-frame pose with all frames of
/// the clip visible.
pub fn evaluate(predictor: &dyn Predictor, dataset: &CaptureDataset, sequences: &[usize], spec: &EvalSpec) -> Result<EvalSummary> {
    if spec.frames.is_multiple_of(2) || spec.frames > 2 * spec.margin + 1 {
        return Err(Error::Contract(format!("clip length {} must be odd and fit the margin {}", spec.frames, spec.margin)));
    }
    if !(0.0..=1.0).contains(&spec.mask_rate) {
        return Err(Error::Contract(format!("mask rate {} outside [0, 1]", spec.mask_rate)));
    }
    let mut mask_rng = seed::rng(spec.mask_seed, "eval-mask", 0);
    let clips = clip_indices(dataset, sequences, spec.margin, spec.stride)?;
    let j = dataset.num_joints();
    let n = spec.views.len();
    let (mut total, mut poses) = (0.0, 0usize);
    for chunk in clips.chunks(spec.batch_size.max(1)) {
        let (batch, targets) = assemble::<f32>(
            dataset,
            chunk,
            &spec.views,
            spec.frames,
            (0..chunk.len()).map(|_| ViewMask::sample(n, spec.mask_rate, &mut mask_rng)).collect(),
            vec![FrameMask { visible: vec![true; spec.frames] }; chunk.len()],
        )?;
        let pred = predictor.predict(&batch, &targets)?;
        if pred.len() != targets.len() {
            return Err(Error::Contract(format!("predictor returned {} values for {} targets", pred.len(), targets.len())));
        }
        for (p, t) in pred.chunks(j * 3).zip(targets.data().chunks(j * 3)) {
            let p = Pose3D { coords: p.chunks(3).map(|c| [c[0], c[1], c[2]]).collect() };
            let t = Pose3D { coords: t.chunks(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect() };
            total += mpjpe(&p, &t, &dataset.topology)?;
            poses += 1;
        }
    }
    if poses == 0 {
        return Err(Error::Contract("no clips to evaluate".into()));
    }
    Ok(EvalSummary { mpjpe: total / poses as f64, clips: clips.len(), poses })
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

/// MPJPE for each view count (rows) and clip length (columns). Each cell
/// averages over every subset of that many views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub views: Vec<usize>,
    pub frames: Vec<usize>,
    pub mpjpe: Vec<Vec<f64>>,
}

impl EvalGrid {
    pub fn get(&self, views: usize, frames: usize) -> Option<f64> {
        let r = self.views.iter().position(|&v| v == views)?;
        let c = self.frames.iter().position(|&t| t == frames)?;
        Some(self.mpjpe[r][c])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("views");
        for t in &self.frames {
            out.push_str(&format!(",T={t}"));
        }
        out.push('\n');
        for (n, row) in self.views.iter().zip(&self.mpjpe) {
            out.push_str(&n.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Elementwise mean of grids with identical axes.
    pub fn mean(grids: &[EvalGrid]) -> Result<EvalGrid> {
        let first = grids.first().ok_or_else(|| Error::Contract("no grids to average".into()))?;
        if grids.iter().any(|g| g.views != first.views || g.frames != first.frames) {
            return Err(Error::Contract("grids have different axes".into()));
        }
        let k = grids.len() as f64;
        let mpjpe = (0..first.views.len())
            .map(|r| (0..first.frames.len()).map(|c| grids.iter().map(|g| g.mpjpe[r][c]).sum::<f64>() / k).collect())
            .collect();
        Ok(EvalGrid { views: first.views.clone(), frames: first.frames.clone(), mpjpe })
    }
}

pub fn evaluate_grid(
    predictor: &dyn Predictor,
    dataset: &CaptureDataset,
    sequences: &[usize],
    view_counts: &[usize],
    frame_counts: &[usize],
    stride: usize,
    batch_size: usize,
) -> Result<EvalGrid> {
    let spec = EvalSpec::new(Vec::new(), 1, 0, stride, batch_size);
    evaluate_grid_with(predictor, dataset, sequences, view_counts, frame_counts, &spec)
}

/// [`evaluate_grid`] with stride, batch size and masking taken from `base`;
/// its views, frames and margin are ignored.
pub fn evaluate_grid_with(
    predictor: &dyn Predictor,
    dataset: &CaptureDataset,
    sequences: &[usize],
    view_counts: &[usize],
    frame_counts: &[usize],
    base: &EvalSpec,
) -> Result<EvalGrid> {
    let margin = frame_counts.iter().copied().max().unwrap_or(1) / 2;
    let mut rows = Vec::with_capacity(view_counts.len());
    for &n in view_counts {
        let subsets = combinations(dataset.num_views, n);
        if subsets.is_empty() {
            return Err(Error::Contract(format!("{n} views requested from a {}-view dataset", dataset.num_views)));
        }
        let mut row = Vec::with_capacity(frame_counts.len());
        for &t in frame_counts {
            let mut acc = 0.0;
            for views in &subsets {
                let spec = EvalSpec { views: views.clone(), frames: t, margin, ..base.clone() };
                acc += evaluate(predictor, dataset, sequences, &spec)?.mpjpe;
            }
            row.push(acc / subsets.len() as f64);
        }
        rows.push(row);
    }
    Ok(EvalGrid { views: view_counts.to_vec(), frames: frame_counts.to_vec(), mpjpe: rows })
}
