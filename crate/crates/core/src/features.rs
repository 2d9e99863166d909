//! Per-frame embedding of 2D detections.
//!
//! Joints are split into the topology's five partitions. Each partition runs
//! through its own branch and the branch outputs are concatenated and shrunk
//! back to the model width.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::Var;
use crate::nn::{dropout, BatchNorm, Forward, Initializer, Linear, ParamStore};
use crate::pose::{Detection2D, SkeletonTopology};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a branch combines coordinates and confidences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embedding {
    /// `F_res(F_p(p) + a p)` with `a = reshape(F_c(c))`.
    #[default]
    Caa,
    /// `F_res(F_p(p))`; confidences are ignored.
    NoConfidence,
    /// `F_res(F([p | c]))`.
    Concatenate,
}

/// Per-partition coordinates `p^g` (interleaved x, y) and confidences `c^g`,
/// joints in ascending index order.
pub fn partition_pose(det: &Detection2D, topology: &SkeletonTopology) -> Vec<(Vec<f64>, Vec<f64>)> {
    topology
        .partitions
        .iter()
        .map(|part| {
            let p = part.iter().flat_map(|&k| det.coords[k]).collect();
            let c = part.iter().map(|&k| det.conf[k]).collect();
            (p, c)
        })
        .collect()
}

/// Batched [`partition_pose`]: `coords` is `[rows, J, 2]` and `conf` is
/// `[rows, J]`; returns `([rows, 2 J_g], [rows, J_g])` per partition.
pub fn partition_batch<S: Scalar>(
    coords: &Tensor<S>,
    conf: &Tensor<S>,
    topology: &SkeletonTopology,
) -> Result<Vec<(Tensor<S>, Tensor<S>)>> {
    let j = topology.num_joints();
    let rows = conf.len() / j;
    if conf.len() != rows * j || coords.len() != rows * j * 2 {
        return Err(shape_err("partition", format!("coords {:?}, conf {:?} for {j} joints", coords.shape(), conf.shape())));
    }
    let (cv, fv) = (coords.data(), conf.data());
    topology
        .partitions
        .iter()
        .map(|part| {
            let jg = part.len();
            let mut p = Vec::with_capacity(rows * 2 * jg);
            let mut c = Vec::with_capacity(rows * jg);
            for r in 0..rows {
                for &k in part {
                    p.push(cv[(r * j + k) * 2]);
                    p.push(cv[(r * j + k) * 2 + 1]);
                    c.push(fv[r * j + k]);
                }
            }
            Ok((Tensor::new(&[rows, 2 * jg], p)?, Tensor::new(&[rows, jg], c)?))
        })
        .collect()
}

/// `x + drop(relu(bn(W2 drop(relu(bn(W1 x))))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub lin1: Linear,
    pub bn1: BatchNorm,
    pub lin2: Linear,
    pub bn2: BatchNorm,
    pub dropout: f64,
}

impl ResBlock {
    pub fn register<S: Scalar>(store: &mut ParamStore<S>, init: &mut Initializer, name: &str, width: usize, dropout: f64) -> Self {
        Self {
            lin1: Linear::register(store, init, &format!("{name}.lin1"), width, width, true),
            bn1: BatchNorm::register(store, &format!("{name}.bn1"), width),
            lin2: Linear::register(store, init, &format!("{name}.lin2"), width, width, true),
            bn2: BatchNorm::register(store, &format!("{name}.bn2"), width),
            dropout,
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let mut h = x;
        for (lin, bn) in [(&self.lin1, &self.bn1), (&self.lin2, &self.bn2)] {
            h = lin.forward(cx, h)?;
            h = bn.forward(cx, h)?;
            h = cx.graph.relu(h)?;
            h = dropout(cx, h, self.dropout)?;
        }
        cx.graph.add(x, h)
    }

    pub fn num_params(&self) -> usize {
        self.lin1.num_params() + self.bn1.num_params() + self.lin2.num_params() + self.bn2.num_params()
    }

    pub fn macs(&self) -> usize {
        self.lin1.macs() + self.lin2.macs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BranchInput {
    Caa { fp: Linear, fc: Linear },
    NoConfidence { fp: Linear },
    Concatenate { f: Linear },
}

/// One partition's branch mapping `(p^g, c^g)` to a `C/2` feature.
#[derive(Clone, Debug, PartialEq)]
pub struct CaaBranch {
    pub joints: usize,
    pub width: usize,
    pub input: BranchInput,
    pub res: [ResBlock; 2],
}

impl CaaBranch {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        joints: usize,
        width: usize,
        embedding: Embedding,
        dropout: f64,
    ) -> Self {
        let input = match embedding {
            Embedding::Caa => BranchInput::Caa {
                fp: Linear::register(store, init, &format!("{name}.fp"), 2 * joints, width, true),
                fc: Linear::register(store, init, &format!("{name}.fc"), joints, width * 2 * joints, true),
            },
            Embedding::NoConfidence => {
                BranchInput::NoConfidence { fp: Linear::register(store, init, &format!("{name}.fp"), 2 * joints, width, true) }
            }
            Embedding::Concatenate => {
                BranchInput::Concatenate { f: Linear::register(store, init, &format!("{name}.f"), 3 * joints, width, true) }
            }
        };
        let res = [
            ResBlock::register(store, init, &format!("{name}.res0"), width, dropout),
            ResBlock::register(store, init, &format!("{name}.res1"), width, dropout),
        ];
        Self { joints, width, input, res }
    }

    /// The modulated embedding before `F_res`, i.e. `F_p(p) + a p` for CAA.
    pub fn embed<S: Scalar>(&self, cx: &mut Forward<'_, S>, p: Var, c: Var) -> Result<Var> {
        let rows = cx.graph.shape(p)[0];
        if cx.graph.shape(p) != [rows, 2 * self.joints] || cx.graph.shape(c) != [rows, self.joints] {
            return Err(Error::Contract(format!(
                "branch of {} joints got p {:?} and c {:?}",
                self.joints,
                cx.graph.shape(p),
                cx.graph.shape(c)
            )));
        }
        match &self.input {
            BranchInput::Caa { fp, fc } => {
                let base = fp.forward(cx, p)?;
                let a = fc.forward(cx, c)?;
                let a = cx.graph.reshape(a, &[rows, self.width, 2 * self.joints])?;
                let p3 = cx.graph.reshape(p, &[rows, 2 * self.joints, 1])?;
                let ap = cx.graph.bmm(a, p3, false, false)?;
                let ap = cx.graph.reshape(ap, &[rows, self.width])?;
                cx.graph.add(base, ap)
            }
            BranchInput::NoConfidence { fp } => fp.forward(cx, p),
            BranchInput::Concatenate { f } => {
                let pc = cx.graph.concat(&[p, c])?;
                f.forward(cx, pc)
            }
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Forward<'_, S>, p: Var, c: Var) -> Result<Var> {
        let mut h = self.embed(cx, p, c)?;
        for block in &self.res {
            h = block.forward(cx, h)?;
        }
        Ok(h)
    }

    pub fn num_params(&self) -> usize {
        let input = match &self.input {
            BranchInput::Caa { fp, fc } => fp.num_params() + fc.num_params(),
            BranchInput::NoConfidence { fp } => fp.num_params(),
            BranchInput::Concatenate { f } => f.num_params(),
        };
        input + self.res.iter().map(ResBlock::num_params).sum::<usize>()
    }

    pub fn macs(&self) -> usize {
        let input = match &self.input {
            BranchInput::Caa { fp, fc } => fp.macs() + fc.macs() + self.width * 2 * self.joints,
            BranchInput::NoConfidence { fp } => fp.macs(),
            BranchInput::Concatenate { f } => f.macs(),
        };
        input + self.res.iter().map(ResBlock::macs).sum::<usize>()
    }
}

/// Applies `caa_branch` for a single partition; a thin wrapper for callers
/// working with one branch at a time.
pub fn caa_branch<S: Scalar>(cx: &mut Forward<'_, S>, branch: &CaaBranch, p: &Tensor<S>, c: &Tensor<S>) -> Result<Var> {
    let p = cx.constant(p.clone())?;
    let c = cx.constant(c.clone())?;
    branch.forward(cx, p, c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub topology: SkeletonTopology,
    pub channels: usize,
    pub branches: Vec<CaaBranch>,
    pub shrink: Linear,
}

impl FeatureExtractor {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        topology: &SkeletonTopology,
        channels: usize,
        embedding: Embedding,
        dropout: f64,
    ) -> Result<Self> {
        if !channels.is_multiple_of(2) || channels == 0 {
            return Err(Error::Contract(format!("feature width {channels} must be even and positive")));
        }
        topology.validate()?;
        let half = channels / 2;
        let branches: Vec<CaaBranch> = topology
            .partitions
            .iter()
            .enumerate()
            .map(|(g, part)| CaaBranch::register(store, init, &format!("{name}.branch{g}"), part.len(), half, embedding, dropout))
            .collect();
        let shrink = Linear::register(store, init, &format!("{name}.shrink"), branches.len() * half, channels, true);
        Ok(Self { topology: topology.clone(), channels, branches, shrink })
    }

    /// Branch outputs `f^g`, each `[rows, C/2]`.
    pub fn branch_outputs<S: Scalar>(&self, cx: &mut Forward<'_, S>, coords: &Tensor<S>, conf: &Tensor<S>) -> Result<Vec<Var>> {
        let parts = partition_batch(coords, conf, &self.topology)?;
        self.branches.iter().zip(parts).map(|(branch, (p, c))| caa_branch(cx, branch, &p, &c)).collect()
    }

    /// Embeds `rows` frames: `coords` is `[rows, J, 2]`, `conf` is `[rows, J]`;
    /// returns `[rows, C]`.
    pub fn forward<S: Scalar>(&self, cx: &mut Forward<'_, S>, coords: &Tensor<S>, conf: &Tensor<S>) -> Result<Var> {
        let outputs = self.branch_outputs(cx, coords, conf)?;
        let joined = cx.graph.concat(&outputs)?;
        self.shrink.forward(cx, joined)
    }

    pub fn num_params(&self) -> usize {
        self.branches.iter().map(CaaBranch::num_params).sum::<usize>() + self.shrink.num_params()
    }

    /// Multiply-accumulates per frame.
    pub fn macs(&self) -> usize {
        self.branches.iter().map(CaaBranch::macs).sum::<usize>() + self.shrink.macs()
    }
}

/// Embeds a `views x frames` grid of detections into `[views, frames, C]`.
pub fn extract_features<S: Scalar>(
    cx: &mut Forward<'_, S>,
    extractor: &FeatureExtractor,
    detections: &[Vec<Detection2D>],
) -> Result<Var> {
    let n = detections.len();
    let t = detections.first().map_or(0, Vec::len);
    if n == 0 || t == 0 || detections.iter().any(|v| v.len() != t) {
        return Err(Error::Contract("detections must form a non-empty views x frames grid".into()));
    }
    let j = extractor.topology.num_joints();
    let mut coords = Vec::with_capacity(n * t * j * 2);
    let mut conf = Vec::with_capacity(n * t * j);
    for det in detections.iter().flatten() {
        if det.coords.len() != j || det.conf.len() != j {
            return Err(Error::Contract(format!("detection has {} joints, topology {j}", det.coords.len())));
        }
        coords.extend(det.coords.iter().flat_map(|p| p.map(S::of)));
        conf.extend(det.conf.iter().map(|&c| S::of(c)));
    }
    let coords = Tensor::new(&[n * t, j, 2], coords)?;
    let conf = Tensor::new(&[n * t, j], conf)?;
    let x = extractor.forward(cx, &coords, &conf)?;
    cx.graph.reshape(x, &[n, t, extractor.channels])
}
