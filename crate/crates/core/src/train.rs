//! Loss and the training loop.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{assemble, clip_indices, split_sequences, ClipIndex};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSpec, ModelPredictor};
use crate::graph::{Graph, Var};
use crate::mft::ViewMask;
use crate::model::{ModelConfig, MtfModel};
use crate::nn::{Forward, ParamStore};
use crate::optim::{bn_momentum, learning_rate, AdamConfig, AdamState};
use crate::pose::CaptureDataset;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;
use crate::tft::{make_frame_mask, FrameMask};

/// Mean per-joint position error between `pred` and `target`, both
/// `[B, N, J, 3]`, after moving each pose's `root` joint to the origin.
pub fn loss_mpjpe<S: Scalar>(graph: &mut Graph<S>, pred: Var, target: &Tensor<S>, root: usize) -> Result<Var> {
    let shape = graph.shape(pred).to_vec();
    if shape != target.shape() || shape.len() != 4 || shape[3] != 3 || root >= shape[2] {
        return Err(Error::Contract(format!("loss shapes {shape:?} vs {:?} (root {root})", target.shape())));
    }
    let (poses, j) = (shape[0] * shape[1], shape[2]);
    let roots = Arc::new(vec![root; j]);
    let align = |graph: &mut Graph<S>, x: Var| -> Result<Var> {
        let x = graph.reshape(x, &[poses, j, 3])?;
        let x = graph.permute(x, &[1, 0, 2])?;
        let r = graph.gather_rows(x, roots.clone())?;
        graph.sub(x, r)
    };
    let p = align(graph, pred)?;
    let t = graph.constant(target.clone())?;
    let t = align(graph, t)?;
    let d = graph.sub(p, t)?;
    let sq = graph.mul(d, d)?;
    let dist = graph.sum_axis(sq, 2)?;
    let dist = graph.sqrt(dist)?;
    graph.mean_all(dist)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub mask_rate: f64,
    /// Training clip length; must be odd and at most `model.max_frames`.
    pub t_full: usize,
    /// Sample a centred visible window per clip during training.
    pub frame_masking: bool,
    pub seed: u64,
    /// BN momentum at the first and last epoch.
    pub bn_momentum: [f64; 2],
    /// Spacing of training clip centres, frames.
    pub clip_stride: usize,
    /// Spacing of validation clip centres, frames.
    pub eval_stride: usize,
    /// Fraction of sequences (taken from the end) held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch_size: 720,
            lr: 1e-3,
            lr_decay: 0.95,
            epochs: 60,
            mask_rate: 0.4,
            t_full: 7,
            frame_masking: true,
            seed: 0,
            bn_momentum: [0.1, 0.001],
            clip_stride: 1,
            eval_stride: 1,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Contract(m));
        if self.batch_size == 0 || self.epochs == 0 || self.clip_stride == 0 || self.eval_stride == 0 {
            return bad("batch_size, epochs and strides must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("learning rate {} / decay {} out of range", self.lr, self.lr_decay));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad(format!("mask rate {} outside [0, 1]", self.mask_rate));
        }
        if self.t_full.is_multiple_of(2) || self.t_full > self.model.max_frames {
            return bad(format!("t_full {} must be odd and at most max_frames {}", self.t_full, self.model.max_frames));
        }
        if self.bn_momentum.iter().any(|&m| !(m > 0.0 && m <= 1.0)) {
            return bad(format!("bn momentum {:?} outside (0, 1]", self.bn_momentum));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        learning_rate(self.lr, self.lr_decay, epoch)
    }

    pub fn bn_momentum(&self, epoch: usize) -> f64 {
        bn_momentum(self.bn_momentum[0], self.bn_momentum[1], epoch, self.epochs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub bn_momentum: f64,
    pub train_mpjpe: f64,
    pub eval_mpjpe: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,lr,bn_momentum,train_mpjpe,eval_mpjpe";

pub fn log_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in records {
        let eval = r.eval_mpjpe.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.lr, r.bn_momentum, r.train_mpjpe, eval));
    }
    out
}

pub struct TrainOutcome {
    pub model: MtfModel,
    pub store: ParamStore<f32>,
    pub log: Vec<EpochRecord>,
    /// Validation MPJPE of the initial weights, if a validation split exists.
    pub initial_eval_mpjpe: Option<f64>,
}

/// Per-clip random view and frame masks for one training batch.
fn training_masks<R: Rng>(config: &TrainConfig, views: usize, clips: usize, rng: &mut R) -> Result<(Vec<ViewMask>, Vec<FrameMask>)> {
    let mut view_masks = Vec::with_capacity(clips);
    let mut frame_masks = Vec::with_capacity(clips);
    for _ in 0..clips {
        view_masks.push(ViewMask::sample(views, config.mask_rate, rng));
        let effective = if config.frame_masking { 2 * rng.random_range(0..=config.t_full / 2) + 1 } else { config.t_full };
        frame_masks.push(make_frame_mask(config.t_full, effective)?);
    }
    Ok((view_masks, frame_masks))
}

fn diverged(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence { epoch, batch, detail: format!("non-finite value in {op}") },
        other => other,
    }
}

/// Trains from scratch. Deterministic given `config.seed`.
pub fn train(config: &TrainConfig, dataset: &CaptureDataset, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.validate()?;
    if dataset.topology != config.model.topology {
        return Err(Error::Contract("dataset topology differs from the model topology".into()));
    }
    let (train_seqs, val_seqs) = split_sequences(dataset.sequences.len(), config.val_fraction);
    let margin = config.t_full / 2;
    let clips = clip_indices(dataset, &train_seqs, margin, config.clip_stride)?;
    if clips.is_empty() {
        return Err(Error::Contract("no training clips".into()));
    }
    let all_views: Vec<usize> = (0..dataset.num_views).collect();
    let val_spec = EvalSpec::new(all_views.clone(), config.t_full, margin, config.eval_stride, config.batch_size.max(1));
    let (model, mut store) = MtfModel::init::<f32>(&config.model, seed::derive(config.seed, "model", 0))?;
    let validate = |store: &ParamStore<f32>| -> Result<Option<f64>> {
        if val_seqs.is_empty() {
            return Ok(None);
        }
        Ok(Some(evaluate(&ModelPredictor { model: &model, store }, dataset, &val_seqs, &val_spec)?.mpjpe))
    };
    let initial_eval_mpjpe = validate(&store)?;
    let mut adam = AdamState::new(AdamConfig::default());
    let mut log = Vec::with_capacity(config.epochs);
    let root = config.model.topology.root;
    for epoch in 0..config.epochs {
        let lr = config.learning_rate(epoch);
        let momentum = config.bn_momentum(epoch);
        let mut order: Vec<ClipIndex> = clips.clone();
        order.shuffle(&mut seed::rng(config.seed, "shuffle", epoch as u64));
        let mut mask_rng = seed::rng(config.seed, "train-masks", epoch as u64);
        let (mut total, mut count) = (0.0f64, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let (view_masks, frame_masks) = training_masks(config, dataset.num_views, chunk.len(), &mut mask_rng)?;
            let (batch, targets) = assemble::<f32>(dataset, chunk, &all_views, config.t_full, view_masks, frame_masks)?;
            let stream = ((epoch as u64) << 32) | b as u64;
            let step = || -> Result<(f64, Graph<f32>, Var, Vec<_>)> {
                let mut cx = Forward::new(&store, true, seed::rng(config.seed, "dropout", stream));
                let pred = model.forward(&mut cx, &batch)?;
                let loss = loss_mpjpe(&mut cx.graph, pred, &targets, root)?;
                let value = cx.graph.value(loss).item().as_f64();
                let (graph, stats) = cx.into_parts();
                Ok((value, graph, loss, stats))
            };
            let (value, graph, loss, stats) = step().map_err(|e| diverged(epoch, b, e))?;
            let grads = graph.backward(loss).map_err(|e| diverged(epoch, b, e))?;
            adam.step(&mut store, grads.named(), lr).map_err(|e| diverged(epoch, b, e))?;
            store.apply_batch_stats(&stats, momentum as f32)?;
            total += value * chunk.len() as f64;
            count += chunk.len();
        }
        let record = EpochRecord { epoch, lr, bn_momentum: momentum, train_mpjpe: total / count as f64, eval_mpjpe: validate(&store)? };
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutcome { model, store, log, initial_eval_mpjpe })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMetadata {
    train: TrainConfig,
    log: Vec<EpochRecord>,
}

/// Writes the weights to `dir/checkpoint` and the log to `dir/log.csv`.
pub fn save_outcome(dir: &Path, config: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = serde_json::to_value(CheckpointMetadata { train: config.clone(), log: outcome.log.clone() })?;
    checkpoint::save(&dir.join("checkpoint"), &outcome.store, meta)?;
    std::fs::write(dir.join("log.csv"), log_csv(&outcome.log))?;
    Ok(())
}

/// Loads a checkpoint directory written by [`checkpoint::save`] with training metadata.
pub fn load_trained(dir: &Path) -> Result<(TrainConfig, MtfModel, ParamStore<f32>)> {
    let (store, manifest) = checkpoint::load::<f32>(dir)?;
    let meta: CheckpointMetadata = serde_json::from_value(manifest.metadata)
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let model = MtfModel::bind(&meta.train.model, &store)?;
    Ok((meta.train, model, store))
}
