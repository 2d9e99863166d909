//! Variant sweeps. Every variant is trained under the same seeds on the same
//! data and scored on the same view-count by clip-length grid.

use serde::{Deserialize, Serialize};

use crate::data::split_sequences;
use crate::error::{Error, Result};
use crate::eval::{evaluate_grid, EvalGrid, ModelPredictor};
use crate::features::Embedding;
use crate::mft::Fusion;
use crate::model::{ModelConfig, MtfModel, ParamBreakdown};
use crate::pose::CaptureDataset;
use crate::train::{train, TrainConfig, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Caa,
    NoConfidence,
    Concatenate,
    WithoutTransform,
    WithoutFusion,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Caa, Variant::NoConfidence, Variant::Concatenate, Variant::WithoutTransform, Variant::WithoutFusion];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Caa => "caa",
            Variant::NoConfidence => "no_confidence",
            Variant::Concatenate => "concatenate",
            Variant::WithoutTransform => "without_transform",
            Variant::WithoutFusion => "without_fusion",
        }
    }

    /// `base` with this variant's embedding and fusion switches.
    pub fn configure(self, base: &ModelConfig) -> ModelConfig {
        let (embedding, fusion) = match self {
            Variant::Caa => (Embedding::Caa, Fusion::Full),
            Variant::NoConfidence => (Embedding::NoConfidence, Fusion::Full),
            Variant::Concatenate => (Embedding::Concatenate, Fusion::Full),
            Variant::WithoutTransform => (Embedding::Caa, Fusion::WithoutTransform),
            Variant::WithoutFusion => (Embedding::Caa, Fusion::Disabled),
        };
        ModelConfig { embedding, fusion, ..base.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Shared training recipe; its model section is the base for every variant.
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub eval_stride: usize,
    pub eval_batch: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), variants: Variant::ALL.to_vec(), seeds: vec![0, 1, 2], eval_stride: 1, eval_batch: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub final_train_mpjpe: f64,
    pub grid: EvalGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub params: ParamBreakdown,
    /// Forward multiply-accumulates for one predicted frame of every rig view.
    pub macs: usize,
    pub runs: Vec<SeedRun>,
    /// Cellwise mean of the runs' grids.
    pub mean: EvalGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: Vec<VariantReport>,
}

impl AblationReport {
    pub fn get(&self, variant: Variant) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.variant == variant)
    }

    /// Plain-text summary: one header line per variant followed by its mean grid.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for v in &self.variants {
            out.push_str(&format!(
                "# {} params={} (features={} mft={} tft={}) macs={} seeds={}\n",
                v.variant.name(),
                v.params.total,
                v.params.features,
                v.params.mft,
                v.params.tft,
                v.macs,
                v.runs.len()
            ));
            out.push_str(&v.mean.to_csv());
        }
        out
    }
}

/// Odd clip lengths `1, 3, ..., t_full`.
pub fn frame_counts(t_full: usize) -> Vec<usize> {
    (1..=t_full).step_by(2).collect()
}

/// Scores `outcome` on the held-out sequences for every view count and
/// every odd clip length up to `config.t_full`.
pub fn evaluate_outcome(
    config: &TrainConfig,
    dataset: &CaptureDataset,
    outcome: &TrainOutcome,
    stride: usize,
    batch_size: usize,
) -> Result<EvalGrid> {
    let (_, val) = split_sequences(dataset.sequences.len(), config.val_fraction);
    if val.is_empty() {
        return Err(Error::Contract("no held-out sequences to evaluate".into()));
    }
    let views: Vec<usize> = (1..=dataset.num_views).collect();
    let predictor = ModelPredictor { model: &outcome.model, store: &outcome.store };
    evaluate_grid(&predictor, dataset, &val, &views, &frame_counts(config.t_full), stride, batch_size)
}

/// Trains and scores every (variant, seed) pair. `on_run` sees each trained
/// outcome before it is dropped.
pub fn ablation_suite(
    config: &AblationConfig,
    dataset: &CaptureDataset,
    mut on_run: impl FnMut(Variant, u64, &TrainOutcome) -> Result<()>,
) -> Result<AblationReport> {
    if config.variants.is_empty() || config.seeds.is_empty() {
        return Err(Error::Contract("ablation needs at least one variant and one seed".into()));
    }
    let mut variants = Vec::with_capacity(config.variants.len());
    for &variant in &config.variants {
        let model = variant.configure(&config.train.model);
        let (layout, _) = MtfModel::init::<f32>(&model, 0)?;
        let mut runs = Vec::with_capacity(config.seeds.len());
        for &seed in &config.seeds {
            let train_config = TrainConfig { model: model.clone(), seed, ..config.train.clone() };
            let outcome = train(&train_config, dataset, |_| {})?;
            on_run(variant, seed, &outcome)?;
            let grid = evaluate_outcome(&train_config, dataset, &outcome, config.eval_stride, config.eval_batch)?;
            let final_train_mpjpe = outcome.log.last().map_or(0.0, |r| r.train_mpjpe);
            runs.push(SeedRun { seed, final_train_mpjpe, grid });
        }
        let mean = EvalGrid::mean(&runs.iter().map(|r| r.grid.clone()).collect::<Vec<_>>())?;
        variants.push(VariantReport {
            variant,
            params: layout.param_breakdown(),
            macs: layout.macs(dataset.num_views, config.train.t_full),
            runs,
            mean,
        });
    }
    Ok(AblationReport { variants })
}
