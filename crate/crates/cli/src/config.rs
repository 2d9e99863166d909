//! Run configuration files: strict JSON, every section optional.

use std::path::{Path, PathBuf};

use mtf_core::ablation::Variant;
use mtf_core::gradcheck::GradCheckConfig;
use mtf_core::model::ModelConfig;
use mtf_core::pose::SynthConfig;
use mtf_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; when present it replaces the synth and train seeds.
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub gradcheck: GradCheckSection,
    pub ablation: AblationSection,
    /// Accepted for symmetry with the flag; execution is always single-threaded.
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub stride: usize,
    pub batch_size: usize,
    /// Restrict evaluation to the checkpoint's held-out sequences.
    pub held_out: bool,
    /// View-pair drop rate applied at evaluation; masks are seeded by the run seed.
    pub mask_rate: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { stride: 1, batch_size: 256, held_out: false, mask_rate: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSection {
    pub model: ModelConfig,
    pub check: GradCheckConfig,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self { model: ModelConfig::desk(), check: GradCheckConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub eval_stride: usize,
    pub eval_batch: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { variants: Variant::ALL.to_vec(), seeds: vec![0, 1, 2], eval_stride: 1, eval_batch: 256 }
    }
}

impl RunConfig {
    /// Parses `path`; relative paths inside are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data = cfg.data.map(|p| base.join(p));
        cfg.out = cfg.out.map(|p| base.join(p));
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Applies `--c`, `--d` and `--k` (channels, groups, group width) to `model`.
/// Any two determine the third; a lone `--k` keeps the group count.
pub fn apply_widths(model: &mut ModelConfig, c: Option<usize>, d: Option<usize>, k: Option<usize>) -> Result<(), CliError> {
    let bad = |m: String| Err(CliError::Config(m));
    match (c, d, k) {
        (Some(c), Some(d), Some(k)) if c != d * k => return bad(format!("--c {c} is not --d {d} times --k {k}")),
        (Some(c), Some(d), _) => (model.channels, model.groups) = (c, d),
        (Some(c), None, Some(k)) => {
            if k == 0 || c % k != 0 {
                return bad(format!("--c {c} is not a multiple of --k {k}"));
            }
            (model.channels, model.groups) = (c, c / k);
        }
        (None, Some(d), Some(k)) => (model.channels, model.groups) = (d * k, d),
        (Some(c), None, None) => model.channels = c,
        (None, Some(d), None) => model.groups = d,
        (None, None, Some(k)) => model.channels = model.groups * k,
        (None, None, None) => {}
    }
    model.validate().map_err(|e| CliError::Config(e.to_string()))
}

/// Absolute form of `path` against the working directory.
pub fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(path).map_err(|e| CliError::io(path, e))
}
