//! On-disk capture datasets.
//!
//! A dataset is a directory holding `manifest.json` and three raw
//! little-endian `f32` arrays, each laid out in (sequence, frame, view,
//! joint, coord) order:
//!
//! * `poses2d.f32le`: normalized 2D detections, 2 coords per joint
//! * `conf.f32le`: detection confidences, 1 value per joint
//! * `poses3d.f32le`: camera-frame root-relative poses in mm, 3 coords per joint

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::camera::{project_virtual_view, sample_rig, CameraModel, RigConfig};
use super::motion::{generate_motion, MotionParams};
use super::noise::simulate_detection;
use super::skeleton::{Detection2D, Pose3D, SkeletonTopology};
use crate::error::{Error, Result};
use crate::seed;

const FORMAT: &str = "mtf-capture";
const VERSION: u32 = 1;
const POSES2D: &str = "poses2d.f32le";
const CONF: &str = "conf.f32le";
const POSES3D: &str = "poses3d.f32le";
const LAYOUT: &str = "little-endian f32, row-major (sequence, frame, view, joint, coord)";

/// One synchronized multi-view sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub timestamps: Vec<f64>,
    pub cameras: Vec<CameraModel>,
    /// Camera-frame root depth in metres, `[frame][view]` flattened.
    pub root_depth: Vec<f64>,
    /// `[frame][view][joint][2]`
    pub poses2d: Vec<f32>,
    /// `[frame][view][joint]`
    pub conf: Vec<f32>,
    /// `[frame][view][joint][3]`
    pub poses3d: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptureDataset {
    pub topology: SkeletonTopology,
    pub num_views: usize,
    pub frames_per_sequence: usize,
    pub seed: u64,
    pub rig: RigConfig,
    pub motion: MotionParams,
    pub sequences: Vec<SequenceRecord>,
}

impl CaptureDataset {
    pub fn num_joints(&self) -> usize {
        self.topology.num_joints()
    }

    fn slot(&self, frame: usize, view: usize) -> usize {
        frame * self.num_views + view
    }

    pub fn detection(&self, seq: usize, frame: usize, view: usize) -> Detection2D {
        let j = self.num_joints();
        let s = &self.sequences[seq];
        let base = self.slot(frame, view) * j;
        Detection2D {
            coords: (0..j).map(|k| [s.poses2d[2 * (base + k)] as f64, s.poses2d[2 * (base + k) + 1] as f64]).collect(),
            conf: (0..j).map(|k| s.conf[base + k] as f64).collect(),
        }
    }

    pub fn pose3d(&self, seq: usize, frame: usize, view: usize) -> Pose3D {
        let j = self.num_joints();
        let s = &self.sequences[seq];
        let base = self.slot(frame, view) * j * 3;
        Pose3D { coords: (0..j).map(|k| [0, 1, 2].map(|c| s.poses3d[base + 3 * k + c] as f64)).collect() }
    }

    /// The sequences with the given indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self { sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(), ..self.clone_header() }
    }

    fn clone_header(&self) -> Self {
        Self {
            topology: self.topology.clone(),
            num_views: self.num_views,
            frames_per_sequence: self.frames_per_sequence,
            seed: self.seed,
            rig: self.rig.clone(),
            motion: self.motion.clone(),
            sequences: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        let (j, v, f) = (self.num_joints(), self.num_views, self.frames_per_sequence);
        if v == 0 || f == 0 {
            return Err(Error::Format("dataset needs at least one view and one frame".into()));
        }
        for (i, s) in self.sequences.iter().enumerate() {
            let bad = |m: &str| Err(Error::Format(format!("sequence {i}: {m}")));
            if s.timestamps.len() != f || s.cameras.len() != v || s.root_depth.len() != f * v {
                return bad("metadata lengths disagree with the header");
            }
            if s.poses2d.len() != f * v * j * 2 || s.conf.len() != f * v * j || s.poses3d.len() != f * v * j * 3 {
                return bad("array lengths disagree with the header");
            }
            if s.timestamps.windows(2).any(|w| !(w[1] > w[0])) {
                return bad("timestamps are not strictly increasing");
            }
            if s.conf.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return bad("confidence outside [0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_sequences: usize,
    pub frames: usize,
    pub seed: u64,
    pub rig: RigConfig,
    pub motion: MotionParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { num_sequences: 50, frames: 243, seed: 0, rig: RigConfig::default(), motion: MotionParams::default() }
    }
}

/// Generates motion, places the rig (shared or per sequence), projects, and
/// corrupts the detections.
pub fn synthesize(config: &SynthConfig) -> Result<CaptureDataset> {
    let topology = SkeletonTopology::h36m();
    let j = topology.num_joints();
    let v = config.rig.num_views;
    let noise = config.rig.noise(j);
    let centre = [0.0, 0.0, 0.9];
    let mut sequences = Vec::with_capacity(config.num_sequences);
    for s in 0..config.num_sequences {
        let motion = generate_motion(seed::derive(config.seed, "motion", s as u64), config.frames, &topology, &config.motion)?;
        let cameras = sample_rig(&mut seed::rng(config.seed, "rig", if config.rig.fixed { 0 } else { s as u64 }), &config.rig, centre);
        let mut rec = SequenceRecord {
            timestamps: motion.timestamps.clone(),
            cameras: cameras.clone(),
            root_depth: Vec::with_capacity(config.frames * v),
            poses2d: Vec::with_capacity(config.frames * v * j * 2),
            conf: Vec::with_capacity(config.frames * v * j),
            poses3d: Vec::with_capacity(config.frames * v * j * 3),
        };
        for (f, world) in motion.frames.iter().enumerate() {
            for (view, cam) in cameras.iter().enumerate() {
                let proj = project_virtual_view(world, cam, topology.root)?;
                let stream = ((s * config.frames + f) * v + view) as u64;
                let det = simulate_detection(&proj.detection, &noise, seed::derive(config.seed, "noise", stream))?;
                rec.root_depth.push(proj.root_camera[2]);
                rec.poses2d.extend(det.coords.iter().flat_map(|p| p.map(|x| x as f32)));
                rec.conf.extend(det.conf.iter().map(|&c| c as f32));
                rec.poses3d.extend(proj.pose.coords.iter().flat_map(|p| p.map(|x| x as f32)));
            }
        }
        sequences.push(rec);
    }
    let ds = CaptureDataset {
        topology,
        num_views: v,
        frames_per_sequence: config.frames,
        seed: config.seed,
        rig: config.rig.clone(),
        motion: config.motion.clone(),
        sequences,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobInfo {
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceMeta {
    timestamps: Vec<f64>,
    cameras: Vec<CameraModel>,
    root_depth: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    layout: String,
    num_joints: usize,
    num_views: usize,
    frames_per_sequence: usize,
    num_sequences: usize,
    seed: u64,
    topology: SkeletonTopology,
    rig: RigConfig,
    motion: MotionParams,
    sequences: Vec<SequenceMeta>,
    poses2d: BlobInfo,
    conf: BlobInfo,
    poses3d: BlobInfo,
}

fn encode(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(f32::to_le_bytes).collect()
}

fn blob_info(file: &str, bytes: &[u8]) -> BlobInfo {
    BlobInfo { file: file.into(), bytes: bytes.len(), sha256: hex::encode(Sha256::digest(bytes)) }
}

pub fn write_dataset(dataset: &CaptureDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let seqs = &dataset.sequences;
    let p2 = encode(seqs.iter().flat_map(|s| s.poses2d.iter().copied()));
    let cf = encode(seqs.iter().flat_map(|s| s.conf.iter().copied()));
    let p3 = encode(seqs.iter().flat_map(|s| s.poses3d.iter().copied()));
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        layout: LAYOUT.into(),
        num_joints: dataset.num_joints(),
        num_views: dataset.num_views,
        frames_per_sequence: dataset.frames_per_sequence,
        num_sequences: seqs.len(),
        seed: dataset.seed,
        topology: dataset.topology.clone(),
        rig: dataset.rig.clone(),
        motion: dataset.motion.clone(),
        sequences: seqs
            .iter()
            .map(|s| SequenceMeta { timestamps: s.timestamps.clone(), cameras: s.cameras.clone(), root_depth: s.root_depth.clone() })
            .collect(),
        poses2d: blob_info(POSES2D, &p2),
        conf: blob_info(CONF, &cf),
        poses3d: blob_info(POSES3D, &p3),
    };
    fs::write(dir.join(POSES2D), &p2)?;
    fs::write(dir.join(CONF), &cf)?;
    fs::write(dir.join(POSES3D), &p3)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

fn read_blob(dir: &Path, info: &BlobInfo, expected_values: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(dir.join(&info.file))?;
    if bytes.len() != info.bytes || bytes.len() != expected_values * 4 {
        return Err(Error::Corruption(format!(
            "{}: {} bytes on disk, manifest records {}, header implies {}",
            info.file,
            bytes.len(),
            info.bytes,
            expected_values * 4
        )));
    }
    if hex::encode(Sha256::digest(&bytes)) != info.sha256 {
        return Err(Error::Corruption(format!("{}: checksum mismatch", info.file)));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn read_dataset(dir: &Path) -> Result<CaptureDataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("dataset manifest: {e}")))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::Format(format!("unsupported dataset {} v{} (want {FORMAT} v{VERSION})", m.format, m.version)));
    }
    m.topology.validate()?;
    if m.num_joints != m.topology.num_joints() {
        return Err(Error::Format(format!(
            "manifest joint count {} differs from topology ({})",
            m.num_joints,
            m.topology.num_joints()
        )));
    }
    if m.sequences.len() != m.num_sequences {
        return Err(Error::Format("sequence metadata count differs from num_sequences".into()));
    }
    let per_seq = m.frames_per_sequence * m.num_views * m.num_joints;
    let n = m.num_sequences;
    let p2 = read_blob(dir, &m.poses2d, n * per_seq * 2)?;
    let cf = read_blob(dir, &m.conf, n * per_seq)?;
    let p3 = read_blob(dir, &m.poses3d, n * per_seq * 3)?;
    let sequences = m
        .sequences
        .into_iter()
        .enumerate()
        .map(|(i, meta)| SequenceRecord {
            timestamps: meta.timestamps,
            cameras: meta.cameras,
            root_depth: meta.root_depth,
            poses2d: p2[i * per_seq * 2..(i + 1) * per_seq * 2].to_vec(),
            conf: cf[i * per_seq..(i + 1) * per_seq].to_vec(),
            poses3d: p3[i * per_seq * 3..(i + 1) * per_seq * 3].to_vec(),
        })
        .collect();
    let ds = CaptureDataset {
        topology: m.topology,
        num_views: m.num_views,
        frames_per_sequence: m.frames_per_sequence,
        seed: m.seed,
        rig: m.rig,
        motion: m.motion,
        sequences,
    };
    ds.validate()?;
    Ok(ds)
}
