//! Articulated motion synthesis by forward kinematics over a fixed-length skeleton.

use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{add, euler_zyx, mat_mul, mat_vec, norm, rot_z, sub, Mat3};
use super::skeleton::SkeletonTopology;
use crate::error::{Error, Result};
use crate::seed;

const MAX_ATTEMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionParams {
    pub fps: f64,
    /// Multiplies every angular and trajectory frequency; 0 yields a static pose.
    pub speed: f64,
    /// Scales the spread of the randomized base pose and oscillation amplitudes.
    pub articulation: f64,
    /// Root stays within this horizontal radius (metres) of the capture centre.
    pub capture_radius: f64,
    /// Minimum distance (metres) between joints not joined by a bone.
    pub min_joint_separation: f64,
    /// Per-sequence bone scale is drawn from `1 +- body_scale_jitter`.
    pub body_scale_jitter: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            fps: 50.0,
            speed: 1.0,
            articulation: 1.0,
            capture_radius: 1.0,
            min_joint_separation: 0.03,
            body_scale_jitter: 0.08,
        }
    }
}

/// World-frame joint positions (metres, z up) for every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub frames: Vec<Vec<[f64; 3]>>,
    pub timestamps: Vec<f64>,
}

impl MotionSequence {
    pub fn bone_lengths(&self, topology: &SkeletonTopology, frame: usize) -> Vec<f64> {
        let f = &self.frames[frame];
        topology.bones.iter().map(|&(p, c)| norm(sub(f[c], f[p]))).collect()
    }
}

/// Rest offsets (parent to child, metres) and local rotation ranges of the default body.
struct BodyTemplate {
    offsets: Vec<[f64; 3]>,
    ranges: Vec<[[f64; 2]; 3]>,
}

impl BodyTemplate {
    fn h36m() -> Self {
        let z = [0.0, 0.0];
        #[rustfmt::skip]
        let table: [([f64; 3], [[f64; 2]; 3]); 17] = [
            ([0.0, 0.0, 0.0],     [[-0.2, 0.2], [-0.15, 0.15], [-0.3, 0.3]]),
            ([0.13, 0.0, 0.0],    [[-0.5, 1.6], [-0.4, 0.15], [-0.3, 0.3]]),
            ([0.0, 0.0, -0.45],   [[-2.0, 0.0], z, z]),
            ([0.0, 0.0, -0.44],   [z, z, z]),
            ([-0.13, 0.0, 0.0],   [[-0.5, 1.6], [-0.15, 0.4], [-0.3, 0.3]]),
            ([0.0, 0.0, -0.45],   [[-2.0, 0.0], z, z]),
            ([0.0, 0.0, -0.44],   [z, z, z]),
            ([0.0, 0.0, 0.23],    [[-0.6, 0.3], [-0.3, 0.3], [-0.5, 0.5]]),
            ([0.0, 0.0, 0.25],    [[-0.3, 0.3], [-0.2, 0.2], [-0.3, 0.3]]),
            ([0.0, 0.05, 0.10],   [[-0.5, 0.4], [-0.3, 0.3], [-0.6, 0.6]]),
            ([0.0, 0.0, 0.12],    [z, z, z]),
            ([-0.17, 0.0, 0.0],   [[-0.8, 2.5], [-0.2, 2.0], [-0.8, 0.8]]),
            ([0.0, 0.0, -0.28],   [[0.0, 2.3], z, z]),
            ([0.0, 0.0, -0.25],   [z, z, z]),
            ([0.17, 0.0, 0.0],    [[-0.8, 2.5], [-2.0, 0.2], [-0.8, 0.8]]),
            ([0.0, 0.0, -0.28],   [[0.0, 2.3], z, z]),
            ([0.0, 0.0, -0.25],   [z, z, z]),
        ];
        Self { offsets: table.iter().map(|r| r.0).collect(), ranges: table.iter().map(|r| r.1).collect() }
    }

    fn for_topology(topology: &SkeletonTopology) -> Result<Self> {
        if *topology != SkeletonTopology::h36m() {
            return Err(Error::Contract("motion synthesis only has a body template for the default 17-joint topology".into()));
        }
        Ok(Self::h36m())
    }
}

/// Sinusoidal trajectory of one scalar degree of freedom.
#[derive(Clone, Copy)]
struct Oscillator {
    base: f64,
    amplitude: f64,
    frequency: f64,
    phase: f64,
}

impl Oscillator {
    fn sample(rng: &mut ChaCha8Rng, range: [f64; 2], params: &MotionParams) -> Self {
        let mid = 0.5 * (range[0] + range[1]);
        let half = 0.5 * (range[1] - range[0]) * params.articulation;
        let base = if half > 0.0 { mid + rng.random_range(-half..=half) } else { mid };
        let amplitude = if half > 0.0 { rng.random_range(0.0..=0.6 * half.min(1.0)) } else { 0.0 };
        Self { base, amplitude, frequency: rng.random_range(0.2..1.2), phase: rng.random_range(0.0..TAU) }
    }

    fn at(&self, t: f64, speed: f64) -> f64 {
        self.base + self.amplitude * (TAU * self.frequency * speed * t + self.phase).sin()
    }
}

fn attempt(rng: &mut ChaCha8Rng, frames: usize, topology: &SkeletonTopology, params: &MotionParams) -> MotionSequence {
    let template = BodyTemplate::h36m();
    let j = topology.num_joints();
    let parents = topology.parents();
    let order = topology.topological_order();
    let scale = 1.0 + rng.random_range(-params.body_scale_jitter..=params.body_scale_jitter);
    let dofs: Vec<[Oscillator; 3]> =
        (0..j).map(|k| template.ranges[k].map(|r| Oscillator::sample(rng, r, params))).collect();

    let heading0 = rng.random_range(0.0..TAU);
    let heading_rate = rng.random_range(-0.5..0.5);
    let orbit_radius = rng.random_range(0.0..=params.capture_radius);
    let orbit_phase = rng.random_range(0.0..TAU);
    let orbit_rate = rng.random_range(-0.4..0.4);
    let hip_height = 0.92 * scale;

    let mut out = Vec::with_capacity(frames);
    let timestamps: Vec<f64> = (0..frames).map(|f| f as f64 / params.fps).collect();
    for &t in &timestamps {
        let speed = params.speed;
        let local: Vec<Mat3> = dofs.iter().map(|d| euler_zyx(d.map(|o| o.at(t, speed)))).collect();
        let angle = orbit_phase + orbit_rate * speed * t;
        let root_pos = [orbit_radius * angle.cos(), orbit_radius * angle.sin(), hip_height];
        let mut global = vec![[[0.0; 3]; 3]; j];
        let mut pos = vec![[0.0; 3]; j];
        for &k in &order {
            match parents[k] {
                None => {
                    global[k] = mat_mul(&rot_z(heading0 + heading_rate * speed * t), &local[k]);
                    pos[k] = root_pos;
                }
                Some(p) => {
                    let offset = template.offsets[k].map(|v| v * scale);
                    pos[k] = add(pos[p], mat_vec(&global[p], &offset));
                    global[k] = mat_mul(&global[p], &local[k]);
                }
            }
        }
        out.push(pos);
    }
    MotionSequence { frames: out, timestamps }
}

fn closest_unlinked_pair(seq: &MotionSequence, topology: &SkeletonTopology) -> f64 {
    let j = topology.num_joints();
    let linked = |a: usize, b: usize| topology.bones.iter().any(|&(p, c)| (p, c) == (a, b) || (p, c) == (b, a));
    let mut closest = f64::INFINITY;
    for frame in &seq.frames {
        for a in 0..j {
            for b in a + 1..j {
                if !linked(a, b) {
                    closest = closest.min(norm(sub(frame[a], frame[b])));
                }
            }
        }
    }
    closest
}

/// Smooth articulated motion with constant bone lengths. Candidates whose
/// non-adjacent joints come closer than `min_joint_separation` are redrawn.
pub fn generate_motion(seed: u64, frames: usize, topology: &SkeletonTopology, params: &MotionParams) -> Result<MotionSequence> {
    if frames == 0 {
        return Err(Error::Contract("motion needs at least one frame".into()));
    }
    BodyTemplate::for_topology(topology)?;
    let mut closest = 0.0;
    for k in 0..MAX_ATTEMPTS {
        let mut rng = seed::rng(seed, "motion-attempt", k as u64);
        let seq = attempt(&mut rng, frames, topology, params);
        closest = closest_unlinked_pair(&seq, topology);
        if closest >= params.min_joint_separation {
            return Ok(seq);
        }
    }
    Err(Error::MotionGeneration {
        attempts: MAX_ATTEMPTS,
        detail: format!("joints within {closest:.4} m (limit {})", params.min_joint_separation),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn impossible_separation_errors_after_retries() {
        let topo = SkeletonTopology::h36m();
        let params = MotionParams { min_joint_separation: 5.0, ..MotionParams::default() };
        match generate_motion(1, 4, &topo, &params) {
            Err(Error::MotionGeneration { attempts, .. }) => assert_eq!(attempts, 10),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_frames_is_rejected() {
        assert!(generate_motion(1, 0, &SkeletonTopology::h36m(), &MotionParams::default()).is_err());
    }
}
