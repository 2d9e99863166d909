//! Pinhole cameras for the synthetic rig. The lifting model never sees these.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{cross, det, mat_mul, mat_vec, normalize, transpose, Mat3, IDENTITY};
use super::noise::NoiseParams;
use super::skeleton::{Detection2D, Pose3D};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    /// Focal lengths in pixels.
    pub focal: [f64; 2],
    /// Principal point in pixels.
    pub principal: [f64; 2],
    /// World-to-camera rotation (camera axes: x right, y down, z forward).
    pub rotation: Mat3,
    /// World-to-camera translation in metres.
    pub translation: [f64; 3],
    /// Image width in pixels; half of it is the normalization unit.
    pub image_width: f64,
}

impl CameraModel {
    pub fn identity(focal: [f64; 2], principal: [f64; 2], image_width: f64) -> Self {
        Self { focal, principal, rotation: IDENTITY, translation: [0.0; 3], image_width }
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        let orthonormal = (0..3).all(|i| (0..3).all(|j| (rtr[i][j] - IDENTITY[i][j]).abs() <= 1e-9));
        if !orthonormal || (det(&self.rotation) - 1.0).abs() > 1e-9 {
            return Err(Error::Contract("camera rotation is not a proper rotation".into()));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &[f64; 3]) -> [f64; 3] {
        let r = mat_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    /// Pixel coordinates of a camera-frame point.
    pub fn project(&self, p: &[f64; 3]) -> [f64; 2] {
        [self.focal[0] * p[0] / p[2] + self.principal[0], self.focal[1] * p[1] / p[2] + self.principal[1]]
    }

    pub fn half_width(&self) -> f64 {
        0.5 * self.image_width
    }

    /// Pixels to normalized units: centred at the principal point, scaled by half the width.
    pub fn normalize(&self, px: [f64; 2]) -> [f64; 2] {
        let h = self.half_width();
        [(px[0] - self.principal[0]) / h, (px[1] - self.principal[1]) / h]
    }

    pub fn denormalize(&self, n: [f64; 2]) -> [f64; 2] {
        let h = self.half_width();
        [n[0] * h + self.principal[0], n[1] * h + self.principal[1]]
    }
}

/// Output of projecting one world pose into one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewProjection {
    /// Normalized 2D joints with confidence 1.
    pub detection: Detection2D,
    /// Camera-frame, root-relative pose in millimetres.
    pub pose: Pose3D,
    pub pixels: Vec<[f64; 2]>,
    /// Camera-frame root position in metres.
    pub root_camera: [f64; 3],
}

pub fn project_virtual_view(world: &[[f64; 3]], camera: &CameraModel, root: usize) -> Result<ViewProjection> {
    let cam: Vec<[f64; 3]> = world.iter().map(|p| camera.world_to_camera(p)).collect();
    if let Some((joint, p)) = cam.iter().enumerate().find(|(_, p)| !(p[2] > 0.0)) {
        return Err(Error::BehindCamera { joint, depth: p[2] });
    }
    let pixels: Vec<[f64; 2]> = cam.iter().map(|p| camera.project(p)).collect();
    let coords = pixels.iter().map(|&px| camera.normalize(px)).collect();
    let mm: Vec<[f64; 3]> = cam.iter().map(|p| p.map(|v| v * 1000.0)).collect();
    Ok(ViewProjection {
        detection: Detection2D { coords, conf: vec![1.0; world.len()] },
        pose: Pose3D::root_relative(&mm, root),
        pixels,
        root_camera: cam[root],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub num_views: usize,
    /// One rig shared by every sequence instead of a fresh draw per sequence.
    pub fixed: bool,
    /// Uniform jitter of each camera's yaw around equal spacing, degrees.
    pub yaw_jitter_deg: f64,
    /// Camera distance from the capture centre, metres.
    pub ring_radius: [f64; 2],
    /// Absolute pitch bound, degrees.
    pub max_pitch_deg: f64,
    /// Camera heights, metres.
    pub height: [f64; 2],
    /// Uniform jitter on the camera position, metres per axis.
    pub translation_jitter: f64,
    /// Uniform jitter of the viewing direction around the look-at, degrees.
    pub aim_jitter_deg: f64,
    pub focal: [f64; 2],
    pub image_width: f64,
    /// Detector noise standard deviation, pixels.
    pub noise_sigma_px: f64,
    /// Confidence link scale, pixels.
    pub sigma_ref_px: f64,
    pub occlusion_rate: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            num_views: 4,
            fixed: true,
            yaw_jitter_deg: 20.0,
            ring_radius: [3.0, 5.0],
            max_pitch_deg: 15.0,
            height: [0.6, 1.8],
            translation_jitter: 0.2,
            aim_jitter_deg: 4.0,
            focal: [1000.0, 1000.0],
            image_width: 1000.0,
            noise_sigma_px: 0.0,
            sigma_ref_px: 5.0,
            occlusion_rate: 0.0,
        }
    }
}

impl RigConfig {
    pub fn noise(&self, num_joints: usize) -> NoiseParams {
        let unit = 0.5 * self.image_width;
        NoiseParams::with_default_scales(self.noise_sigma_px / unit, self.sigma_ref_px / unit, self.occlusion_rate, num_joints)
    }
}

/// Cameras on a ring around `centre`, roughly equally spaced in yaw, aimed at the subject
/// with pitch clamped to `max_pitch_deg`.
pub fn sample_rig(rng: &mut ChaCha8Rng, config: &RigConfig, centre: [f64; 3]) -> Vec<CameraModel> {
    let jitter = |rng: &mut ChaCha8Rng, a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
    let start = rng.random_range(0.0..std::f64::consts::TAU);
    let spacing = std::f64::consts::TAU / config.num_views.max(1) as f64;
    (0..config.num_views)
        .map(|k| {
            let yaw = start + spacing * k as f64 + jitter(rng, config.yaw_jitter_deg.to_radians());
            let radius = rng.random_range(config.ring_radius[0]..=config.ring_radius[1]);
            let height = rng.random_range(config.height[0]..=config.height[1]);
            let position = [
                centre[0] + radius * yaw.cos() + jitter(rng, config.translation_jitter),
                centre[1] + radius * yaw.sin() + jitter(rng, config.translation_jitter),
                height + jitter(rng, config.translation_jitter),
            ];
            let dx = centre[0] - position[0];
            let dy = centre[1] - position[1];
            let horizontal = (dx * dx + dy * dy).sqrt();
            let heading = dy.atan2(dx) + jitter(rng, config.aim_jitter_deg.to_radians());
            let max_pitch = config.max_pitch_deg.to_radians();
            let pitch = ((centre[2] - position[2]).atan2(horizontal) + jitter(rng, config.aim_jitter_deg.to_radians()))
                .clamp(-max_pitch, max_pitch);
            let forward = [heading.cos() * pitch.cos(), heading.sin() * pitch.cos(), pitch.sin()];
            let right = normalize(cross(forward, [0.0, 0.0, 1.0]));
            let down = cross(forward, right);
            let rotation = [right, down, forward];
            let rc = mat_vec(&rotation, &position);
            CameraModel {
                focal: config.focal,
                principal: [0.5 * config.image_width, 0.5 * config.image_width],
                rotation,
                translation: [-rc[0], -rc[1], -rc[2]],
                image_width: config.image_width,
            }
        })
        .collect()
}
