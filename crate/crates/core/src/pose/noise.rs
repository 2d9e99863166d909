//! Detector emulation: Gaussian displacement, occlusion outliers, and a
//! confidence that decays exponentially with the realized error.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::skeleton::Detection2D;
use crate::error::{Error, Result};
use crate::seed;

/// Confidence ceiling reported for occluded joints.
pub const OCCLUDED_CONF_MAX: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    /// Displacement standard deviation per axis, in the detection's units.
    pub sigma: f64,
    /// Confidence is `exp(-|d| / sigma_ref)`.
    pub sigma_ref: f64,
    pub occlusion_rate: f64,
    /// Per-joint multiplier of `sigma`.
    pub joint_scale: Vec<f64>,
}

impl NoiseParams {
    /// Extremities (indices of wrists and ankles in the default ordering) are noisier.
    pub fn with_default_scales(sigma: f64, sigma_ref: f64, occlusion_rate: f64, num_joints: usize) -> Self {
        let joint_scale = (0..num_joints)
            .map(|j| if num_joints == 17 && [3, 6, 13, 16].contains(&j) { 1.5 } else { 1.0 })
            .collect();
        Self { sigma, sigma_ref, occlusion_rate, joint_scale }
    }

    pub fn noiseless(num_joints: usize) -> Self {
        Self { sigma: 0.0, sigma_ref: 1.0, occlusion_rate: 0.0, joint_scale: vec![1.0; num_joints] }
    }
}

pub fn simulate_detection(clean: &Detection2D, params: &NoiseParams, seed: u64) -> Result<Detection2D> {
    if params.sigma < 0.0 || !(0.0..1.0).contains(&params.occlusion_rate) || params.sigma_ref <= 0.0 {
        return Err(Error::Contract(format!(
            "noise parameters out of range: sigma {}, occlusion {}",
            params.sigma, params.occlusion_rate
        )));
    }
    if params.joint_scale.len() != clean.coords.len() {
        return Err(Error::Contract("joint_scale length differs from joint count".into()));
    }
    let mut rng = seed::rng(seed, "detection-noise", 0);
    let mut coords = Vec::with_capacity(clean.coords.len());
    let mut conf = Vec::with_capacity(clean.coords.len());
    for (p, &s) in clean.coords.iter().zip(&params.joint_scale) {
        let occluded = params.occlusion_rate > 0.0 && rng.random::<f64>() < params.occlusion_rate;
        let d = if occluded {
            // Outlier far enough that exp(-|d|/sigma_ref) < 0.2 holds without clamping.
            let magnitude = params.sigma_ref * rng.random_range(3.0..8.0);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            [magnitude * angle.cos(), magnitude * angle.sin()]
        } else {
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            [dx * params.sigma * s, dy * params.sigma * s]
        };
        let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let mut c = (-dist / params.sigma_ref).exp();
        if occluded {
            c = c.min(OCCLUDED_CONF_MAX);
        }
        coords.push([p[0] + d[0], p[1] + d[1]]);
        conf.push(c);
    }
    Ok(Detection2D { coords, conf })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean() -> Detection2D {
        Detection2D { coords: (0..17).map(|j| [j as f64 * 0.01, -0.2]).collect(), conf: vec![1.0; 17] }
    }

    #[test]
    fn noiseless_is_identity() {
        let out = simulate_detection(&clean(), &NoiseParams::noiseless(17), 4).unwrap();
        assert_eq!(out, clean());
    }

    #[test]
    fn confidence_follows_exponential_law() {
        let params = NoiseParams::with_default_scales(0.01, 0.01, 0.3, 17);
        let c = clean();
        let out = simulate_detection(&c, &params, 8).unwrap();
        for j in 0..17 {
            let d = ((out.coords[j][0] - c.coords[j][0]).powi(2) + (out.coords[j][1] - c.coords[j][1]).powi(2)).sqrt();
            assert!((out.conf[j] - (-d / 0.01).exp()).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&out.conf[j]));
        }
    }

    #[test]
    fn rejects_bad_rates() {
        let mut p = NoiseParams::noiseless(17);
        p.occlusion_rate = 1.0;
        assert!(simulate_detection(&clean(), &p, 0).is_err());
    }
}
