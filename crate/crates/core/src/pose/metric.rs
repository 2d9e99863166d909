use super::skeleton::{Pose3D, SkeletonTopology};
use crate::error::{Error, Result};

/// Mean per-joint position error after aligning both roots at the origin.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D, topology: &SkeletonTopology) -> Result<f64> {
    let j = topology.num_joints();
    if pred.coords.len() != j || gt.coords.len() != j {
        return Err(Error::Contract(format!(
            "mpjpe over {j} joints got {} and {}",
            pred.coords.len(),
            gt.coords.len()
        )));
    }
    let (pr, gr) = (pred.coords[topology.root], gt.coords[topology.root]);
    let total: f64 = pred
        .coords
        .iter()
        .zip(&gt.coords)
        .map(|(p, g)| {
            let d = [0, 1, 2].map(|k| (p[k] - pr[k]) - (g[k] - gr[k]));
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .sum();
    Ok(total / j as f64)
}
