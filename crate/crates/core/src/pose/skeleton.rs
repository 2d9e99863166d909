use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint set with a kinematic tree and the five body partitions used by the
/// feature extractor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonTopology {
    pub names: Vec<String>,
    pub root: usize,
    /// `(parent, child)` edges.
    pub bones: Vec<(usize, usize)>,
    pub partitions: Vec<Vec<usize>>,
}

impl SkeletonTopology {
    /// 17 joints in Human3.6M order; partitions are torso+head, right leg,
    /// left leg, left arm, right arm.
    pub fn h36m() -> Self {
        let names = [
            "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "spine", "thorax", "neck",
            "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
        ];
        let parents = [0usize, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            root: 0,
            bones: (1..17).map(|c| (parents[c], c)).collect(),
            partitions: vec![vec![0, 7, 8, 9, 10], vec![1, 2, 3], vec![4, 5, 6], vec![11, 12, 13], vec![14, 15, 16]],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.names.len()
    }

    pub fn partition_sizes(&self) -> Vec<usize> {
        self.partitions.iter().map(Vec::len).collect()
    }

    /// Parent of every joint (`None` for the root).
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut parents = vec![None; self.num_joints()];
        for &(p, c) in &self.bones {
            parents[c] = Some(p);
        }
        parents
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.num_joints();
        let bad = |m: String| Err(Error::Format(format!("topology: {m}")));
        if j == 0 {
            return bad("no joints".into());
        }
        if self.root >= j {
            return bad(format!("root {} out of {j}", self.root));
        }
        if self.partitions.len() != 5 {
            return bad(format!("{} partitions, expected 5", self.partitions.len()));
        }
        let mut owner = vec![None; j];
        for (g, part) in self.partitions.iter().enumerate() {
            if part.is_empty() {
                return bad(format!("partition {g} is empty"));
            }
            for &k in part {
                if k >= j {
                    return bad(format!("partition {g} names joint {k} out of {j}"));
                }
                if let Some(prev) = owner[k].replace(g) {
                    return bad(format!("joint {k} is in partitions {prev} and {g}"));
                }
            }
        }
        if let Some(k) = owner.iter().position(Option::is_none) {
            return bad(format!("joint {k} belongs to no partition"));
        }
        let mut has_parent = vec![false; j];
        for &(p, c) in &self.bones {
            if p >= j || c >= j || c == self.root || std::mem::replace(&mut has_parent[c], true) {
                return bad(format!("invalid bone ({p}, {c})"));
            }
        }
        if has_parent.iter().enumerate().any(|(k, &h)| k != self.root && !h) {
            return bad("bones do not span the joints".into());
        }
        Ok(())
    }

    /// Joints in an order where every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut children = vec![Vec::new(); self.num_joints()];
        for &(p, c) in &self.bones {
            children[p].push(c);
        }
        let mut order = vec![self.root];
        let mut i = 0;
        while i < order.len() {
            order.extend(children[order[i]].iter().copied());
            i += 1;
        }
        order
    }
}

/// Root-relative 3D joint positions in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose3D {
    pub coords: Vec<[f64; 3]>,
}

impl Pose3D {
    /// Re-centers `coords` so that `root` sits exactly at the origin.
    pub fn root_relative(coords: &[[f64; 3]], root: usize) -> Self {
        let r = coords[root];
        let mut coords: Vec<[f64; 3]> = coords.iter().map(|p| [p[0] - r[0], p[1] - r[1], p[2] - r[2]]).collect();
        coords[root] = [0.0; 3];
        Self { coords }
    }
}

/// Per-joint 2D coordinates (normalized image units) with confidences in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection2D {
    pub coords: Vec<[f64; 2]>,
    pub conf: Vec<f64>,
}

impl Detection2D {
    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.conf.len() {
            return Err(Error::Contract("detection coords and conf lengths differ".into()));
        }
        if self.conf.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Contract("confidence outside [0, 1]".into()));
        }
        Ok(())
    }
}
