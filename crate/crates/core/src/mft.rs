//! Cross-view fusion by relative attention.
//!
//! For every ordered view pair the relation `R_ij = F_i(x_i) + F_j(x_j) +
//! F_ij(F_i(x_i) + F_j(x_j))` yields attention logits `A_ij = gamma(R_ij)` (a
//! `D x K` grid) and a value transform `T_ij = alpha(R_ij)` (`D x D`). The
//! logits are normalized over `j` elementwise, and each view collects
//! `y_i = sum_j w_ij * (T_ij x_j)` with `x_j` read as a `D x K` matrix.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::Var;
use crate::nn::{Forward, Initializer, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Full,
    /// Values are the raw `x_j`; no `alpha` head.
    WithoutTransform,
    /// No fusion block at all.
    Disabled,
}

/// Which view pairs may attend to each other. Row `i` lists the views that
/// view `i` reads from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewMask {
    pub views: usize,
    pub keep: Vec<bool>,
}

impl ViewMask {
    pub fn full(views: usize) -> Self {
        Self { views, keep: vec![true; views * views] }
    }

    pub fn diagonal(views: usize) -> Self {
        Self { views, keep: (0..views * views).map(|k| k / views == k % views).collect() }
    }

    /// Drops each off-diagonal pair independently with probability `rate`.
    pub fn sample<R: Rng>(views: usize, rate: f64, rng: &mut R) -> Self {
        let keep = (0..views * views)
            .map(|k| {
                let (i, j) = (k / views, k % views);
                i == j || rng.random::<f64>() >= rate
            })
            .collect();
        Self { views, keep }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.views + j]
    }

    /// The mask seen after relabelling views by `perm` (new view `a` is old view `perm[a]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.views;
        Self { views: n, keep: (0..n * n).map(|k| self.get(perm[k / n], perm[k % n])).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.keep.len() != self.views * self.views {
            return Err(Error::InvalidMask(format!("{} entries for {} views", self.keep.len(), self.views)));
        }
        if (0..self.views).any(|i| !self.get(i, i)) {
            return Err(Error::InvalidMask("diagonal entries must be kept".into()));
        }
        Ok(())
    }
}

pub fn sample_block_mask(views: usize, rate: f64, seed: u64) -> Result<ViewMask> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Contract(format!("mask rate {rate} outside [0, 1]")));
    }
    Ok(ViewMask::sample(views, rate, &mut seed::rng(seed, "view-mask", 0)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mft {
    pub channels: usize,
    pub groups: usize,
    pub group_width: usize,
    pub fusion: Fusion,
    pub fi: Linear,
    pub fj: Linear,
    pub fij: Linear,
    pub gamma: Linear,
    pub alpha: Option<Linear>,
}

impl Mft {
    /// `groups * group_width` must equal `channels`.
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        groups: usize,
        fusion: Fusion,
    ) -> Result<Option<Self>> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Contract(format!("{channels} channels cannot split into {groups} groups")));
        }
        if fusion == Fusion::Disabled {
            return Ok(None);
        }
        let c = channels;
        let d = groups;
        let alpha = (fusion == Fusion::Full).then(|| Linear::register(store, init, &format!("{name}.alpha"), c, d * d, true));
        Ok(Some(Self {
            channels,
            groups,
            group_width: channels / groups,
            fusion,
            fi: Linear::register(store, init, &format!("{name}.fi"), c, c, true),
            fj: Linear::register(store, init, &format!("{name}.fj"), c, c, true),
            fij: Linear::register(store, init, &format!("{name}.fij"), c, c, true),
            gamma: Linear::register(store, init, &format!("{name}.gamma"), c, c, true),
            alpha,
        }))
    }

    /// `R_ij` for paired rows of `xi` and `xj` (both `[pairs, C]`).
    pub fn relation_encode<S: Scalar>(&self, cx: &mut Forward<'_, S>, xi: Var, xj: Var) -> Result<Var> {
        let u = self.fi.forward(cx, xi)?;
        let v = self.fj.forward(cx, xj)?;
        self.relation_from_parts(cx, u, v)
    }

    fn relation_from_parts<S: Scalar>(&self, cx: &mut Forward<'_, S>, u: Var, v: Var) -> Result<Var> {
        let s = cx.graph.add(u, v)?;
        let cross = self.fij.forward(cx, s)?;
        cx.graph.add(s, cross)
    }

    /// Relative attention over `x: [groups, N, C]`, one mask per group.
    /// Returns `[groups, N, C]` without the residual.
    pub fn relative_attention<S: Scalar>(&self, cx: &mut Forward<'_, S>, x: Var, masks: &[&ViewMask]) -> Result<Var> {
        Ok(self.attend(cx, x, masks)?.1)
    }

    /// As [`Mft::relative_attention`], also returning the normalized weights
    /// `w_ij` as `[groups, N, N, C]`.
    pub fn attend<S: Scalar>(&self, cx: &mut Forward<'_, S>, x: Var, masks: &[&ViewMask]) -> Result<(Var, Var)> {
        let shape = cx.graph.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.channels || masks.len() != shape[0] {
            return Err(shape_err("relative_attention", format!("{shape:?} with {} masks", masks.len())));
        }
        let (g, n, c) = (shape[0], shape[1], shape[2]);
        let (d, k) = (self.groups, self.group_width);
        for m in masks {
            m.validate()?;
            if m.views != n {
                return Err(Error::InvalidMask(format!("{}-view mask for {n} views", m.views)));
            }
        }
        let pairs = g * n * n;
        let mut idx_i = Vec::with_capacity(pairs);
        let mut idx_j = Vec::with_capacity(pairs);
        for grp in 0..g {
            for i in 0..n {
                for j in 0..n {
                    idx_i.push(grp * n + i);
                    idx_j.push(grp * n + j);
                }
            }
        }
        let (idx_i, idx_j) = (Arc::new(idx_i), Arc::new(idx_j));
        let flat = cx.graph.reshape(x, &[g * n, c])?;
        // F_i and F_j are per-view maps, so evaluate them once per view and pair afterwards.
        let u = self.fi.forward(cx, flat)?;
        let v = self.fj.forward(cx, flat)?;
        let u = cx.graph.gather_rows(u, idx_i)?;
        let v = cx.graph.gather_rows(v, idx_j.clone())?;
        let rel = self.relation_from_parts(cx, u, v)?;

        let logits = self.gamma.forward(cx, rel)?;
        let logits = cx.graph.reshape(logits, &[g, n, n, c])?;
        let mut keep = Vec::with_capacity(pairs * c);
        for m in masks {
            for &kept in &m.keep {
                keep.extend(std::iter::repeat_n(kept, c));
            }
        }
        let normalized = cx.graph.masked_softmax(logits, &keep, 2)?;
        let weights = cx.graph.reshape(normalized, &[pairs, c])?;

        let xj = cx.graph.gather_rows(flat, idx_j)?;
        let values = match &self.alpha {
            Some(alpha) => {
                let t = alpha.forward(cx, rel)?;
                let t = cx.graph.reshape(t, &[pairs, d, d])?;
                let xj = cx.graph.reshape(xj, &[pairs, d, k])?;
                let tx = cx.graph.bmm(t, xj, false, false)?;
                cx.graph.reshape(tx, &[pairs, c])?
            }
            None => xj,
        };
        let weighted = cx.graph.mul(weights, values)?;
        let weighted = cx.graph.reshape(weighted, &[g * n, n, c])?;
        let y = cx.graph.sum_axis(weighted, 1)?;
        Ok((normalized, cx.graph.reshape(y, &[g, n, c])?))
    }

    /// `X' = RA(X) + X`.
    pub fn forward<S: Scalar>(&self, cx: &mut Forward<'_, S>, x: Var, masks: &[&ViewMask]) -> Result<Var> {
        let y = self.relative_attention(cx, x, masks)?;
        cx.graph.add(y, x)
    }

    pub fn num_params(&self) -> usize {
        [&self.fi, &self.fj, &self.fij, &self.gamma].iter().map(|l| l.num_params()).sum::<usize>()
            + self.alpha.as_ref().map_or(0, Linear::num_params)
    }

    /// Multiply-accumulates per frame for `views` views.
    pub fn macs(&self, views: usize) -> usize {
        let pairs = views * views;
        let per_view = self.fi.macs() + self.fj.macs();
        let transform = self.alpha.as_ref().map_or(0, |a| a.macs() + self.groups * self.channels);
        let per_pair = self.fij.macs() + self.gamma.macs() + transform + self.channels;
        views * per_view + pairs * per_pair
    }
}

/// Fuses `x: [B, N, T, C]` with one mask per clip shared across its frames.
/// Evaluation uses the masks as given; pass [`ViewMask::full`] for full fusion.
pub fn mft_forward<S: Scalar>(cx: &mut Forward<'_, S>, mft: Option<&Mft>, x: Var, masks: &[ViewMask]) -> Result<Var> {
    let Some(mft) = mft else { return Ok(x) };
    let shape = cx.graph.shape(x).to_vec();
    if shape.len() != 4 || masks.len() != shape[0] {
        return Err(shape_err("mft", format!("{shape:?} with {} masks", masks.len())));
    }
    let (b, n, t, c) = (shape[0], shape[1], shape[2], shape[3]);
    let slices = cx.graph.permute(x, &[0, 2, 1, 3])?;
    let slices = cx.graph.reshape(slices, &[b * t, n, c])?;
    let per_slice: Vec<&ViewMask> = masks.iter().flat_map(|m| std::iter::repeat_n(m, t)).collect();
    let fused = mft.forward(cx, slices, &per_slice)?;
    let fused = cx.graph.reshape(fused, &[b, t, n, c])?;
    cx.graph.permute(fused, &[0, 2, 1, 3])
}
