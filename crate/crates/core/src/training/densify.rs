//! Clone / split / prune.
//!
//! Decisions are made per row from local quantities only; the new layout is
//! a pure function of the decisions: surviving rows in ascending old order,
//! then children in parent order. A shard applying the plan to its own rows
//! therefore lands on exactly the rows a single worker would produce.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use crate::gaussian_model::{quat_to_matrix, GaussianCloud};
use crate::rasterizer::SplatGrad;
use crate::{Error, Real, Result};

/// Scale divisor applied to both children of a split.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;
/// Resolution at which `grad_threshold` is quoted.
pub const GRAD_THRESHOLD_REFERENCE_RES: f64 = 512.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub interval: u32,
    pub start: u32,
    /// Last densification iteration as a fraction of the run.
    pub stop_fraction: f64,
    /// Mean NDC position-gradient threshold at 512 px; scaled linearly with
    /// the training resolution.
    pub grad_threshold: f64,
    pub opacity_prune: f64,
    /// Largest world scale kept, as a fraction of the scene extent.
    pub scale_prune: f64,
    /// Gaussians up to this fraction of the scene extent are cloned, larger
    /// ones split.
    pub percent_dense: f64,
    /// Growth stops at this many Gaussians, keeping the candidates with the
    /// largest statistic; 0 means unlimited.
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            interval: 100,
            start: 500,
            stop_fraction: 0.5,
            grad_threshold: 2e-4,
            opacity_prune: 0.005,
            scale_prune: 0.1,
            percent_dense: 0.01,
            max_gaussians: 10_000,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        let th = [
            self.stop_fraction,
            self.grad_threshold,
            self.opacity_prune,
            self.scale_prune,
            self.percent_dense,
        ];
        if th.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "densification thresholds must be non-negative".into(),
            ));
        }
        if self.enabled && self.interval == 0 {
            return Err(Error::InvalidArgument("densify interval must be positive".into()));
        }
        Ok(())
    }

    /// Whether densification runs after completing iteration `step` (1-based).
    pub fn due(&self, step: u32, iterations: u32) -> bool {
        let stop = (self.stop_fraction * iterations as f64).floor() as u32;
        self.enabled && step >= self.start && step <= stop && step.is_multiple_of(self.interval)
    }

    pub fn thresholds(&self, resolution: u32, extent: f64) -> Thresholds {
        Thresholds {
            grad: self.grad_threshold * resolution as f64 / GRAD_THRESHOLD_REFERENCE_RES,
            opacity: self.opacity_prune,
            prune_scale: self.scale_prune * extent,
            dense_scale: self.percent_dense * extent,
            max_gaussians: self.max_gaussians,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub grad: f64,
    pub opacity: f64,
    pub prune_scale: f64,
    pub dense_scale: f64,
    pub max_gaussians: usize,
}

/// Accumulated screen-space gradient norms per row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    /// Iterations in which the row touched at least one pixel.
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.is_empty()
    }

    pub fn record<T: Real>(&mut self, row: usize, g: &SplatGrad<T>, width: usize, height: usize) {
        if g.touched > 0 {
            self.grad_sum[row] += g.ndc_grad_norm(width, height).to_f64();
            self.count[row] += 1;
        }
    }

    pub fn gather(&self, rows: &[usize]) -> Self {
        Self {
            grad_sum: rows.iter().map(|&r| self.grad_sum[r]).collect(),
            count: rows.iter().map(|&r| self.count[r]).collect(),
        }
    }

    /// Mean statistic of `row`, 0 when it was never visible.
    pub fn score(&self, row: usize) -> f64 {
        match self.count[row] {
            0 => 0.0,
            n => self.grad_sum[row] / n as f64,
        }
    }

    pub fn push(&mut self, grad_sum: f64, count: u32) {
        self.grad_sum.push(grad_sum);
        self.count.push(count);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowFate {
    Keep,
    Prune,
    Clone,
    Split,
}

pub fn row_fate<T: Real>(cloud: &GaussianCloud<T>, row: usize, stats: &DensifyStats, th: &Thresholds) -> RowFate {
    let max_scale = cloud.max_scale(row).to_f64();
    if cloud.opacity(row).to_f64() < th.opacity || max_scale > th.prune_scale {
        return RowFate::Prune;
    }
    let n = stats.count[row];
    if n > 0 && stats.grad_sum[row] / n as f64 >= th.grad {
        if max_scale <= th.dense_scale {
            RowFate::Clone
        } else {
            RowFate::Split
        }
    } else {
        RowFate::Keep
    }
}

/// Demotes clone and split candidates to `Keep` so the cloud ends with at
/// most `max_gaussians` rows (0: no limit), or does not grow when pruning
/// alone leaves it above the limit. Candidates with the larger score win,
/// ties going to the lower index, so the outcome depends only on the
/// global fates and scores.
pub fn cap_growth(fates: &mut [RowFate], scores: &[f64], max_gaussians: usize) {
    if max_gaussians == 0 {
        return;
    }
    let survivors = fates.iter().filter(|f| **f != RowFate::Prune).count();
    let budget = max_gaussians.saturating_sub(survivors);
    let mut candidates: Vec<usize> = (0..fates.len())
        .filter(|&i| matches!(fates[i], RowFate::Clone | RowFate::Split))
        .collect();
    if candidates.len() <= budget {
        return;
    }
    candidates.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    for &i in &candidates[budget..] {
        fates[i] = RowFate::Keep;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChildKind {
    Clone,
    /// Split child number 0 or 1.
    Split(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Child {
    pub parent: usize,
    pub index: usize,
    pub kind: ChildKind,
}

/// Old-to-new index mapping of one densification event.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyPlan {
    pub fates: Vec<RowFate>,
    /// New index of each old row that survives.
    pub new_index: Vec<Option<usize>>,
    pub children: Vec<Child>,
    pub new_len: usize,
}

impl DensifyPlan {
    pub fn from_fates(fates: Vec<RowFate>) -> Self {
        let mut new_index = vec![None; fates.len()];
        let mut next = 0;
        for (i, f) in fates.iter().enumerate() {
            if matches!(f, RowFate::Keep | RowFate::Clone) {
                new_index[i] = Some(next);
                next += 1;
            }
        }
        let mut children = Vec::new();
        for (parent, f) in fates.iter().enumerate() {
            let kinds: &[ChildKind] = match f {
                RowFate::Clone => &[ChildKind::Clone],
                RowFate::Split => &[ChildKind::Split(0), ChildKind::Split(1)],
                _ => &[],
            };
            for &kind in kinds {
                children.push(Child {
                    parent,
                    index: next,
                    kind,
                });
                next += 1;
            }
        }
        Self {
            fates,
            new_index,
            children,
            new_len: next,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.fates.iter().all(|f| *f == RowFate::Keep)
    }

    /// `(parent, child)` index pairs.
    pub fn parent_child_pairs(&self) -> Vec<(usize, usize)> {
        self.children.iter().map(|c| (c.parent, c.index)).collect()
    }
}

fn mix(mut h: u64, v: u64) -> u64 {
    h ^= v
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(h << 6)
        .wrapping_add(h >> 2);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Appends the child described by `child` of local row `row` to `out`.
fn push_child<T: Real>(
    out: &mut GaussianCloud<T>,
    cloud: &GaussianCloud<T>,
    row: usize,
    child: &Child,
    seed: u64,
    iteration: u32,
) {
    out.push_row_from(cloud, row);
    let k = match child.kind {
        ChildKind::Clone => return,
        ChildKind::Split(k) => k,
    };
    let new_row = out.len() - 1;
    let h = [iteration as u64, child.parent as u64, k as u64]
        .into_iter()
        .fold(seed, mix);
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let ls = cloud.log_scale(row);
    let z = Vector3::from_fn(|a, _| {
        let n: f64 = StandardNormal.sample(&mut rng);
        n * ls[a].to_f64().exp()
    });
    let q = cloud.rotation(row).map(|v| v.to_f64());
    let qn = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let r = quat_to_matrix(q.map(|v| v / qn));
    let offset = r * z;
    let p = cloud.position(row);
    out.set_position(new_row, [0, 1, 2].map(|a| T::lit(p[a].to_f64() + offset[a])));
    let shrink = SPLIT_SCALE_DIVISOR.ln();
    out.set_log_scale(new_row, ls.map(|v| T::lit(v.to_f64() - shrink)));
}

/// Applies `plan` to the rows of one shard. `owned[r]` is the old global
/// index of local row `r` (ascending). Returns the new rows, their optimizer
/// state (copied for survivors, zero for children) and their new global
/// indices (ascending). Statistics are reset by the caller.
pub fn apply_plan<T: Real>(
    cloud: &GaussianCloud<T>,
    state: &AdamState<T>,
    owned: &[usize],
    plan: &DensifyPlan,
    seed: u64,
    iteration: u32,
) -> (GaussianCloud<T>, AdamState<T>, Vec<usize>) {
    let mut out = GaussianCloud::empty(cloud.degree());
    let mut out_state = AdamState::zeros_like(&out);
    let mut indices = Vec::new();
    let mut local_of = std::collections::HashMap::with_capacity(owned.len());
    for (r, &g) in owned.iter().enumerate() {
        local_of.insert(g, r);
        if let Some(n) = plan.new_index[g] {
            out.push_row_from(cloud, r);
            out_state.push_row_from(state, r);
            indices.push(n);
        }
    }
    for child in &plan.children {
        if let Some(&r) = local_of.get(&child.parent) {
            push_child(&mut out, cloud, r, child, seed, iteration);
            out_state.push_zero_row();
            indices.push(child.index);
        }
    }
    (out, out_state, indices)
}

/// Single-shard densification: decide, plan and apply.
pub fn densify_and_prune<T: Real>(
    cloud: &GaussianCloud<T>,
    state: &AdamState<T>,
    stats: &DensifyStats,
    th: &Thresholds,
    seed: u64,
    iteration: u32,
) -> (GaussianCloud<T>, AdamState<T>, DensifyPlan) {
    let mut fates: Vec<RowFate> = (0..cloud.len()).map(|r| row_fate(cloud, r, stats, th)).collect();
    let scores: Vec<f64> = (0..cloud.len()).map(|r| stats.score(r)).collect();
    cap_growth(&mut fates, &scores, th.max_gaussians);
    let plan = DensifyPlan::from_fates(fates);
    let owned: Vec<usize> = (0..cloud.len()).collect();
    let (c, s, _) = apply_plan(cloud, state, &owned, &plan, seed, iteration);
    (c, s, plan)
}
