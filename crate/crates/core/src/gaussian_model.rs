//! Trainable Gaussian primitives.
//!
//! Parameters are stored unconstrained and activated on use: `exp` for
//! scales, `sigmoid` for opacity, normalization for rotation quaternions
//! (stored `w, x, y, z`).

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::volume::PointCloud;
use crate::{Error, Real, Result};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const MAX_SH_DEGREE: u32 = 1;
pub const INITIAL_OPACITY: f64 = 0.1;
const SCALE_FLOOR: f64 = 1e-7;
const BRUTE_FORCE_KNN_LIMIT: usize = 10_000;

/// Number of SH coefficients per color channel.
pub fn sh_coeff_count(degree: u32) -> usize {
    ((degree + 1) * (degree + 1)) as usize
}

/// Structure-of-arrays Gaussian set, one row per primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud<T = f32> {
    pub positions: Vec<T>,
    pub log_scales: Vec<T>,
    pub rotations: Vec<T>,
    pub opacity_logits: Vec<T>,
    /// `N x K x 3`, coefficient-major within a row.
    pub sh: Vec<T>,
    degree: u32,
}

/// The five parameter tensors, each with a fixed row width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Position,
    LogScale,
    Rotation,
    Opacity,
    Sh,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Position,
        ParamGroup::LogScale,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::Sh,
    ];

    pub fn width(self, degree: u32) -> usize {
        match self {
            ParamGroup::Position | ParamGroup::LogScale => 3,
            ParamGroup::Rotation => 4,
            ParamGroup::Opacity => 1,
            ParamGroup::Sh => 3 * sh_coeff_count(degree),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::LogScale => "log_scale",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Sh => "sh",
        }
    }
}

impl<T: Real> GaussianCloud<T> {
    pub fn empty(degree: u32) -> Self {
        Self {
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
            degree,
        }
    }

    pub fn from_parts(
        positions: Vec<T>,
        log_scales: Vec<T>,
        rotations: Vec<T>,
        opacity_logits: Vec<T>,
        sh: Vec<T>,
        degree: u32,
    ) -> Result<Self> {
        if degree > MAX_SH_DEGREE {
            return Err(Error::InvalidArgument(format!(
                "SH degree {degree} unsupported (max {MAX_SH_DEGREE})"
            )));
        }
        let n = opacity_logits.len();
        let cloud = Self {
            positions,
            log_scales,
            rotations,
            opacity_logits,
            sh,
            degree,
        };
        for g in ParamGroup::ALL {
            if cloud.group(g).len() != n * g.width(degree) {
                return Err(Error::Dimension(format!(
                    "{} has {} values, expected {}",
                    g.name(),
                    cloud.group(g).len(),
                    n * g.width(degree)
                )));
            }
        }
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logits.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn sh_width(&self) -> usize {
        ParamGroup::Sh.width(self.degree)
    }

    pub fn group(&self, g: ParamGroup) -> &[T] {
        match g {
            ParamGroup::Position => &self.positions,
            ParamGroup::LogScale => &self.log_scales,
            ParamGroup::Rotation => &self.rotations,
            ParamGroup::Opacity => &self.opacity_logits,
            ParamGroup::Sh => &self.sh,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut Vec<T> {
        match g {
            ParamGroup::Position => &mut self.positions,
            ParamGroup::LogScale => &mut self.log_scales,
            ParamGroup::Rotation => &mut self.rotations,
            ParamGroup::Opacity => &mut self.opacity_logits,
            ParamGroup::Sh => &mut self.sh,
        }
    }

    #[inline]
    pub fn position(&self, i: usize) -> [T; 3] {
        let p = &self.positions[3 * i..3 * i + 3];
        [p[0], p[1], p[2]]
    }

    #[inline]
    pub fn log_scale(&self, i: usize) -> [T; 3] {
        let s = &self.log_scales[3 * i..3 * i + 3];
        [s[0], s[1], s[2]]
    }

    #[inline]
    pub fn rotation(&self, i: usize) -> [T; 4] {
        let q = &self.rotations[4 * i..4 * i + 4];
        [q[0], q[1], q[2], q[3]]
    }

    #[inline]
    pub fn sh_row(&self, i: usize) -> &[T] {
        let w = self.sh_width();
        &self.sh[w * i..w * (i + 1)]
    }

    pub fn opacity(&self, i: usize) -> T {
        sigmoid(self.opacity_logits[i])
    }

    pub fn max_scale(&self, i: usize) -> T {
        let s = self.log_scale(i);
        s[0].max(s[1]).max(s[2]).exp()
    }

    pub fn set_position(&mut self, i: usize, p: [T; 3]) {
        self.positions[3 * i..3 * i + 3].copy_from_slice(&p);
    }

    pub fn set_log_scale(&mut self, i: usize, s: [T; 3]) {
        self.log_scales[3 * i..3 * i + 3].copy_from_slice(&s);
    }

    /// Appends row `i` of `src`.
    pub fn push_row_from(&mut self, src: &Self, i: usize) {
        for g in ParamGroup::ALL {
            let w = g.width(self.degree);
            let row = &src.group(g)[w * i..w * (i + 1)];
            self.group_mut(g).extend_from_slice(row);
        }
    }

    /// Same length and degree, every value zero.
    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<T>| vec![T::zero(); v.len()];
        Self {
            positions: z(&self.positions),
            log_scales: z(&self.log_scales),
            rotations: z(&self.rotations),
            opacity_logits: z(&self.opacity_logits),
            sh: z(&self.sh),
            degree: self.degree,
        }
    }

    pub fn push_zero_row(&mut self) {
        for g in ParamGroup::ALL {
            let w = g.width(self.degree);
            let v = self.group_mut(g);
            v.resize(v.len() + w, T::zero());
        }
    }

    /// New cloud holding the given rows in the given order.
    pub fn gather(&self, rows: &[usize]) -> Self {
        let mut out = Self::empty(self.degree);
        for &i in rows {
            out.push_row_from(self, i);
        }
        out
    }

    pub fn cast<U: Real>(&self) -> GaussianCloud<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::lit(x.to_f64())).collect::<Vec<U>>();
        GaussianCloud {
            positions: c(&self.positions),
            log_scales: c(&self.log_scales),
            rotations: c(&self.rotations),
            opacity_logits: c(&self.opacity_logits),
            sh: c(&self.sh),
            degree: self.degree,
        }
    }

    pub fn covariance(&self, i: usize) -> Result<Matrix3<T>> {
        covariance3d(self.rotation(i), self.log_scale(i))
    }

    /// Axis-aligned bounding box half-diagonal of the positions.
    pub fn extent(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in self.positions.chunks_exact(3) {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a].to_f64());
                hi[a] = hi[a].max(p[a].to_f64());
            }
        }
        0.5 * (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt()
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix<T: Real>(q: [T; 4]) -> Matrix3<T> {
    let [w, x, y, z] = q;
    let one = T::one();
    let two = T::lit(2.0);
    Matrix3::new(
        one - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        one - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        one - two * (x * x + y * y),
    )
}

pub fn normalize_quat<T: Real>(q: [T; 4]) -> Result<([T; 4], T)> {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if norm == T::zero() || !norm.is_finite() {
        return Err(Error::ZeroQuaternion);
    }
    Ok(([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm], norm))
}

/// `R S S^T R^T`, symmetrized.
pub fn covariance3d<T: Real>(quat: [T; 4], log_scale: [T; 3]) -> Result<Matrix3<T>> {
    let (q, _) = normalize_quat(quat)?;
    let r = quat_to_matrix(q);
    let s = Vector3::new(log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp());
    let m = r * Matrix3::from_diagonal(&s);
    let sigma = m * m.transpose();
    Ok((sigma + sigma.transpose()) * T::lit(0.5))
}

/// SH basis values at a unit direction, in coefficient order.
pub fn sh_basis<T: Real>(dir: [T; 3], degree: u32) -> [T; 4] {
    let c1 = T::lit(SH_C1);
    let mut b = [T::lit(SH_C0), T::zero(), T::zero(), T::zero()];
    if degree >= 1 {
        b[1] = -c1 * dir[1];
        b[2] = c1 * dir[2];
        b[3] = -c1 * dir[0];
    }
    b
}

/// View-dependent color `clamp(0.5 + sum_k c_k Y_k(dir), 0, 1)`.
pub fn eval_color<T: Real>(sh: &[T], view_dir: [T; 3], degree: u32) -> [T; 3] {
    let (rgb, _) = eval_color_unclamped(sh, view_dir, degree);
    rgb.map(|v| v.clamp(T::zero(), T::one()))
}

/// Unclamped color plus the basis used, for the backward pass.
pub(crate) fn eval_color_unclamped<T: Real>(sh: &[T], view_dir: [T; 3], degree: u32) -> ([T; 3], [T; 4]) {
    let k = sh_coeff_count(degree);
    let basis = sh_basis(view_dir, degree);
    let mut rgb = [T::lit(0.5); 3];
    for (j, b) in basis.iter().enumerate().take(k) {
        for c in 0..3 {
            rgb[c] += sh[3 * j + c] * *b;
        }
    }
    (rgb, basis)
}

/// Gaussians at the cloud's points: isotropic scale from the mean distance to
/// the three nearest neighbors, identity rotation, opacity 0.1, mid-gray.
pub fn init_from_points<T: Real>(cloud: &PointCloud, degree: u32) -> Result<GaussianCloud<T>> {
    if cloud.is_empty() {
        return Err(Error::EmptyPointCloud);
    }
    if degree > MAX_SH_DEGREE {
        return Err(Error::InvalidArgument(format!(
            "SH degree {degree} unsupported (max {MAX_SH_DEGREE})"
        )));
    }
    let pts: Vec<[f64; 3]> = cloud.positions.iter().map(|p| p.map(|v| v as f64)).collect();
    let dists = knn_mean_distance(&pts, 3);
    let n = pts.len();
    let opacity = T::lit(logit(INITIAL_OPACITY));
    let mut out = GaussianCloud::empty(degree);
    out.positions = pts.iter().flat_map(|p| p.map(T::lit)).collect();
    out.log_scales = dists
        .iter()
        .flat_map(|&d| [T::lit(d.max(SCALE_FLOOR).ln()); 3])
        .collect();
    out.rotations = (0..n)
        .flat_map(|_| [T::one(), T::zero(), T::zero(), T::zero()])
        .collect();
    out.opacity_logits = vec![opacity; n];
    // zero coefficients decode to the 0.5 bias
    out.sh = vec![T::zero(); n * 3 * sh_coeff_count(degree)];
    Ok(out)
}

/// Mean distance from each point to its `k` nearest other points; 1.0 when a
/// point has no neighbors at all.
pub fn knn_mean_distance(points: &[[f64; 3]], k: usize) -> Vec<f64> {
    if points.len() <= BRUTE_FORCE_KNN_LIMIT {
        knn_brute(points, k)
    } else {
        knn_grid(points, k)
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Keeps the `k` smallest values in ascending order.
fn insert_best(best: &mut Vec<f64>, d: f64, k: usize) {
    if best.len() == k && d >= best[k - 1] {
        return;
    }
    let pos = best.partition_point(|&b| b <= d);
    best.insert(pos, d);
    best.truncate(k);
}

fn mean_or_fallback(best: &[f64]) -> f64 {
    if best.is_empty() {
        1.0
    } else {
        best.iter().sum::<f64>() / best.len() as f64
    }
}

pub(crate) fn knn_brute(points: &[[f64; 3]], k: usize) -> Vec<f64> {
    let mut best = Vec::with_capacity(k + 1);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            best.clear();
            for (j, q) in points.iter().enumerate() {
                if i != j {
                    insert_best(&mut best, dist(p, q), k);
                }
            }
            mean_or_fallback(&best)
        })
        .collect()
}

pub(crate) fn knn_grid(points: &[[f64; 3]], k: usize) -> Vec<f64> {
    use rayon::prelude::*;

    let n = points.len();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let ext: Vec<f64> = (0..3).map(|a| (hi[a] - lo[a]).max(1e-12)).collect();
    // about two points per occupied cell for surface-like clouds
    let area_like = ext[0] * ext[1] + ext[1] * ext[2] + ext[0] * ext[2];
    let mut cell = (2.0 * area_like / n as f64).sqrt().max(1e-9);
    let dims = loop {
        let d: Vec<usize> = ext.iter().map(|e| (e / cell).floor() as usize + 1).collect();
        if d.iter().product::<usize>() <= 4 * n + 64 {
            break [d[0], d[1], d[2]];
        }
        cell *= 1.26;
    };
    let cell_of = |p: &[f64; 3]| -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            c[a] = (((p[a] - lo[a]) / cell) as usize).min(dims[a] - 1);
        }
        c
    };
    let flat = |c: [usize; 3]| c[0] + dims[0] * (c[1] + dims[1] * c[2]);
    let ncells = dims[0] * dims[1] * dims[2];
    let mut start = vec![0usize; ncells + 1];
    let cells: Vec<usize> = points.iter().map(|p| flat(cell_of(p))).collect();
    for &c in &cells {
        start[c + 1] += 1;
    }
    for i in 0..ncells {
        start[i + 1] += start[i];
    }
    let mut fill = start.clone();
    let mut members = vec![0usize; n];
    for (i, &c) in cells.iter().enumerate() {
        members[fill[c]] = i;
        fill[c] += 1;
    }
    let max_ring = dims.iter().copied().max().unwrap();

    (0..n)
        .into_par_iter()
        .map(|i| {
            let p = &points[i];
            let c = cell_of(p);
            let mut best = Vec::with_capacity(k + 1);
            for ring in 0..=max_ring {
                let r = ring as isize;
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                                continue;
                            }
                            let q = [c[0] as isize + dx, c[1] as isize + dy, c[2] as isize + dz];
                            if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as isize) {
                                continue;
                            }
                            let f = flat([q[0] as usize, q[1] as usize, q[2] as usize]);
                            for &j in &members[start[f]..start[f + 1]] {
                                if j != i {
                                    insert_best(&mut best, dist(p, &points[j]), k);
                                }
                            }
                        }
                    }
                }
                // Everything outside the searched block is farther than ring * cell.
                if best.len() == k && best[k - 1] <= ring as f64 * cell {
                    break;
                }
            }
            mean_or_fallback(&best)
        })
        .collect()
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SSGC";
const CHECKPOINT_VERSION: u32 = 1;

impl GaussianCloud<f32> {
    /// Writes `SSGC`, version, N, degree, then each parameter array as
    /// little-endian f32.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let total: usize = ParamGroup::ALL.iter().map(|g| self.group(*g).len()).sum();
        let mut buf = Vec::with_capacity(20 + 4 * total);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&self.degree.to_le_bytes());
        for g in ParamGroup::ALL {
            for v in self.group(g) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("{}: not an SSGC checkpoint", path.display())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported SSGC version {version}")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let degree = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        if degree > MAX_SH_DEGREE {
            return Err(Error::Format(format!("SSGC degree {degree} unsupported")));
        }
        let floats: Vec<f32> = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let widths: Vec<usize> = ParamGroup::ALL.iter().map(|g| g.width(degree) * n).collect();
        if floats.len() != widths.iter().sum::<usize>() || (bytes.len() - 20) % 4 != 0 {
            return Err(Error::Format(format!("SSGC body size does not match N = {n}")));
        }
        let mut rest = floats.as_slice();
        let mut take = |len: usize| {
            let (a, b) = rest.split_at(len);
            rest = b;
            a.to_vec()
        };
        let positions = take(widths[0]);
        let log_scales = take(widths[1]);
        let rotations = take(widths[2]);
        let opacity = take(widths[3]);
        let sh = take(widths[4]);
        Self::from_parts(positions, log_scales, rotations, opacity, sh, degree)
    }
}
