use nalgebra::{Matrix2x3, Matrix3, Vector3};

use super::{TileGrid, COV2D_DILATION, NEAR_PLANE};
use crate::camera::Camera;
use crate::gaussian_model::{covariance3d, eval_color_unclamped, sigmoid, GaussianCloud};
use crate::Real;

/// Camera converted once to the working precision.
#[derive(Debug, Clone, Copy)]
pub struct CameraParams<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
    pub center: Vector3<T>,
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CameraParams<T> {
    pub fn new(cam: &Camera) -> Self {
        let r = cam.rotation_matrix();
        let c = cam.position();
        Self {
            rotation: r.map(T::lit),
            translation: Vector3::from(cam.translation).map(T::lit),
            center: Vector3::from(c).map(T::lit),
            fx: T::lit(cam.fx),
            fy: T::lit(cam.fy),
            cx: T::lit(cam.cx),
            cy: T::lit(cam.cy),
            width: cam.width as usize,
            height: cam.height as usize,
        }
    }

    /// Projection Jacobian at camera-space point `t`.
    pub(crate) fn jacobian(&self, t: &Vector3<T>) -> Matrix2x3<T> {
        let zi = T::one() / t.z;
        let zi2 = zi * zi;
        Matrix2x3::new(
            self.fx * zi,
            T::zero(),
            -self.fx * t.x * zi2,
            T::zero(),
            self.fy * zi,
            -self.fy * t.y * zi2,
        )
    }
}

/// Inclusive-exclusive rectangle of tile coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TileSpan {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl TileSpan {
    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    pub fn contains(&self, tx: usize, ty: usize) -> bool {
        (self.x0 as usize..self.x1 as usize).contains(&tx) && (self.y0 as usize..self.y1 as usize).contains(&ty)
    }

    /// Tile ids in row-major order.
    pub fn tiles(self, grid: &TileGrid) -> impl Iterator<Item = usize> {
        let tiles_x = grid.tiles_x;
        (self.y0 as usize..self.y1 as usize)
            .flat_map(move |ty| (self.x0 as usize..self.x1 as usize).map(move |tx| ty * tiles_x + tx))
    }

    /// Tiles touched by the box `center +- radius` in pixel coordinates.
    pub fn covering(u: f64, v: f64, radius: f64, grid: &TileGrid) -> Self {
        let ts = grid.tile_size as f64;
        let lo = |c: f64, n: usize| ((c - radius) / ts).floor().clamp(0.0, n as f64) as u32;
        let hi = |c: f64, n: usize| (((c + radius) / ts).floor() + 1.0).clamp(0.0, n as f64) as u32;
        Self {
            x0: lo(u, grid.tiles_x),
            y0: lo(v, grid.tiles_y),
            x1: hi(u, grid.tiles_x),
            y1: hi(v, grid.tiles_y),
        }
    }
}

/// A Gaussian as seen by one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedSplat<T: Real> {
    pub gaussian_index: usize,
    pub mean2d: [T; 2],
    /// Dilated screen covariance `(a, b, c)` of `[[a, b], [b, c]]`.
    pub cov2d: [T; 3],
    /// Inverse of `cov2d` in the same layout.
    pub conic: [T; 3],
    pub depth: T,
    pub color: [T; 3],
    pub opacity: T,
    pub tile_span: TileSpan,
}

/// Projects row `row` of `cloud`; `None` when culled by the near plane or
/// when the 3-sigma box misses the image.
pub fn project_one<T: Real>(
    cloud: &GaussianCloud<T>,
    row: usize,
    gaussian_index: usize,
    cam: &CameraParams<T>,
    grid: &TileGrid,
) -> Option<ProjectedSplat<T>> {
    let p = Vector3::from(cloud.position(row));
    let t = cam.rotation * p + cam.translation;
    if t.z <= T::lit(NEAR_PLANE) {
        return None;
    }
    let sigma = covariance3d(cloud.rotation(row), cloud.log_scale(row)).ok()?;
    let tm = cam.jacobian(&t) * cam.rotation;
    let cov = tm * sigma * tm.transpose();
    let dil = T::lit(COV2D_DILATION);
    let (a, b, c) = (cov[(0, 0)] + dil, cov[(0, 1)], cov[(1, 1)] + dil);
    let det = a * c - b * b;
    if !(det > T::zero()) {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let mid = T::lit(0.5) * (a + c);
    let lambda_max = mid + (mid * mid - det).max(T::zero()).sqrt();
    let radius = 3.0 * lambda_max.to_f64().sqrt();

    let zi = T::one() / t.z;
    let mean2d = [cam.fx * t.x * zi + cam.cx, cam.fy * t.y * zi + cam.cy];
    let span = TileSpan::covering(mean2d[0].to_f64(), mean2d[1].to_f64(), radius, grid);
    if span.is_empty() {
        return None;
    }

    let dir = (p - cam.center).normalize();
    let (raw, _) = eval_color_unclamped(cloud.sh_row(row), [dir.x, dir.y, dir.z], cloud.degree());
    Some(ProjectedSplat {
        gaussian_index,
        mean2d,
        cov2d: [a, b, c],
        conic,
        depth: t.z,
        color: raw.map(|v| v.clamp(T::zero(), T::one())),
        opacity: sigmoid(cloud.opacity_logits[row]),
        tile_span: span,
    })
}

/// Projects every Gaussian; output keeps ascending Gaussian order.
pub fn project<T: Real>(cloud: &GaussianCloud<T>, cam: &Camera, grid: &TileGrid) -> Vec<ProjectedSplat<T>> {
    project_indexed(cloud, None, cam, grid)
}

/// As [`project`], labelling row `r` with `indices[r]` when a shard holds a
/// subset of the global cloud.
pub fn project_indexed<T: Real>(
    cloud: &GaussianCloud<T>,
    indices: Option<&[usize]>,
    cam: &Camera,
    grid: &TileGrid,
) -> Vec<ProjectedSplat<T>> {
    let params = CameraParams::new(cam);
    (0..cloud.len())
        .filter_map(|r| project_one(cloud, r, indices.map_or(r, |ix| ix[r]), &params, grid))
        .collect()
}
