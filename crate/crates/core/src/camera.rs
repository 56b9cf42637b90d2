//! Pinhole cameras and orbit generation.
//!
//! Convention: the camera looks down +z, image u grows to the right and v
//! grows downward. Pixel `(px, py)` is centered at `(px + 0.5, py + 0.5)`.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// World-to-camera rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    /// Camera at `eye` looking at `target`. When the view direction is
    /// parallel to `up`, the less aligned of the x and y axes stands in.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], fov_y: f64, width: u32, height: u32) -> Self {
        let eye = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye).normalize();
        let mut up = Vector3::from(up);
        let mut up_ortho = up - forward * up.dot(&forward);
        if up_ortho.norm() < 1e-6 {
            let x = Vector3::x();
            let y = Vector3::y();
            up = if forward.dot(&x).abs() <= forward.dot(&y).abs() {
                x
            } else {
                y
            };
            up_ortho = up - forward * up.dot(&forward);
        }
        let down = -up_ortho.normalize();
        let right = down.cross(&forward);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let f = height as f64 / (2.0 * (fov_y / 2.0).tan());
        Camera {
            rotation: row_major(&r),
            translation: [t.x, t.y, t.z],
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.rotation)
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> [f64; 3] {
        let c = -(self.rotation_matrix().transpose() * Vector3::from(self.translation));
        [c.x, c.y, c.z]
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation_matrix() * Vector3::from(p) + Vector3::from(self.translation);
        [q.x, q.y, q.z]
    }

    /// Projects a world point to `(u, v, depth)`. A non-positive depth means
    /// the point is behind the camera.
    pub fn world_to_pixel(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let [x, y, z] = self.to_camera(p);
        (self.fx * x / z + self.cx, self.fy * y / z + self.cy, z)
    }

    /// Unit world-space direction of the ray through continuous pixel
    /// coordinates `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> [f64; 3] {
        let d = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        let w = (self.rotation_matrix().transpose() * d).normalize();
        [w.x, w.y, w.z]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation_matrix();
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        if orth > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(
                "camera rotation is not a proper rotation".into(),
            ));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidArgument("principal point outside the image".into()));
        }
        Ok(())
    }

    /// Same pose and field of view at a different image size.
    pub fn with_resolution(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrbitPattern {
    /// Golden-angle spiral over the whole sphere.
    #[default]
    Fibonacci,
    /// Single equatorial ring, useful for turntable videos.
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitSpec {
    pub count: usize,
    pub center: [f64; 3],
    pub radius: f64,
    pub up: [f64; 3],
    pub fov_y: f64,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    #[serde(default)]
    pub pattern: OrbitPattern,
}

pub const DEFAULT_VIEW_COUNT: usize = 448;
pub const DEFAULT_FOV_Y: f64 = std::f64::consts::FRAC_PI_3;

impl OrbitSpec {
    /// Default orbit around a volume: 60° field of view at 1.5 times the
    /// half-diagonal of its bounding box.
    pub fn around(center: [f64; 3], half_diagonal: f64, count: usize, width: u32, height: u32) -> Self {
        Self {
            count,
            center,
            radius: 1.5 * half_diagonal,
            up: [0.0, 0.0, 1.0],
            fov_y: DEFAULT_FOV_Y,
            width,
            height,
            seed: 0,
            pattern: OrbitPattern::Fibonacci,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::InvalidArgument("orbit radius must be positive".into()));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidArgument("fov_y must lie in (0, pi)".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        let up = Vector3::from(self.up);
        if up.norm() < 1e-12 {
            return Err(Error::InvalidArgument("up vector must be non-zero".into()));
        }
        Ok(())
    }
}

/// Camera positions on a sphere about `spec.center`, each looking at the
/// center. The seed rotates the pattern about the up axis.
pub fn make_orbit(spec: &OrbitSpec) -> Result<Vec<Camera>> {
    spec.validate()?;
    if spec.count == 0 {
        return Ok(Vec::new());
    }
    let up = Vector3::from(spec.up).normalize();
    let helper = if up.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = (helper - up * helper.dot(&up)).normalize();
    let e2 = up.cross(&e1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase = if spec.seed == 0 {
        0.0
    } else {
        rng.random::<f64>() * std::f64::consts::TAU
    };
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let n = spec.count;
    let center = Vector3::from(spec.center);

    Ok((0..n)
        .map(|i| {
            let (height, theta) = match spec.pattern {
                OrbitPattern::Fibonacci if n == 1 => (1.0, phase),
                OrbitPattern::Fibonacci => (1.0 - 2.0 * (i as f64 + 0.5) / n as f64, phase + golden * i as f64),
                OrbitPattern::Ring => (0.0, phase + std::f64::consts::TAU * i as f64 / n as f64),
            };
            let ring = (1.0 - height * height).max(0.0).sqrt();
            let dir = e1 * (ring * theta.cos()) + e2 * (ring * theta.sin()) + up * height;
            let eye = center + dir * spec.radius;
            Camera::look_at(
                [eye.x, eye.y, eye.z],
                spec.center,
                spec.up,
                spec.fov_y,
                spec.width,
                spec.height,
            )
        })
        .collect())
}

pub fn save_cameras(path: impl AsRef<Path>, cameras: &[Camera]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(cameras).expect("cameras serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(count: usize) -> OrbitSpec {
        OrbitSpec::around([1.0, -2.0, 0.5], 10.0, count, 128, 96)
    }

    #[test]
    fn default_orbit_has_448_views_on_sphere() {
        let s = spec(DEFAULT_VIEW_COUNT);
        let cams = make_orbit(&s).unwrap();
        assert_eq!(cams.len(), 448);
        for c in &cams {
            let p = c.position();
            let d = ((p[0] - 1.0).powi(2) + (p[1] + 2.0).powi(2) + (p[2] - 0.5).powi(2)).sqrt();
            assert!((d - s.radius).abs() < 1e-6);
            c.validate().unwrap();
            let (u, v, depth) = c.world_to_pixel(s.center);
            assert!((u - c.cx).abs() < 1e-4 && (v - c.cy).abs() < 1e-4);
            assert!((depth - s.radius).abs() < 1e-4);
        }
    }

    #[test]
    fn single_camera_sits_on_pole_without_nan() {
        let cams = make_orbit(&spec(1)).unwrap();
        assert_eq!(cams.len(), 1);
        let c = &cams[0];
        assert!(c.rotation.iter().chain(&c.translation).all(|v| v.is_finite()));
        c.validate().unwrap();
        let p = c.position();
        assert!((p[2] - (0.5 + 15.0)).abs() < 1e-9);
    }

    #[test]
    fn empty_orbit() {
        assert!(make_orbit(&spec(0)).unwrap().is_empty());
    }

    #[test]
    fn fibonacci_separation_is_near_uniform() {
        let s = spec(64);
        let dirs: Vec<Vector3<f64>> = make_orbit(&s)
            .unwrap()
            .iter()
            .map(|c| (Vector3::from(c.position()) - Vector3::from(s.center)).normalize())
            .collect();
        let mut min_angle = f64::INFINITY;
        for i in 0..dirs.len() {
            for j in 0..i {
                min_angle = min_angle.min(dirs[i].dot(&dirs[j]).clamp(-1.0, 1.0).acos());
            }
        }
        // hexagonal packing spacing for 64 caps on the unit sphere
        let ideal = (8.0 * std::f64::consts::PI / (3f64.sqrt() * 64.0)).sqrt();
        assert!(min_angle >= 0.8 * ideal, "{min_angle} vs {ideal}");
    }

    #[test]
    fn orbit_is_deterministic_and_seeded() {
        let a = make_orbit(&spec(20)).unwrap();
        assert_eq!(a, make_orbit(&spec(20)).unwrap());
        let b = make_orbit(&OrbitSpec { seed: 9, ..spec(20) }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn ring_pattern_stays_on_equator() {
        let s = OrbitSpec {
            pattern: OrbitPattern::Ring,
            ..spec(12)
        };
        for c in make_orbit(&s).unwrap() {
            assert!((c.position()[2] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_examples() {
        let cam = Camera {
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            translation: [0.0; 3],
            fx: 100.0,
            fy: 100.0,
            cx: 64.0,
            cy: 64.0,
            width: 128,
            height: 128,
        };
        assert_eq!(cam.world_to_pixel([0.0, 0.0, 7.0]), (64.0, 64.0, 7.0));
        assert_eq!(cam.world_to_pixel([0.5, 0.0, 1.0]), (114.0, 64.0, 1.0));
        assert!(cam.world_to_pixel([0.0, 0.0, -2.0]).2 < 0.0);
    }

    #[test]
    fn invalid_orbit_rejected() {
        assert!(make_orbit(&OrbitSpec { radius: 0.0, ..spec(3) }).is_err());
        assert!(make_orbit(&OrbitSpec { fov_y: 3.5, ..spec(3) }).is_err());
    }

    #[test]
    fn camera_json_roundtrip() {
        let cams = make_orbit(&spec(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cams.json");
        save_cameras(&path, &cams).unwrap();
        assert_eq!(load_cameras(&path).unwrap(), cams);
    }
}
