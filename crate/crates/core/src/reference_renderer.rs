//! Ground-truth isosurface images by first-hit raycasting of the volume.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::image::Image;
use crate::volume::VolumeGrid;
use crate::{Error, Result};

pub const DEFAULT_ALBEDO: [f64; 3] = [0.87, 0.80, 0.66];
pub const DEFAULT_BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];
const BISECTION_STEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaycastOptions {
    pub albedo: [f64; 3],
    pub background: [f64; 3],
    /// March step as a fraction of the smallest voxel spacing.
    pub step_fraction: f64,
}

impl Default for RaycastOptions {
    fn default() -> Self {
        Self {
            albedo: DEFAULT_ALBEDO,
            background: DEFAULT_BACKGROUND,
            step_fraction: 0.5,
        }
    }
}

/// Ray/isosurface intersection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub point: [f64; 3],
    pub distance: f64,
}

fn add_scaled(o: [f64; 3], d: [f64; 3], t: f64) -> [f64; 3] {
    [o[0] + d[0] * t, o[1] + d[1] * t, o[2] + d[2] * t]
}

fn slab_interval(grid: &VolumeGrid, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, f64)> {
    let (lo, hi) = grid.bounds();
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-300 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Marches a unit-direction ray at a fixed step, then refines the first sign
/// change of `f - isovalue` by bisection and a final secant step.
pub fn first_hit(grid: &VolumeGrid, isovalue: f64, origin: [f64; 3], dir: [f64; 3], step: f64) -> Option<Hit> {
    let (t_enter, t_exit) = slab_interval(grid, origin, dir)?;
    let f = |t: f64| grid.sample_trilinear(add_scaled(origin, dir, t)) - isovalue;
    let mut t_prev = t_enter;
    let mut f_prev = f(t_prev);
    if f_prev == 0.0 {
        return Some(Hit {
            point: add_scaled(origin, dir, t_prev),
            distance: t_prev,
        });
    }
    loop {
        if t_prev >= t_exit {
            return None;
        }
        let t = (t_prev + step).min(t_exit);
        let ft = f(t);
        if (ft < 0.0) != (f_prev < 0.0) || ft == 0.0 {
            let (mut a, mut fa, mut b, mut fb) = (t_prev, f_prev, t, ft);
            for _ in 0..BISECTION_STEPS {
                let m = 0.5 * (a + b);
                let fm = f(m);
                if (fm < 0.0) == (fa < 0.0) && fm != 0.0 {
                    a = m;
                    fa = fm;
                } else {
                    b = m;
                    fb = fm;
                }
            }
            let t_hit = if fb == fa { b } else { a + (b - a) * fa / (fa - fb) };
            return Some(Hit {
                point: add_scaled(origin, dir, t_hit),
                distance: t_hit,
            });
        }
        t_prev = t;
        f_prev = ft;
    }
}

fn shade(grid: &VolumeGrid, hit: &Hit, dir: [f64; 3], albedo: [f64; 3]) -> [f64; 3] {
    let g = grid.gradient_central(hit.point);
    let len = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    let n = if len < 1e-12 {
        crate::volume::FALLBACK_NORMAL
    } else {
        [g[0] / len, g[1] / len, g[2] / len]
    };
    let facing = -(n[0] * dir[0] + n[1] * dir[1] + n[2] * dir[2]);
    let lambert = facing.abs();
    [
        (albedo[0] * lambert).clamp(0.0, 1.0),
        (albedo[1] * lambert).clamp(0.0, 1.0),
        (albedo[2] * lambert).clamp(0.0, 1.0),
    ]
}

/// Renders the isosurface seen by `cam` with a Lambertian headlight.
pub fn raycast_isosurface(grid: &VolumeGrid, isovalue: f64, cam: &Camera, opts: &RaycastOptions) -> Image<f32> {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let min_spacing = grid.spacing().into_iter().fold(f64::INFINITY, f64::min);
    let step = opts.step_fraction * min_spacing;
    let origin = cam.position();
    let mut data = vec![0f32; w * h * 3];
    data.par_chunks_mut(w * 3).enumerate().for_each(|(py, row)| {
        for px in 0..w {
            let dir = cam.ray_direction(px as f64 + 0.5, py as f64 + 0.5);
            let rgb = match first_hit(grid, isovalue, origin, dir, step) {
                Some(hit) => shade(grid, &hit, dir, opts.albedo),
                None => opts.background,
            };
            for c in 0..3 {
                row[px * 3 + c] = rgb[c].clamp(0.0, 1.0) as f32;
            }
        }
    });
    Image::from_vec(w, h, data).expect("sized buffer")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub camera_index: usize,
    pub camera: Camera,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn view_file_name(i: usize) -> String {
    format!("view_{i:04}.png")
}

/// Raycasts every camera into `out_dir/view_NNNN.png` and writes
/// `out_dir/manifest.json`.
pub fn generate_ground_truth(
    grid: &VolumeGrid,
    isovalue: f64,
    cameras: &[Camera],
    out_dir: impl AsRef<Path>,
    opts: &RaycastOptions,
) -> Result<Vec<ManifestEntry>> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let name = view_file_name(i);
        raycast_isosurface(grid, isovalue, cam, opts).save_png(out_dir.join(&name))?;
        entries.push(ManifestEntry {
            image: name,
            camera_index: i,
            camera: cam.clone(),
        });
    }
    write_manifest(out_dir.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(entries).expect("manifest serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a manifest and resolves its image paths relative to the manifest.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(ManifestEntry, PathBuf)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(entries
        .into_iter()
        .map(|e| {
            let p = base.join(&e.image);
            (e, p)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{make_orbit, OrbitSpec};

    fn sphere_grid(n: usize, r: f64) -> VolumeGrid {
        let c = (n - 1) as f64 / 2.0;
        VolumeGrid::from_fn([n; 3], [1.0; 3], [0.0; 3], |p| {
            ((p[0] - c).powi(2) + (p[1] - c).powi(2) + (p[2] - c).powi(2)).sqrt() - r
        })
        .unwrap()
    }

    #[test]
    fn constant_volume_is_all_background() {
        let g = VolumeGrid::new([8, 8, 8], [1.0; 3], [0.0; 3], vec![0.2; 512]).unwrap();
        let cam = Camera::look_at([3.5, 3.5, -20.0], [3.5; 3], [0.0, 1.0, 0.0], 1.0, 24, 16);
        let img = raycast_isosurface(&g, 0.5, &cam, &RaycastOptions::default());
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn silhouette_matches_projected_radius() {
        let n = 48;
        let r = 12.0;
        let g = sphere_grid(n, r);
        let c = (n - 1) as f64 / 2.0;
        let d = 60.0;
        let cam = Camera::look_at([c, c, c - d], [c; 3], [0.0, 1.0, 0.0], 0.7, 129, 129);
        let img = raycast_isosurface(&g, 0.0, &cam, &RaycastOptions::default());
        let row = (cam.cy.floor()) as usize;
        let covered = (0..img.width())
            .filter(|&x| img.pixel(x, row) != [1.0, 1.0, 1.0])
            .count();
        let expected = cam.fx * r / (d * d - r * r).sqrt();
        assert!(
            (covered as f64 / 2.0 - expected).abs() <= 1.5,
            "{covered} px vs radius {expected}"
        );
    }

    #[test]
    fn mirrored_camera_mirrors_image() {
        // field symmetric about x = c
        let n = 32;
        let c = (n - 1) as f64 / 2.0;
        let g = VolumeGrid::from_fn([n; 3], [1.0; 3], [0.0; 3], |p| {
            let dx = (p[0] - c).abs();
            (dx * dx * 1.5 + (p[1] - c + 3.0).powi(2) + (p[2] - c).powi(2) * 0.7).sqrt()
        })
        .unwrap();
        let eye = [c + 17.0, c - 9.0, c + 40.0];
        let mirror = [2.0 * c - eye[0], eye[1], eye[2]];
        let up = [0.0, 1.0, 0.0];
        let a = raycast_isosurface(
            &g,
            9.0,
            &Camera::look_at(eye, [c; 3], up, 0.8, 40, 30),
            &RaycastOptions::default(),
        );
        let b = raycast_isosurface(
            &g,
            9.0,
            &Camera::look_at(mirror, [c; 3], up, 0.8, 40, 30),
            &RaycastOptions::default(),
        );
        let flipped = b.flipped_horizontally();
        let max_diff = a
            .data()
            .iter()
            .zip(flipped.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0f32, f32::max);
        assert!(max_diff <= 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn hits_are_refined_onto_the_surface() {
        let g = sphere_grid(40, 11.0);
        let cams = make_orbit(&OrbitSpec::around([19.5; 3], 33.0, 6, 32, 32)).unwrap();
        let mut hits = 0;
        for cam in &cams {
            for py in 0..32 {
                for px in 0..32 {
                    let dir = cam.ray_direction(px as f64 + 0.5, py as f64 + 0.5);
                    if let Some(h) = first_hit(&g, 0.0, cam.position(), dir, 0.5) {
                        assert!(g.sample_trilinear(h.point).abs() < 1e-3);
                        hits += 1;
                    }
                }
            }
        }
        assert!(hits > 500);
    }

    #[test]
    fn output_dims_follow_camera() {
        let g = sphere_grid(16, 4.0);
        for res in [512u32, 1024, 2048] {
            let cam = Camera::look_at([7.5, 7.5, -30.0], [7.5; 3], [0.0, 1.0, 0.0], 0.3, res, res);
            // only the shape matters here; keep the volume tiny so this stays fast
            let img = raycast_isosurface(&g, 0.0, &cam, &RaycastOptions::default());
            assert_eq!((img.width(), img.height()), (res as usize, res as usize));
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn ground_truth_set_is_deterministic() {
        let g = sphere_grid(16, 5.0);
        let cams = make_orbit(&OrbitSpec::around([7.5; 3], 13.0, 3, 24, 24)).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m = generate_ground_truth(&g, 0.0, &cams, d1.path(), &RaycastOptions::default()).unwrap();
        generate_ground_truth(&g, 0.0, &cams, d2.path(), &RaycastOptions::default()).unwrap();
        assert_eq!(m.len(), 3);
        for e in &m {
            let a = fs::read(d1.path().join(&e.image)).unwrap();
            let b = fs::read(d2.path().join(&e.image)).unwrap();
            assert_eq!(a, b);
        }
        let back = read_manifest(d1.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[2].0.camera, cams[2]);

        let empty = tempfile::tempdir().unwrap();
        let m = generate_ground_truth(&g, 0.0, &[], empty.path(), &RaycastOptions::default()).unwrap();
        assert!(m.is_empty());
        let pngs = fs::read_dir(empty.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
            .count();
        assert_eq!(pngs, 0);
    }
}
