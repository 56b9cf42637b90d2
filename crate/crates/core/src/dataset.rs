//! Dataset descriptors and the synthetic sphere scene.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{make_orbit, OrbitPattern, OrbitSpec};
use crate::gaussian_model::{init_from_points, GaussianCloud};
use crate::reference_renderer::{raycast_isosurface, RaycastOptions};
use crate::training::TrainingData;
use crate::volume::{extract_isosurface_points, load_raw, Dtype, Endianness, ExtractOptions, PointCloud, VolumeGrid};
use crate::{Error, Result};

pub const DESCRIPTOR_FILE: &str = "dataset.toml";
pub const SPHERE_DIM: usize = 64;
pub const SPHERE_RADIUS: f64 = 20.0;
pub const SPHERE_VIEWS: usize = 64;
pub const SPHERE_RESOLUTION: u32 = 128;
pub const SPHERE_MAX_POINTS: usize = 3000;

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSource {
    pub path: PathBuf,
    pub dims: [usize; 3],
    pub dtype: Dtype,
    #[serde(default)]
    pub endianness: Endianness,
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSettings {
    pub stride: usize,
    pub max_points: Option<usize>,
    pub seed: u64,
}

impl Default for ExtractSettings {
    fn default() -> Self {
        Self {
            stride: 1,
            max_points: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitSettings {
    pub count: usize,
    pub pattern: OrbitPattern,
    pub seed: u64,
    /// Orbit radius in units of the volume's half-diagonal.
    pub radius_factor: f64,
    pub fov_y_deg: f64,
}

impl Default for OrbitSettings {
    fn default() -> Self {
        Self {
            count: crate::camera::DEFAULT_VIEW_COUNT,
            pattern: OrbitPattern::Fibonacci,
            seed: 0,
            radius_factor: 1.5,
            fov_y_deg: 60.0,
        }
    }
}

/// Everything needed to go from a raw volume to training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub volume: VolumeSource,
    pub isovalue: f64,
    pub resolutions: Vec<u32>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub extract: ExtractSettings,
    #[serde(default)]
    pub orbit: OrbitSettings,
}

impl DatasetDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() || self.resolutions.contains(&0) {
            return Err(Error::InvalidArgument(
                "resolutions must be a non-empty list of positive sizes".into(),
            ));
        }
        if self.volume.dims.contains(&0) {
            return Err(Error::InvalidArgument("volume dims must be positive".into()));
        }
        if !self.isovalue.is_finite() {
            return Err(Error::InvalidArgument("isovalue must be finite".into()));
        }
        if !(self.orbit.radius_factor > 0.0) {
            return Err(Error::InvalidArgument("orbit radius factor must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let d: Self = toml::from_str(text).map_err(|e| Error::Format(format!("dataset descriptor: {e}")))?;
        d.validate()?;
        Ok(d)
    }

    /// Reads a descriptor; relative paths in it are taken relative to the
    /// descriptor's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut d = Self::from_toml(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        d.volume.path = base.join(&d.volume.path);
        d.output_dir = base.join(&d.output_dir);
        Ok(d)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).expect("descriptor serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_volume(&self) -> Result<VolumeGrid> {
        let v = &self.volume;
        load_raw(&v.path, v.dims, v.dtype, v.spacing, v.endianness)
    }

    pub fn extract_options(&self) -> ExtractOptions {
        ExtractOptions {
            isovalue: self.isovalue,
            stride: self.extract.stride,
            max_points: self.extract.max_points,
            seed: self.extract.seed,
        }
    }

    pub fn orbit_spec(&self, grid: &VolumeGrid, resolution: u32) -> OrbitSpec {
        let mut spec = OrbitSpec::around(
            grid.center(),
            grid.half_diagonal(),
            self.orbit.count,
            resolution,
            resolution,
        );
        spec.radius = self.orbit.radius_factor * grid.half_diagonal();
        spec.fov_y = self.orbit.fov_y_deg.to_radians();
        spec.seed = self.orbit.seed;
        spec.pattern = self.orbit.pattern;
        spec
    }

    /// Initial Gaussians and 8-bit target views at `resolution`, built in
    /// memory.
    pub fn training_set(&self, resolution: u32, sh_degree: u32) -> Result<(GaussianCloud<f32>, TrainingData)> {
        let grid = self.load_volume()?;
        let orbit = self.orbit_spec(&grid, resolution);
        let (_, init, data) = build_training_set(&grid, self.isovalue, &self.extract_options(), &orbit, sh_degree)?;
        Ok((init, data))
    }

    pub fn points_path(&self) -> PathBuf {
        self.output_dir.join("points.sspc")
    }

    pub fn cameras_path(&self, resolution: u32) -> PathBuf {
        self.output_dir.join(format!("cameras_{resolution}.json"))
    }

    pub fn ground_truth_dir(&self, resolution: u32) -> PathBuf {
        self.output_dir.join(format!("gt_{resolution}"))
    }

    pub fn train_dir(&self, resolution: u32, workers: usize) -> PathBuf {
        self.output_dir.join(format!("train_{resolution}_w{workers}"))
    }
}

/// Distance-to-center field of an `n^3` grid; every isosurface is a sphere.
pub fn sphere_volume(n: usize) -> Result<VolumeGrid> {
    let c = (n as f64 - 1.0) / 2.0;
    VolumeGrid::from_fn([n; 3], [1.0; 3], [0.0; 3], |p| {
        ((p[0] - c).powi(2) + (p[1] - c).powi(2) + (p[2] - c).powi(2)).sqrt()
    })
}

/// Writes `grid` as little-endian `f32` without a header.
pub fn write_raw_f32(grid: &VolumeGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = grid.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Descriptor of the desk-scale sphere scene with the given output
/// directory, volume file name relative to the descriptor.
pub fn sphere_descriptor(volume_file: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> DatasetDescriptor {
    DatasetDescriptor {
        volume: VolumeSource {
            path: volume_file.into(),
            dims: [SPHERE_DIM; 3],
            dtype: Dtype::F32,
            endianness: Endianness::Little,
            spacing: [1.0; 3],
        },
        isovalue: SPHERE_RADIUS,
        resolutions: vec![SPHERE_RESOLUTION],
        output_dir: output_dir.into(),
        extract: ExtractSettings {
            max_points: Some(SPHERE_MAX_POINTS),
            ..ExtractSettings::default()
        },
        orbit: OrbitSettings {
            count: SPHERE_VIEWS,
            ..OrbitSettings::default()
        },
    }
}

/// Writes `sphere.raw` and `dataset.toml` into `dir` and returns the loaded
/// descriptor.
pub fn synthesize_sphere(dir: impl AsRef<Path>) -> Result<DatasetDescriptor> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_raw_f32(&sphere_volume(SPHERE_DIM)?, dir.join("sphere.raw"))?;
    let path = dir.join(DESCRIPTOR_FILE);
    sphere_descriptor("sphere.raw", "out").save(&path)?;
    DatasetDescriptor::load(&path)
}

/// Initial Gaussians plus 8-bit target views, built in memory exactly as the
/// file-based pipeline would (the targets match their PNG round trip).
pub fn build_training_set(
    grid: &VolumeGrid,
    isovalue: f64,
    extract: &ExtractOptions,
    orbit: &OrbitSpec,
    sh_degree: u32,
) -> Result<(PointCloud, GaussianCloud<f32>, TrainingData)> {
    let points = extract_isosurface_points(grid, extract)?;
    let init = init_from_points::<f32>(&points, sh_degree)?;
    let cameras = make_orbit(orbit)?;
    let opts = RaycastOptions::default();
    let targets = cameras
        .par_iter()
        .map(|c| raycast_isosurface(grid, isovalue, c, &opts).quantized())
        .collect();
    Ok((points, init, TrainingData::new(cameras, targets)?))
}

/// The desk-scale sphere scene at `resolution` with `views` cameras.
pub fn sphere_training_set(
    resolution: u32,
    views: usize,
    sh_degree: u32,
) -> Result<(GaussianCloud<f32>, TrainingData)> {
    // round trip through f32 like the raw file on disk
    let grid = sphere_volume(SPHERE_DIM)?;
    let data = grid.data().iter().map(|&v| v as f32 as f64).collect();
    let grid = VolumeGrid::new(grid.dims(), grid.spacing(), grid.origin(), data)?;
    let mut desc = sphere_descriptor("sphere.raw", "out");
    desc.orbit.count = views;
    let (_, init, data) = build_training_set(
        &grid,
        desc.isovalue,
        &desc.extract_options(),
        &desc.orbit_spec(&grid, resolution),
        sh_degree,
    )?;
    Ok((init, data))
}
