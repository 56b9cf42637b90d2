//! Raw scalar volumes, trilinear sampling and isosurface point extraction.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    U16,
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "u8" | "uint8" => Ok(Dtype::U8),
            "u16" | "uint16" => Ok(Dtype::U16),
            "f32" | "float32" | "float" => Ok(Dtype::F32),
            "f64" | "float64" | "double" => Ok(Dtype::F64),
            other => Err(Error::InvalidArgument(format!(
                "unknown dtype {other:?} (expected u8, u16, f32 or f64)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    #[default]
    Little,
    Big,
}

impl FromStr for Endianness {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "little" | "le" => Ok(Endianness::Little),
            "big" | "be" => Ok(Endianness::Big),
            other => Err(Error::InvalidArgument(format!(
                "unknown endianness {other:?} (expected little or big)"
            ))),
        }
    }
}

/// Regular scalar field, x-fastest storage.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f64>,
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "volume dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "volume spacing must be positive, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Dimension(format!(
                "volume data has {} samples, dims {:?} need {n}",
                data.len(),
                dims
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            data,
        })
    }

    /// Samples `f` at every voxel's world position.
    pub fn from_fn(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], f: impl Fn([f64; 3]) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f([
                        origin[0] + x as f64 * spacing[0],
                        origin[1] + y as f64 * spacing[1],
                        origin[2] + z as f64 * spacing[2],
                    ]));
                }
            }
        }
        Self::new(dims, spacing, origin, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn voxel(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn world_position(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    /// World-space bounding box spanned by the voxel centers.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut hi = self.origin;
        for a in 0..3 {
            hi[a] += (self.dims[a] - 1) as f64 * self.spacing[a];
        }
        (self.origin, hi)
    }

    pub fn center(&self) -> [f64; 3] {
        let (lo, hi) = self.bounds();
        [(lo[0] + hi[0]) * 0.5, (lo[1] + hi[1]) * 0.5, (lo[2] + hi[2]) * 0.5]
    }

    pub fn half_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        let d: f64 = (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum();
        0.5 * d.sqrt()
    }

    pub fn value_range(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Trilinear interpolation at a world point; points outside the box clamp
    /// to the boundary voxels.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> f64 {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let g = ((p[a] - self.origin[a]) / self.spacing[a]).clamp(0.0, (n - 1) as f64);
            if n == 1 {
                continue;
            }
            let i = (g.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = g - i as f64;
        }
        let step = |a: usize| usize::from(self.dims[a] > 1);
        let (x0, y0, z0) = (base[0], base[1], base[2]);
        let (x1, y1, z1) = (x0 + step(0), y0 + step(1), z0 + step(2));
        let [fx, fy, fz] = frac;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(self.voxel(x0, y0, z0), self.voxel(x1, y0, z0), fx);
        let c10 = lerp(self.voxel(x0, y1, z0), self.voxel(x1, y1, z0), fx);
        let c01 = lerp(self.voxel(x0, y0, z1), self.voxel(x1, y0, z1), fx);
        let c11 = lerp(self.voxel(x0, y1, z1), self.voxel(x1, y1, z1), fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }

    /// Central differences of [`Self::sample_trilinear`] with one-voxel steps,
    /// falling back to one-sided differences at the box boundary.
    pub fn gradient_central(&self, p: [f64; 3]) -> [f64; 3] {
        let (lo, hi) = self.bounds();
        let mut g = [0.0; 3];
        for a in 0..3 {
            if self.dims[a] == 1 {
                continue;
            }
            let h = self.spacing[a];
            let mut plus = p;
            let mut minus = p;
            plus[a] += h;
            minus[a] -= h;
            let fwd_ok = plus[a] <= hi[a] + 1e-12 * h;
            let back_ok = minus[a] >= lo[a] - 1e-12 * h;
            g[a] = match (back_ok, fwd_ok) {
                (true, true) => (self.sample_trilinear(plus) - self.sample_trilinear(minus)) / (2.0 * h),
                (false, true) => (self.sample_trilinear(plus) - self.sample_trilinear(p)) / h,
                (true, false) => (self.sample_trilinear(p) - self.sample_trilinear(minus)) / h,
                (false, false) => 0.0,
            };
        }
        g
    }
}

/// Reads a headerless raw volume. Integer types are normalized by their
/// maximum value; floating types are kept verbatim.
pub fn load_raw(
    path: impl AsRef<Path>,
    dims: [usize; 3],
    dtype: Dtype,
    spacing: [f64; 3],
    endianness: Endianness,
) -> Result<VolumeGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes, dims, dtype, spacing, endianness)
}

pub fn decode_raw(
    bytes: &[u8],
    dims: [usize; 3],
    dtype: Dtype,
    spacing: [f64; 3],
    endianness: Endianness,
) -> Result<VolumeGrid> {
    let n = dims[0] * dims[1] * dims[2];
    let expected = (n * dtype.size()) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let le = endianness == Endianness::Little;
    let data: Vec<f64> = match dtype {
        Dtype::U8 => bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        Dtype::U16 => bytes
            .chunks_exact(2)
            .map(|c| {
                let a = [c[0], c[1]];
                let v = if le {
                    u16::from_le_bytes(a)
                } else {
                    u16::from_be_bytes(a)
                };
                v as f64 / 65535.0
            })
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| {
                let a = [c[0], c[1], c[2], c[3]];
                (if le {
                    f32::from_le_bytes(a)
                } else {
                    f32::from_be_bytes(a)
                }) as f64
            })
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| {
                let a: [u8; 8] = c.try_into().expect("chunk of 8");
                if le {
                    f64::from_le_bytes(a)
                } else {
                    f64::from_be_bytes(a)
                }
            })
            .collect(),
    };
    VolumeGrid::new(dims, spacing, [0.0; 3], data)
}

/// Isosurface sample points with unit normals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f32; 3]>,
    pub normals: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(16 + self.len() * 24);
        buf.extend_from_slice(POINT_CLOUD_MAGIC);
        buf.extend_from_slice(&POINT_CLOUD_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in self.positions.iter().chain(&self.normals).flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..4] != POINT_CLOUD_MAGIC {
            return Err(Error::Format(format!("{}: not an SSPC point cloud", path.display())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != POINT_CLOUD_VERSION {
            return Err(Error::Format(format!("unsupported SSPC version {version}")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != n * 24 {
            return Err(Error::Format(format!(
                "SSPC body is {} bytes, expected {} for {n} points",
                body.len(),
                n * 24
            )));
        }
        let floats: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let to_vec3 = |s: &[f32]| s.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
        Ok(Self {
            positions: to_vec3(&floats[..3 * n]),
            normals: to_vec3(&floats[3 * n..]),
        })
    }
}

const POINT_CLOUD_MAGIC: &[u8; 4] = b"SSPC";
const POINT_CLOUD_VERSION: u32 = 1;

/// Unit normal used where the field gradient vanishes.
pub const FALLBACK_NORMAL: [f64; 3] = [0.0, 0.0, 1.0];

#[derive(Debug, Clone, Copy)]
pub struct ExtractOptions {
    pub isovalue: f64,
    pub stride: usize,
    pub max_points: Option<usize>,
    pub seed: u64,
}

impl ExtractOptions {
    pub fn new(isovalue: f64) -> Self {
        Self {
            isovalue,
            stride: 1,
            max_points: None,
            seed: 0,
        }
    }
}

/// Emits one point per lattice edge whose endpoint values straddle the
/// isovalue (the marching-cubes vertex set), in canonical z, y, x, axis order.
pub fn extract_isosurface_points(grid: &VolumeGrid, opts: &ExtractOptions) -> Result<PointCloud> {
    if opts.stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let s = opts.stride;
    let [nx, ny, nz] = grid.dims();
    let iso = opts.isovalue;
    let zs: Vec<usize> = (0..nz).step_by(s).collect();

    let slabs: Vec<Vec<([f64; 3], [f64; 3])>> = zs
        .par_iter()
        .map(|&z| {
            let mut out = Vec::new();
            for y in (0..ny).step_by(s) {
                for x in (0..nx).step_by(s) {
                    let a = grid.voxel(x, y, z);
                    let neighbors = [
                        (x + s < nx).then(|| (x + s, y, z)),
                        (y + s < ny).then(|| (x, y + s, z)),
                        (z + s < nz).then(|| (x, y, z + s)),
                    ];
                    for (bx, by, bz) in neighbors.into_iter().flatten() {
                        let b = grid.voxel(bx, by, bz);
                        if (a < iso) == (b < iso) {
                            continue;
                        }
                        let t = (iso - a) / (b - a);
                        let pa = grid.world_position(x, y, z);
                        let pb = grid.world_position(bx, by, bz);
                        let p = [
                            pa[0] + (pb[0] - pa[0]) * t,
                            pa[1] + (pb[1] - pa[1]) * t,
                            pa[2] + (pb[2] - pa[2]) * t,
                        ];
                        out.push((p, unit_normal(grid.gradient_central(p))));
                    }
                }
            }
            out
        })
        .collect();

    let mut points: Vec<([f64; 3], [f64; 3])> = slabs.into_iter().flatten().collect();
    if let Some(max) = opts.max_points {
        if points.len() > max {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut keep = rand::seq::index::sample(&mut rng, points.len(), max).into_vec();
            keep.sort_unstable();
            points = keep.into_iter().map(|i| points[i]).collect();
        }
    }

    let f32x3 = |v: [f64; 3]| [v[0] as f32, v[1] as f32, v[2] as f32];
    Ok(PointCloud {
        positions: points.iter().map(|(p, _)| f32x3(*p)).collect(),
        normals: points.iter().map(|(_, n)| f32x3(*n)).collect(),
    })
}

fn unit_normal(g: [f64; 3]) -> [f64; 3] {
    let len = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    if len < 1e-12 {
        FALLBACK_NORMAL
    } else {
        [g[0] / len, g[1] / len, g[2] / len]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(n: usize) -> (VolumeGrid, [f64; 3]) {
        let c = [(n - 1) as f64 / 2.0; 3];
        let g = VolumeGrid::from_fn([n; 3], [1.0; 3], [0.0; 3], |p| {
            ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt()
        })
        .unwrap();
        (g, c)
    }

    #[test]
    fn zeros_u8() {
        let g = decode_raw(&[0u8; 8], [2, 2, 2], Dtype::U8, [1.0; 3], Endianness::Little).unwrap();
        assert_eq!(g.data(), &[0.0; 8]);
    }

    #[test]
    fn u8_ramp_normalized() {
        // Written by hand rather than through the loader: voxel value = 16 x.
        let mut bytes = Vec::new();
        for _z in 0..4 {
            for _y in 0..4 {
                for x in 0..4u8 {
                    bytes.push(x * 16);
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.raw");
        fs::write(&path, &bytes).unwrap();
        let g = load_raw(&path, [4, 4, 4], Dtype::U8, [1.0; 3], Endianness::Little).unwrap();
        assert_eq!(g.voxel(3, 0, 0), 48.0 / 255.0);
        assert_eq!(g.sample_trilinear([3.0, 0.0, 0.0]), 48.0 / 255.0);
    }

    #[test]
    fn size_mismatch_reports_bytes() {
        let err = decode_raw(&[0u8; 7], [2, 2, 2], Dtype::U8, [1.0; 3], Endianness::Little).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 8") && msg.contains("got 7"), "{msg}");
    }

    #[test]
    fn u16_big_endian_and_f32_verbatim() {
        let g = decode_raw(
            &[0xff, 0xff, 0x00, 0x00],
            [2, 1, 1],
            Dtype::U16,
            [1.0; 3],
            Endianness::Big,
        )
        .unwrap();
        assert_eq!(g.data(), &[1.0, 0.0]);
        let bytes: Vec<u8> = [-2.5f32, 7.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let g = decode_raw(&bytes, [1, 2, 1], Dtype::F32, [1.0; 3], Endianness::Little).unwrap();
        assert_eq!(g.data(), &[-2.5, 7.0]);
    }

    #[test]
    fn unknown_dtype_rejected() {
        assert!("i32".parse::<Dtype>().is_err());
        assert_eq!("U16".parse::<Dtype>().unwrap(), Dtype::U16);
    }

    #[test]
    fn trilinear_lattice_and_constant() {
        let g = VolumeGrid::from_fn([3, 4, 5], [0.5, 1.0, 2.0], [1.0, -1.0, 0.0], |p| p[0] * 3.0 - p[2]).unwrap();
        assert_eq!(g.sample_trilinear(g.world_position(2, 3, 4)), g.voxel(2, 3, 4));
        let c = VolumeGrid::new([4, 4, 4], [1.0; 3], [0.0; 3], vec![0.5; 64]).unwrap();
        for p in [[0.3, 1.7, 2.2], [3.0, 3.0, 3.0], [-5.0, 10.0, 1.0]] {
            assert_eq!(c.sample_trilinear(p), 0.5);
        }
    }

    #[test]
    fn trilinear_cell_center_is_corner_mean() {
        let k = 0.25;
        let data: Vec<f64> = (0..8).map(|i| i as f64 * k).collect();
        let g = VolumeGrid::new([2, 2, 2], [1.0; 3], [0.0; 3], data).unwrap();
        // mean of 0..7 times k
        assert!((g.sample_trilinear([0.5, 0.5, 0.5]) - 3.5 * k).abs() < 1e-15);
    }

    #[test]
    fn out_of_box_clamps() {
        let g = VolumeGrid::from_fn([4, 4, 4], [1.0; 3], [0.0; 3], |p| p[0]).unwrap();
        assert_eq!(g.sample_trilinear([-3.0, 1.0, 1.0]), 0.0);
        assert_eq!(g.sample_trilinear([9.0, 1.0, 1.0]), 3.0);
    }

    #[test]
    fn gradients_of_linear_fields() {
        let c = VolumeGrid::new([4, 4, 4], [1.0; 3], [0.0; 3], vec![0.7; 64]).unwrap();
        assert_eq!(c.gradient_central([1.5, 1.5, 1.5]), [0.0; 3]);
        let g = VolumeGrid::from_fn([8, 8, 8], [1.0; 3], [0.0; 3], |p| p[0] + 2.0 * p[1] + 3.0 * p[2]).unwrap();
        for p in [[3.2, 2.7, 4.1], [1.0, 1.0, 1.0], [0.0, 5.5, 7.0]] {
            let d = g.gradient_central(p);
            for (got, want) in d.iter().zip([1.0, 2.0, 3.0]) {
                assert!((got - want).abs() < 1e-6, "{d:?} at {p:?}");
            }
        }
    }

    #[test]
    fn constant_volume_has_no_surface() {
        let c = VolumeGrid::new([6, 6, 6], [1.0; 3], [0.0; 3], vec![0.3; 216]).unwrap();
        let pc = extract_isosurface_points(&c, &ExtractOptions::new(0.5)).unwrap();
        assert!(pc.is_empty());
    }

    #[test]
    fn sphere_points_within_half_voxel_band() {
        let (g, c) = sphere(64);
        let pc = extract_isosurface_points(&g, &ExtractOptions::new(20.0)).unwrap();
        assert!(pc.len() > 1000);
        let (lo, hi) = g.bounds();
        let mut aligned = 0;
        for (p, n) in pc.positions.iter().zip(&pc.normals) {
            let d = [p[0] as f64 - c[0], p[1] as f64 - c[1], p[2] as f64 - c[2]];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            assert!((r - 20.0).abs() < 0.75, "r = {r}");
            for a in 0..3 {
                assert!(p[a] as f64 >= lo[a] && p[a] as f64 <= hi[a]);
            }
            let nl = (n[0] as f64).hypot(n[1] as f64).hypot(n[2] as f64);
            assert!((nl - 1.0).abs() < 1e-6);
            let dot = (0..3).map(|a| n[a] as f64 * d[a] / r).sum::<f64>();
            if dot > 0.99 {
                aligned += 1;
            }
        }
        assert!(aligned as f64 >= 0.99 * pc.len() as f64);
    }

    #[test]
    fn subsampling_is_deterministic() {
        let (g, _) = sphere(64);
        let opts = ExtractOptions {
            max_points: Some(1000),
            seed: 42,
            ..ExtractOptions::new(20.0)
        };
        let a = extract_isosurface_points(&g, &opts).unwrap();
        let b = extract_isosurface_points(&g, &opts).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(a, b);
        let full = extract_isosurface_points(&g, &ExtractOptions::new(20.0)).unwrap();
        let coarse = extract_isosurface_points(
            &g,
            &ExtractOptions {
                stride: 2,
                ..ExtractOptions::new(20.0)
            },
        )
        .unwrap();
        assert!(coarse.len() < full.len() / 2);
    }

    #[test]
    fn flat_plateau_uses_fallback_normal() {
        // Step between two plateaus: the crossing sits where one-voxel central
        // differences straddle the step, so force a zero gradient with stride.
        let g = VolumeGrid::from_fn([3, 1, 1], [1.0; 3], [0.0; 3], |p| if p[0] < 1.5 { 0.0 } else { 1.0 }).unwrap();
        let pc = extract_isosurface_points(&g, &ExtractOptions::new(0.5)).unwrap();
        assert_eq!(pc.len(), 1);
        let n = pc.normals[0];
        assert!((n[0] - 1.0).abs() < 1e-6 || n == [0.0, 0.0, 1.0]);
        assert_eq!(unit_normal([0.0, 0.0, 0.0]), FALLBACK_NORMAL);
    }

    #[test]
    fn sspc_roundtrip() {
        let (g, _) = sphere(16);
        let pc = extract_isosurface_points(&g, &ExtractOptions::new(5.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.sspc");
        pc.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"SSPC");
        assert_eq!(bytes.len(), 16 + 24 * pc.len());
        assert_eq!(PointCloud::load(&path).unwrap(), pc);
    }
}
