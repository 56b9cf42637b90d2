use std::cmp::Ordering;

use rayon::prelude::*;

use super::{ProjectedSplat, RenderOptions, TileGrid, MAX_ALPHA, MIN_ALPHA, MIN_TRANSMITTANCE};
use crate::image::Image;
use crate::Real;

/// Positions into `splats` sorted by `(depth, gaussian_index)`.
pub fn sort_order<T: Real>(splats: &[ProjectedSplat<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&splats[a], &splats[b]);
        sa.depth
            .partial_cmp(&sb.depth)
            .unwrap_or(Ordering::Equal)
            .then(sa.gaussian_index.cmp(&sb.gaussian_index))
    });
    order
}

/// Per-tile lists of splat positions in sorted order. Tiles rejected by
/// `keep_tile` get empty lists.
pub fn bin_splats<T: Real>(
    splats: &[ProjectedSplat<T>],
    order: &[usize],
    grid: &TileGrid,
    keep_tile: impl Fn(usize) -> bool,
) -> Vec<Vec<u32>> {
    let mut bins = vec![Vec::new(); grid.tile_count()];
    for &k in order {
        for tile in splats[k].tile_span.tiles(grid) {
            if keep_tile(tile) {
                bins[tile].push(k as u32);
            }
        }
    }
    bins
}

/// Composited pixels of one tile, tile-local row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TileRender<T: Real> {
    pub tile_id: usize,
    pub color: Vec<[T; 3]>,
    pub t_final: Vec<T>,
    /// Number of bin entries traversed up to and including the last
    /// contributor.
    pub n_contrib: Vec<u32>,
}

#[inline]
pub(super) fn gaussian_power<T: Real>(s: &ProjectedSplat<T>, px: T, py: T) -> (T, T, T) {
    let dx = px - s.mean2d[0];
    let dy = py - s.mean2d[1];
    let [a, b, c] = s.conic;
    let power = T::lit(-0.5) * (a * dx * dx + c * dy * dy) - b * dx * dy;
    (power, dx, dy)
}

/// Front-to-back compositing of one tile.
pub fn composite_tile<T: Real>(
    splats: &[ProjectedSplat<T>],
    bin: &[u32],
    grid: &TileGrid,
    tile_id: usize,
    background: [T; 3],
) -> TileRender<T> {
    let (x0, y0, x1, y1) = grid.tile_rect(tile_id);
    let n = (x1 - x0) * (y1 - y0);
    let mut out = TileRender {
        tile_id,
        color: Vec::with_capacity(n),
        t_final: Vec::with_capacity(n),
        n_contrib: Vec::with_capacity(n),
    };
    let half = T::lit(0.5);
    let max_alpha = T::lit(MAX_ALPHA);
    let min_alpha = T::lit(MIN_ALPHA);
    let min_t = T::lit(MIN_TRANSMITTANCE);
    for y in y0..y1 {
        let py = T::lit(y as f64) + half;
        for x in x0..x1 {
            let px = T::lit(x as f64) + half;
            let mut t = T::one();
            let mut rgb = [T::zero(); 3];
            let mut last = 0u32;
            for (j, &k) in bin.iter().enumerate() {
                let s = &splats[k as usize];
                let (power, _, _) = gaussian_power(s, px, py);
                if power > T::zero() {
                    continue;
                }
                let alpha = (s.opacity * power.exp()).min(max_alpha);
                if alpha < min_alpha {
                    continue;
                }
                let next_t = t * (T::one() - alpha);
                if next_t < min_t {
                    break;
                }
                let w = alpha * t;
                for c in 0..3 {
                    rgb[c] += s.color[c] * w;
                }
                t = next_t;
                last = j as u32 + 1;
            }
            for c in 0..3 {
                rgb[c] += t * background[c];
            }
            out.color.push(rgb);
            out.t_final.push(t);
            out.n_contrib.push(last);
        }
    }
    out
}

/// Per-pixel compositing state kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderAux<T: Real> {
    pub width: usize,
    pub height: usize,
    /// Transmittance left for the background, per pixel.
    pub t_final: Vec<T>,
    /// Contributing splats per pixel.
    pub contributors: Vec<u32>,
    /// Pixels each Gaussian contributed to, indexed by Gaussian index. Filled
    /// by the backward pass.
    pub touched_pixels: Vec<u32>,
    /// Norm of each Gaussian's screen-space mean gradient, NDC-scaled. Filled
    /// by the backward pass.
    pub grad2d_norm: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct RenderOutput<T: Real> {
    pub image: Image<T>,
    pub aux: RenderAux<T>,
    /// Positions into the splat list in compositing order.
    pub order: Vec<usize>,
    pub bins: Vec<Vec<u32>>,
    pub tiles: Vec<TileRender<T>>,
    pub grid: TileGrid,
    pub(crate) splat_count: usize,
}

/// Renders the splats over the background.
pub fn render_forward<T: Real>(
    splats: &[ProjectedSplat<T>],
    width: usize,
    height: usize,
    opts: &RenderOptions,
) -> RenderOutput<T> {
    let grid = TileGrid::new(width, height, opts.tile_size);
    let order = sort_order(splats);
    let bins = bin_splats(splats, &order, &grid, |_| true);
    let bg = opts.background_t::<T>();
    let render = |tile: usize| composite_tile(splats, &bins[tile], &grid, tile, bg);
    let tiles: Vec<TileRender<T>> = if opts.parallel {
        (0..grid.tile_count()).into_par_iter().map(render).collect()
    } else {
        (0..grid.tile_count()).map(render).collect()
    };

    let mut image = Image::new(width, height);
    let mut t_final = vec![T::zero(); width * height];
    let mut contributors = vec![0u32; width * height];
    for tile in &tiles {
        let (x0, y0, x1, y1) = grid.tile_rect(tile.tile_id);
        let tw = x1 - x0;
        for y in y0..y1 {
            for x in x0..x1 {
                let l = (y - y0) * tw + (x - x0);
                image.set_pixel(x, y, tile.color[l]);
                t_final[y * width + x] = tile.t_final[l];
                contributors[y * width + x] = tile.n_contrib[l];
            }
        }
    }
    RenderOutput {
        image,
        aux: RenderAux {
            width,
            height,
            t_final,
            contributors,
            touched_pixels: Vec::new(),
            grad2d_norm: Vec::new(),
        },
        order,
        bins,
        tiles,
        grid,
        splat_count: splats.len(),
    }
}
