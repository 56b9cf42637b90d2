//! Tile-based differentiable splatting.
//!
//! Forward: [`project`] every Gaussian to a [`ProjectedSplat`], sort globally
//! by `(depth, gaussian_index)`, bin into 16x16 tiles and alpha-composite
//! front to back. Backward: per-tile reverse traversal yields screen-space
//! gradients ([`SplatGrad`]) that are summed in ascending tile order and then
//! chained through the projection to the Gaussian parameters.
//!
//! Every per-tile routine is public so the distributed runtime can run the
//! same arithmetic on a subset of tiles.

mod backward;
mod forward;
mod project;

pub use backward::{
    accumulate_tile_grads, backward_tile, project_backward, render_backward, render_backward_2d, SplatGrad, TileGrads,
};
pub use forward::{bin_splats, composite_tile, render_forward, sort_order, RenderAux, RenderOutput, TileRender};
pub use project::{project, project_indexed, project_one, CameraParams, ProjectedSplat, TileSpan};

use crate::Real;

pub const TILE_SIZE: usize = 16;
pub const NEAR_PLANE: f64 = 0.01;
pub const COV2D_DILATION: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

/// Tile decomposition of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileGrid {
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
}

impl TileGrid {
    pub fn new(width: usize, height: usize, tile_size: usize) -> Self {
        assert!(tile_size > 0, "tile size must be positive");
        Self {
            width,
            height,
            tile_size,
            tiles_x: width.div_ceil(tile_size),
            tiles_y: height.div_ceil(tile_size),
        }
    }

    pub fn tile_count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` of a tile, end-exclusive.
    pub fn tile_rect(&self, tile: usize) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (
            x0,
            y0,
            (x0 + self.tile_size).min(self.width),
            (y0 + self.tile_size).min(self.height),
        )
    }

    pub fn tile_of_pixel(&self, x: usize, y: usize) -> usize {
        (y / self.tile_size) * self.tiles_x + x / self.tile_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
    pub tile_size: usize,
    /// Process tiles on the rayon pool. Output is identical either way.
    pub parallel: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: crate::reference_renderer::DEFAULT_BACKGROUND,
            tile_size: TILE_SIZE,
            parallel: false,
        }
    }
}

impl RenderOptions {
    pub(crate) fn background_t<T: Real>(&self) -> [T; 3] {
        self.background.map(T::lit)
    }
}
