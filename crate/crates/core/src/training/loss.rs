//! Photometric loss and image metrics.
//!
//! All window statistics go through [`filter`], whose per-point arithmetic
//! depends only on the point, never on the region being evaluated. A worker
//! holding a tile plus a [`LOSS_HALO`] margin of the render therefore
//! reproduces the full-image values bit for bit.

use std::sync::OnceLock;

use crate::image::Image;
use crate::rasterizer::TileGrid;
use crate::{Error, Real, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 100.0;
/// Margin of rendered pixels around a region needed for its loss gradient:
/// one window radius for the local statistics, one for their adjoint.
pub const LOSS_HALO: usize = 2 * RADIUS as usize;

const RADIUS: isize = (SSIM_WINDOW / 2) as isize;

type IRect = (isize, isize, isize, isize);

fn window() -> &'static [f64; SSIM_WINDOW] {
    static W: OnceLock<[f64; SSIM_WINDOW]> = OnceLock::new();
    W.get_or_init(|| {
        let mut w = [0.0; SSIM_WINDOW];
        for (k, v) in w.iter_mut().enumerate() {
            let d = k as f64 - RADIUS as f64;
            *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
        let sum: f64 = w.iter().sum();
        w.map(|v| v / sum)
    })
}

/// Separable window correlation of `f` at every point of `rect`,
/// horizontal pass first.
fn filter(rect: IRect, f: impl Fn(isize, isize) -> f64) -> Vec<f64> {
    let w = window();
    let (x0, y0, x1, y1) = rect;
    let cols = (x1 - x0) as usize;
    let rows = (y1 - y0) as usize;
    let span = rows + 2 * RADIUS as usize;
    let mut h = vec![0.0; span * cols];
    for r in 0..span {
        let y = y0 - RADIUS + r as isize;
        for c in 0..cols {
            let x = x0 + c as isize;
            let mut s = 0.0;
            for (k, wk) in w.iter().enumerate() {
                s += wk * f(x + k as isize - RADIUS, y);
            }
            h[r * cols + c] = s;
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut s = 0.0;
            for (k, wk) in w.iter().enumerate() {
                s += wk * h[(r + k) * cols + c];
            }
            out[r * cols + c] = s;
        }
    }
    out
}

/// Window centers whose full window lies inside a `width x height` image.
fn valid_centers(width: usize, height: usize) -> IRect {
    (RADIUS, RADIUS, width as isize - RADIUS, height as isize - RADIUS)
}

fn intersect(a: IRect, b: IRect) -> Option<IRect> {
    let r = (a.0.max(b.0), a.1.max(b.1), a.2.min(b.2), a.3.min(b.3));
    (r.0 < r.2 && r.1 < r.3).then_some(r)
}

fn to_irect(r: (usize, usize, usize, usize)) -> IRect {
    (r.0 as isize, r.1 as isize, r.2 as isize, r.3 as isize)
}

fn window_count(width: usize, height: usize) -> usize {
    let w = width.saturating_sub(SSIM_WINDOW - 1);
    let h = height.saturating_sub(SSIM_WINDOW - 1);
    w * h
}

/// Local SSIM over `rect` (valid centers only) for one channel, plus the
/// partials `(dS/dmu_x, dS/dE[x^2], dS/dE[xy])` when `grad` is set.
struct SsimMap {
    s: Vec<f64>,
    d: Option<[Vec<f64>; 3]>,
}

fn ssim_map<T: Real>(img: &Image<T>, reference: &Image<T>, ch: usize, rect: IRect, grad: bool) -> SsimMap {
    let x = |u: isize, v: isize| img.pixel(u as usize, v as usize)[ch].to_f64();
    let y = |u: isize, v: isize| reference.pixel(u as usize, v as usize)[ch].to_f64();
    let mx = filter(rect, x);
    let my = filter(rect, y);
    let mxx = filter(rect, |u, v| x(u, v) * x(u, v));
    let myy = filter(rect, |u, v| y(u, v) * y(u, v));
    let mxy = filter(rect, |u, v| x(u, v) * y(u, v));
    let n = mx.len();
    let mut s = Vec::with_capacity(n);
    let mut d = grad.then(|| [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)]);
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * cxy + SSIM_C2;
        let b1 = ux * ux + uy * uy + SSIM_C1;
        let b2 = vx + vy + SSIM_C2;
        let si = a1 * a2 / (b1 * b2);
        s.push(si);
        if let Some([d1, d2, d3]) = d.as_mut() {
            let bb = b1 * b2;
            d1.push(2.0 * uy * a2 / bb - 2.0 * ux * si / b1 + 2.0 * ux * si / b2 - 2.0 * uy * a1 / bb);
            d2.push(-si / b2);
            d3.push(2.0 * a1 / bb);
        }
    }
    SsimMap { s, d }
}

fn check_dims<T: Real>(img: &Image<T>, reference: &Image<T>) -> Result<()> {
    if !img.same_dims(reference) {
        return Err(Error::Dimension(format!(
            "image is {}x{}, reference is {}x{}",
            img.width(),
            img.height(),
            reference.width(),
            reference.height()
        )));
    }
    Ok(())
}

fn check_ssim_size(width: usize, height: usize) -> Result<()> {
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {width}x{height}"
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`, capped at 100.
pub fn psnr<T: Real>(img: &Image<T>, reference: &Image<T>) -> Result<f64> {
    check_dims(img, reference)?;
    let n = img.data().len();
    if n == 0 {
        return Err(Error::Dimension("empty image".into()));
    }
    // compensated sum: a uniform difference must give its exact PSNR
    let (mut se, mut comp) = (0.0f64, 0.0f64);
    for (a, b) in img.data().iter().zip(reference.data()) {
        let d = a.to_f64() - b.to_f64();
        let v = d * d;
        let t = se + v;
        comp += if se.abs() >= v { (se - t) + v } else { (v - t) + se };
        se = t;
    }
    let mse = (se + comp) / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-20.0 * mse.sqrt().log10()).min(PSNR_CAP))
}

/// Mean local SSIM over valid window positions and channels.
pub fn ssim<T: Real>(img: &Image<T>, reference: &Image<T>) -> Result<f64> {
    check_dims(img, reference)?;
    check_ssim_size(img.width(), img.height())?;
    let rect = valid_centers(img.width(), img.height());
    let mut sum = 0.0;
    for ch in 0..3 {
        sum += ssim_map(img, reference, ch, rect, false).s.iter().sum::<f64>();
    }
    Ok(sum / (3 * window_count(img.width(), img.height())) as f64)
}

/// Per-tile sums from which the scalar loss is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossPartials {
    /// Sum of `|x - y|` over the tile's pixels and channels.
    pub l1: f64,
    /// Sum of local SSIM over the valid window centers inside the tile.
    pub ssim: f64,
}

/// Loss sums for one tile. Reads `img` within the tile plus a window radius.
pub fn tile_loss_partials<T: Real>(img: &Image<T>, reference: &Image<T>, grid: &TileGrid, tile: usize) -> LossPartials {
    let rect = grid.tile_rect(tile);
    let mut l1 = 0.0;
    for y in rect.1..rect.3 {
        for x in rect.0..rect.2 {
            let (a, b) = (img.pixel(x, y), reference.pixel(x, y));
            for ch in 0..3 {
                l1 += (a[ch].to_f64() - b[ch].to_f64()).abs();
            }
        }
    }
    let mut ssim = 0.0;
    if let Some(c) = intersect(to_irect(rect), valid_centers(grid.width, grid.height)) {
        for ch in 0..3 {
            for s in ssim_map(img, reference, ch, c, false).s {
                ssim += s;
            }
        }
    }
    LossPartials { l1, ssim }
}

/// `(1 - lambda) * mean|x - y| + lambda * (1 - mean SSIM)` from tile
/// partials, summed in the order given.
pub fn combine_loss<'a>(
    partials: impl IntoIterator<Item = &'a LossPartials>,
    width: usize,
    height: usize,
    lambda: f64,
) -> f64 {
    let mut l1 = 0.0;
    let mut ssim = 0.0;
    for p in partials {
        l1 += p.l1;
        ssim += p.ssim;
    }
    let l1 = l1 / (3 * width * height) as f64;
    let ssim = ssim / (3 * window_count(width, height)) as f64;
    (1.0 - lambda) * l1 + lambda * (1.0 - ssim)
}

/// Loss gradient for the pixels of `rect`, row-major. `img` must be valid
/// within `rect` grown by [`LOSS_HALO`] (clipped to the image).
pub fn loss_grad_region<T: Real>(
    img: &Image<T>,
    reference: &Image<T>,
    rect: (usize, usize, usize, usize),
    lambda: f64,
) -> Vec<[T; 3]> {
    let (width, height) = (img.width(), img.height());
    let (x0, y0, x1, y1) = rect;
    let n = (x1 - x0) * (y1 - y0);
    let l1_scale = (1.0 - lambda) / (3 * width * height) as f64;
    let windows = window_count(width, height);
    let mut out = vec![[T::zero(); 3]; n];
    let mut grads = vec![[0.0f64; 3]; n];
    for (g, (x, y)) in grads
        .iter_mut()
        .zip((y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y))))
    {
        let (a, b) = (img.pixel(x, y), reference.pixel(x, y));
        for ch in 0..3 {
            let d = a[ch].to_f64() - b[ch].to_f64();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            g[ch] = l1_scale * sign;
        }
    }
    let grown = (
        x0 as isize - RADIUS,
        y0 as isize - RADIUS,
        x1 as isize + RADIUS,
        y1 as isize + RADIUS,
    );
    if lambda != 0.0 && windows > 0 {
        if let Some(c) = intersect(grown, valid_centers(width, height)) {
            let ssim_scale = lambda / (3 * windows) as f64;
            let cols = (c.2 - c.0) as usize;
            let inside = |u: isize, v: isize| u >= c.0 && u < c.2 && v >= c.1 && v < c.3;
            let at = |m: &[f64], u: isize, v: isize| {
                if inside(u, v) {
                    m[(v - c.1) as usize * cols + (u - c.0) as usize]
                } else {
                    0.0
                }
            };
            let r = to_irect(rect);
            for ch in 0..3 {
                let map = ssim_map(img, reference, ch, c, true);
                let [d1, d2, d3] = map.d.expect("requested");
                let f1 = filter(r, |u, v| at(&d1, u, v));
                let f2 = filter(r, |u, v| at(&d2, u, v));
                let f3 = filter(r, |u, v| at(&d3, u, v));
                let mut i = 0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let xv = img.pixel(x, y)[ch].to_f64();
                        let yv = reference.pixel(x, y)[ch].to_f64();
                        let ds = f1[i] + 2.0 * xv * f2[i] + yv * f3[i];
                        grads[i][ch] -= ssim_scale * ds;
                        i += 1;
                    }
                }
            }
        }
    }
    for (o, g) in out.iter_mut().zip(&grads) {
        *o = g.map(T::lit);
    }
    out
}

/// Scalar loss and its gradient with respect to `img`. The scalar is
/// assembled from 16x16 tile partials in ascending tile order.
pub fn loss_l1_dssim<T: Real>(img: &Image<T>, reference: &Image<T>, lambda: f64) -> Result<(f64, Image<T>)> {
    check_dims(img, reference)?;
    check_ssim_size(img.width(), img.height())?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    let (width, height) = (img.width(), img.height());
    let grid = TileGrid::new(width, height, crate::rasterizer::TILE_SIZE);
    let partials: Vec<LossPartials> = (0..grid.tile_count())
        .map(|t| tile_loss_partials(img, reference, &grid, t))
        .collect();
    let loss = combine_loss(&partials, width, height, lambda);
    let g = loss_grad_region(img, reference, (0, 0, width, height), lambda);
    let mut grad = Image::new(width, height);
    for (i, v) in g.into_iter().enumerate() {
        grad.set_pixel(i % width, i / width, v);
    }
    Ok((loss, grad))
}
