use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use super::forward::gaussian_power;
use super::{CameraParams, ProjectedSplat, RenderOptions, RenderOutput, TileGrid, TileRender};
use super::{COV2D_DILATION, MAX_ALPHA, MIN_ALPHA};
use crate::camera::Camera;
use crate::gaussian_model::{
    eval_color_unclamped, normalize_quat, quat_to_matrix, sh_coeff_count, sigmoid, GaussianCloud, SH_C1,
};
use crate::image::Image;
use crate::{Error, Real, Result};

/// Loss gradient with respect to one splat's screen-space quantities.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplatGrad<T: Real> {
    pub mean2d: [T; 2],
    pub conic: [T; 3],
    pub color: [T; 3],
    pub opacity: T,
    /// Pixels the splat contributed to.
    pub touched: u32,
}

impl<T: Real> SplatGrad<T> {
    #[inline]
    pub fn accumulate(&mut self, o: &Self) {
        self.mean2d[0] += o.mean2d[0];
        self.mean2d[1] += o.mean2d[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
        self.touched += o.touched;
    }

    /// Mean-gradient norm in NDC units, the densification statistic.
    pub fn ndc_grad_norm(&self, width: usize, height: usize) -> T {
        let gx = self.mean2d[0] * T::lit(0.5 * width as f64);
        let gy = self.mean2d[1] * T::lit(0.5 * height as f64);
        (gx * gx + gy * gy).sqrt()
    }
}

/// Screen-space gradients produced by one tile, in the tile's sorted splat
/// order. Splats that touched no pixel are omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct TileGrads<T: Real> {
    pub tile_id: usize,
    pub entries: Vec<(usize, SplatGrad<T>)>,
}

/// Reverse traversal of one tile.
pub fn backward_tile<T: Real>(
    splats: &[ProjectedSplat<T>],
    bin: &[u32],
    grid: &TileGrid,
    tile: &TileRender<T>,
    dl_dpixel: impl Fn(usize, usize) -> [T; 3],
    background: [T; 3],
) -> TileGrads<T> {
    let (x0, y0, x1, y1) = grid.tile_rect(tile.tile_id);
    let mut scratch = vec![SplatGrad::<T>::default(); bin.len()];
    let half = T::lit(0.5);
    let max_alpha = T::lit(MAX_ALPHA);
    let min_alpha = T::lit(MIN_ALPHA);
    let mut l = 0;
    for y in y0..y1 {
        let py = T::lit(y as f64) + half;
        for x in x0..x1 {
            let px = T::lit(x as f64) + half;
            let n = tile.n_contrib[l] as usize;
            let t_final = tile.t_final[l];
            l += 1;
            if n == 0 {
                continue;
            }
            let dl = dl_dpixel(x, y);
            let bg_dot = background[0] * dl[0] + background[1] * dl[1] + background[2] * dl[2];
            let mut t = t_final;
            let mut accum = [T::zero(); 3];
            let mut last_alpha = T::zero();
            let mut last_color = [T::zero(); 3];
            for j in (0..n).rev() {
                let s = &splats[bin[j] as usize];
                let (power, dx, dy) = gaussian_power(s, px, py);
                if power > T::zero() {
                    continue;
                }
                let g = power.exp();
                let raw = s.opacity * g;
                let alpha = raw.min(max_alpha);
                if alpha < min_alpha {
                    continue;
                }
                t /= T::one() - alpha;
                let w = alpha * t;
                let sg = &mut scratch[j];
                sg.touched += 1;
                let mut dl_dalpha = T::zero();
                for c in 0..3 {
                    sg.color[c] += w * dl[c];
                    accum[c] = last_alpha * last_color[c] + (T::one() - last_alpha) * accum[c];
                    dl_dalpha += (s.color[c] - accum[c]) * dl[c];
                }
                dl_dalpha *= t;
                last_alpha = alpha;
                last_color = s.color;
                dl_dalpha += -(t_final / (T::one() - alpha)) * bg_dot;
                if raw < max_alpha {
                    sg.opacity += g * dl_dalpha;
                    let dl_dpower = g * s.opacity * dl_dalpha;
                    let [ca, cb, cc] = s.conic;
                    sg.mean2d[0] += dl_dpower * (ca * dx + cb * dy);
                    sg.mean2d[1] += dl_dpower * (cb * dx + cc * dy);
                    sg.conic[0] += dl_dpower * (T::lit(-0.5) * dx * dx);
                    sg.conic[1] += dl_dpower * (-dx * dy);
                    sg.conic[2] += dl_dpower * (T::lit(-0.5) * dy * dy);
                }
            }
        }
    }
    TileGrads {
        tile_id: tile.tile_id,
        entries: bin
            .iter()
            .zip(scratch)
            .filter(|(_, g)| g.touched > 0)
            .map(|(&k, g)| (splats[k as usize].gaussian_index, g))
            .collect(),
    }
}

/// Sums tile contributions per Gaussian. Callers pass tiles in ascending id
/// order; that order is what makes the sums reproducible bit for bit.
pub fn accumulate_tile_grads<'a, T: Real>(
    tiles: impl IntoIterator<Item = &'a TileGrads<T>>,
    n_gaussians: usize,
) -> Vec<SplatGrad<T>> {
    let mut out = vec![SplatGrad::default(); n_gaussians];
    let mut last_tile = None;
    for tile in tiles {
        debug_assert!(last_tile.is_none_or(|t| t < tile.tile_id), "tiles out of order");
        last_tile = Some(tile.tile_id);
        for (gi, g) in &tile.entries {
            out[*gi].accumulate(g);
        }
    }
    out
}

fn check_context<T: Real>(splats: &[ProjectedSplat<T>], fwd: &RenderOutput<T>, dl: &Image<T>) -> Result<()> {
    if fwd.splat_count != splats.len() {
        return Err(Error::Dimension(format!(
            "forward pass saw {} splats, backward got {}",
            fwd.splat_count,
            splats.len()
        )));
    }
    if dl.width() != fwd.grid.width || dl.height() != fwd.grid.height {
        return Err(Error::Dimension(format!(
            "loss gradient is {}x{}, render was {}x{}",
            dl.width(),
            dl.height(),
            fwd.grid.width,
            fwd.grid.height
        )));
    }
    Ok(())
}

/// Screen-space gradients per Gaussian (indexed by Gaussian index, length
/// `n_gaussians`). Fills the densification statistics of `fwd.aux`.
pub fn render_backward_2d<T: Real>(
    splats: &[ProjectedSplat<T>],
    fwd: &mut RenderOutput<T>,
    dl_dimage: &Image<T>,
    n_gaussians: usize,
    opts: &RenderOptions,
) -> Result<Vec<SplatGrad<T>>> {
    check_context(splats, fwd, dl_dimage)?;
    let grid = fwd.grid;
    let bg = opts.background_t::<T>();
    let dl = |x: usize, y: usize| dl_dimage.pixel(x, y);
    let run = |tile: &TileRender<T>| backward_tile(splats, &fwd.bins[tile.tile_id], &grid, tile, dl, bg);
    let tiles: Vec<TileGrads<T>> = if opts.parallel {
        fwd.tiles.par_iter().map(run).collect()
    } else {
        fwd.tiles.iter().map(run).collect()
    };
    let grads = accumulate_tile_grads(&tiles, n_gaussians);
    fwd.aux.touched_pixels = grads.iter().map(|g| g.touched).collect();
    fwd.aux.grad2d_norm = grads.iter().map(|g| g.ndc_grad_norm(grid.width, grid.height)).collect();
    Ok(grads)
}

/// Full backward pass: parameter gradients shaped like `cloud`.
pub fn render_backward<T: Real>(
    cloud: &GaussianCloud<T>,
    cam: &Camera,
    splats: &[ProjectedSplat<T>],
    fwd: &mut RenderOutput<T>,
    dl_dimage: &Image<T>,
    opts: &RenderOptions,
) -> Result<GaussianCloud<T>> {
    let g2d = render_backward_2d(splats, fwd, dl_dimage, cloud.len(), opts)?;
    let params = CameraParams::new(cam);
    let mut grads = cloud.zeros_like();
    for s in splats {
        let i = s.gaussian_index;
        if g2d[i].touched > 0 {
            project_backward(cloud, i, &params, &g2d[i], &mut grads, i);
        }
    }
    Ok(grads)
}

/// Chains a splat's screen-space gradient back to row `row` of `cloud`,
/// writing into row `out_row` of `grads`.
pub fn project_backward<T: Real>(
    cloud: &GaussianCloud<T>,
    row: usize,
    cam: &CameraParams<T>,
    g: &SplatGrad<T>,
    grads: &mut GaussianCloud<T>,
    out_row: usize,
) {
    let zero = T::zero();
    let one = T::one();
    let two = T::lit(2.0);

    // forward recomputation
    let p = Vector3::from(cloud.position(row));
    let (q, qnorm) = normalize_quat(cloud.rotation(row)).expect("projected Gaussians have valid rotations");
    let r = quat_to_matrix(q);
    let ls = cloud.log_scale(row);
    let s = Vector3::new(ls[0].exp(), ls[1].exp(), ls[2].exp());
    let m = r * Matrix3::from_diagonal(&s);
    let sigma = {
        let sg = m * m.transpose();
        (sg + sg.transpose()) * T::lit(0.5)
    };
    let w = cam.rotation;
    let t = w * p + cam.translation;
    let jac = cam.jacobian(&t);
    let tm = jac * w;
    let cov = tm * sigma * tm.transpose();
    let dil = T::lit(COV2D_DILATION);
    let (a, b, c) = (cov[(0, 0)] + dil, cov[(0, 1)], cov[(1, 1)] + dil);
    let det = a * c - b * b;
    let det2 = det * det;

    // opacity
    let o = sigmoid(cloud.opacity_logits[row]);
    grads.opacity_logits[out_row] += g.opacity * o * (one - o);

    // color through SH and the view direction
    let v = p - cam.center;
    let vlen = v.norm();
    let dir = v / vlen;
    let degree = cloud.degree();
    let sh = cloud.sh_row(row);
    let (raw, basis) = eval_color_unclamped(sh, [dir.x, dir.y, dir.z], degree);
    let mut dl_dp = Vector3::zeros();
    {
        let k = sh_coeff_count(degree);
        let w_sh = cloud.sh_width();
        let gsh = &mut grads.sh[w_sh * out_row..w_sh * (out_row + 1)];
        let mut dl_ddir = Vector3::<T>::zeros();
        for ch in 0..3 {
            if raw[ch] < zero || raw[ch] > one {
                continue;
            }
            let gc = g.color[ch];
            for (j, bj) in basis.iter().enumerate().take(k) {
                gsh[3 * j + ch] += gc * *bj;
            }
            if degree >= 1 {
                let c1 = T::lit(SH_C1);
                dl_ddir.x += gc * (-c1 * sh[3 * 3 + ch]);
                dl_ddir.y += gc * (-c1 * sh[3 + ch]);
                dl_ddir.z += gc * (c1 * sh[3 * 2 + ch]);
            }
        }
        if degree >= 1 {
            dl_dp += (dl_ddir - dir * dir.dot(&dl_ddir)) / vlen;
        }
    }

    // conic -> dilated covariance (a, b, c)
    let [ga_, gb_, gc_] = g.conic;
    let dl_da = (ga_ * (-c * c) + gb_ * (b * c) + gc_ * (-b * b)) / det2;
    let dl_db = (ga_ * (two * b * c) + gb_ * (-(a * c + b * b)) + gc_ * (two * a * b)) / det2;
    let dl_dc = (ga_ * (-b * b) + gb_ * (a * b) + gc_ * (-a * a)) / det2;

    // cov2d = Tm Sigma Tm^T
    let g2 = Matrix2::new(dl_da, dl_db * T::lit(0.5), dl_db * T::lit(0.5), dl_dc);
    let dl_dsigma = tm.transpose() * g2 * tm;
    let dl_dtm = (g2 * tm * sigma) * two;
    let dl_djac = dl_dtm * w.transpose();

    // Jacobian and mean2d -> camera-space position
    let zi = one / t.z;
    let zi2 = zi * zi;
    let zi3 = zi2 * zi;
    let (fx, fy) = (cam.fx, cam.fy);
    let mut dl_dt = Vector3::new(
        g.mean2d[0] * fx * zi,
        g.mean2d[1] * fy * zi,
        -(g.mean2d[0] * fx * t.x + g.mean2d[1] * fy * t.y) * zi2,
    );
    dl_dt.x += dl_djac[(0, 2)] * (-fx * zi2);
    dl_dt.y += dl_djac[(1, 2)] * (-fy * zi2);
    dl_dt.z += dl_djac[(0, 0)] * (-fx * zi2)
        + dl_djac[(0, 2)] * (two * fx * t.x * zi3)
        + dl_djac[(1, 1)] * (-fy * zi2)
        + dl_djac[(1, 2)] * (two * fy * t.y * zi3);
    dl_dp += w.transpose() * dl_dt;
    for k in 0..3 {
        grads.positions[3 * out_row + k] += dl_dp[k];
    }

    // Sigma = M M^T, M = R S
    let dl_dm = (dl_dsigma * m) * two;
    let mut dl_dr = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            dl_dr[(i, j)] = dl_dm[(i, j)] * s[j];
        }
    }
    for j in 0..3 {
        let mut ds = zero;
        for i in 0..3 {
            ds += dl_dm[(i, j)] * r[(i, j)];
        }
        grads.log_scales[3 * out_row + j] += ds * s[j];
    }

    let [qw, qx, qy, qz] = q;
    let d = |i: usize, j: usize| dl_dr[(i, j)];
    let four = T::lit(4.0);
    let dqw = two * (-qz * d(0, 1) + qy * d(0, 2) + qz * d(1, 0) - qx * d(1, 2) - qy * d(2, 0) + qx * d(2, 1));
    let dqx = two * (qy * d(0, 1) + qz * d(0, 2) + qy * d(1, 0) - qw * d(1, 2) + qz * d(2, 0) + qw * d(2, 1))
        - four * qx * (d(1, 1) + d(2, 2));
    let dqy = two * (qx * d(0, 1) + qw * d(0, 2) + qx * d(1, 0) + qz * d(1, 2) - qw * d(2, 0) + qz * d(2, 1))
        - four * qy * (d(0, 0) + d(2, 2));
    let dqz = two * (-qw * d(0, 1) + qx * d(0, 2) + qw * d(1, 0) + qy * d(1, 2) + qx * d(2, 0) + qy * d(2, 1))
        - four * qz * (d(0, 0) + d(1, 1));
    let dq = [dqw, dqx, dqy, dqz];
    let proj = q[0] * dq[0] + q[1] * dq[1] + q[2] * dq[2] + q[3] * dq[3];
    for k in 0..4 {
        grads.rotations[4 * out_row + k] += (dq[k] - q[k] * proj) / qnorm;
    }
}

#[cfg(test)]
mod tests {
    use super::super::{project, render_forward, RenderOptions};
    use super::*;
    use crate::gaussian_model::logit;

    fn scene() -> (GaussianCloud<f64>, Camera) {
        let cam = Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, 1.0, 0.0], 1.0, 32, 32);
        let cloud = GaussianCloud::from_parts(
            vec![0.1, -0.2, 0.3, -0.3, 0.1, -0.2],
            vec![0.4, 0.2, 0.6, 0.5, 0.55, 0.3],
            vec![0.9, 0.2, -0.1, 0.3, 1.0, 0.0, 0.5, 0.0],
            vec![logit(0.4), logit(0.3)],
            vec![
                0.3, -0.2, 0.1, 0.1, 0.2, -0.1, -0.15, 0.05, 0.1, 0.2, 0.0, -0.2, -0.1, 0.0, 0.2, 0.1, -0.2, 0.05, 0.1,
                0.1, -0.1, -0.05, 0.15, 0.0,
            ],
            1,
        )
        .unwrap();
        (cloud, cam)
    }

    fn weights(x: usize, y: usize) -> [f64; 3] {
        let f = (x * 7 + y * 13) as f64;
        [(f * 0.37).sin(), (f * 0.11).cos(), 0.5 - (f * 0.05).sin()]
    }

    fn weighted_loss(cloud: &GaussianCloud<f64>, cam: &Camera) -> f64 {
        let grid = super::super::TileGrid::new(32, 32, 16);
        let splats = project(cloud, cam, &grid);
        let img = render_forward(&splats, 32, 32, &RenderOptions::default()).image;
        let mut l = 0.0;
        for y in 0..32 {
            for x in 0..32 {
                let (p, w) = (img.pixel(x, y), weights(x, y));
                l += p[0] * w[0] + p[1] * w[1] + p[2] * w[2];
            }
        }
        l
    }

    #[test]
    fn matches_finite_differences() {
        let (cloud, cam) = scene();
        let opts = RenderOptions::default();
        let splats = project(&cloud, &cam, &super::super::TileGrid::new(32, 32, 16));
        assert_eq!(splats.len(), 2);
        let mut fwd = render_forward(&splats, 32, 32, &opts);
        let mut dl = Image::<f64>::new(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                dl.set_pixel(x, y, weights(x, y));
            }
        }
        let g = render_backward(&cloud, &cam, &splats, &mut fwd, &dl, &opts).unwrap();
        let h = 1e-5;
        for grp in crate::gaussian_model::ParamGroup::ALL {
            for k in 0..cloud.group(grp).len() {
                let mut plus = cloud.clone();
                plus.group_mut(grp)[k] += h;
                let mut minus = cloud.clone();
                minus.group_mut(grp)[k] -= h;
                let fd = (weighted_loss(&plus, &cam) - weighted_loss(&minus, &cam)) / (2.0 * h);
                let a = g.group(grp)[k];
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-3);
                assert!(err < 1e-4, "{} [{k}]: analytic {a} vs fd {fd}", grp.name());
            }
        }
    }

    #[test]
    fn zero_loss_gradient_gives_zero() {
        let (cloud, cam) = scene();
        let opts = RenderOptions::default();
        let splats = project(&cloud, &cam, &super::super::TileGrid::new(32, 32, 16));
        let mut fwd = render_forward(&splats, 32, 32, &opts);
        let dl = Image::<f64>::new(32, 32);
        let g = render_backward(&cloud, &cam, &splats, &mut fwd, &dl, &opts).unwrap();
        for grp in crate::gaussian_model::ParamGroup::ALL {
            assert!(g.group(grp).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mismatched_context_is_rejected() {
        let (cloud, cam) = scene();
        let opts = RenderOptions::default();
        let splats = project(&cloud, &cam, &super::super::TileGrid::new(32, 32, 16));
        let mut fwd = render_forward(&splats, 32, 32, &opts);
        let wrong = Image::<f64>::new(16, 32);
        assert!(render_backward(&cloud, &cam, &splats, &mut fwd, &wrong, &opts).is_err());
        let dl = Image::<f64>::filled(32, 32, [1.0; 3]);
        assert!(render_backward(&cloud, &cam, &splats[..1], &mut fwd, &dl, &opts).is_err());
    }

    #[test]
    fn parallel_backward_is_bitwise_identical() {
        let (cloud, cam) = scene();
        let grid = super::super::TileGrid::new(32, 32, 16);
        let splats = project(&cloud, &cam, &grid);
        let dl = Image::<f64>::filled(32, 32, [0.3, -1.0, 0.5]);
        let seq = RenderOptions::default();
        let par = RenderOptions { parallel: true, ..seq };
        let mut f1 = render_forward(&splats, 32, 32, &seq);
        let mut f2 = render_forward(&splats, 32, 32, &par);
        let g1 = render_backward(&cloud, &cam, &splats, &mut f1, &dl, &seq).unwrap();
        let g2 = render_backward(&cloud, &cam, &splats, &mut f2, &dl, &par).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(f1.aux, f2.aux);
    }
}
