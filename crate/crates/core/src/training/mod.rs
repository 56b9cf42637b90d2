//! Single-worker optimization loop and its building blocks.

mod adam;
mod densify;
mod loss;
mod report;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, adam_update, AdamState, GroupRates, LearningRates, BETA1, BETA2, EPSILON};
pub use densify::{
    apply_plan, cap_growth, densify_and_prune, row_fate, Child, ChildKind, DensifyConfig, DensifyPlan, DensifyStats,
    RowFate, Thresholds, SPLIT_SCALE_DIVISOR,
};
pub use loss::{
    combine_loss, loss_grad_region, loss_l1_dssim, psnr, ssim, tile_loss_partials, LossPartials, LOSS_HALO, PSNR_CAP,
    SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW,
};
pub use report::{EvalRecord, TrainReport, LOSSES_HEADER, REPORT_HEADER};

use crate::camera::Camera;
use crate::gaussian_model::GaussianCloud;
use crate::image::Image;
use crate::rasterizer::{project, render_backward_2d, render_forward, CameraParams, RenderOptions, TileGrid};
use crate::reference_renderer::read_manifest;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u32,
    pub lambda_dssim: f64,
    /// Evaluate every this many iterations (0: only at start and end).
    pub eval_interval: u32,
    pub seed: u64,
    /// Expected image size; `None` accepts whatever the data has.
    pub resolution: Option<u32>,
    pub background: [f64; 3],
    pub sh_degree: u32,
    /// Rasterize tiles on the rayon pool.
    pub parallel: bool,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lambda_dssim: 0.2,
            eval_interval: 500,
            seed: 0,
            resolution: None,
            background: crate::reference_renderer::DEFAULT_BACKGROUND,
            sh_degree: 1,
            parallel: true,
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return Err(Error::InvalidArgument(format!(
                "lambda_dssim must be in [0, 1], got {}",
                self.lambda_dssim
            )));
        }
        if self.resolution == Some(0) {
            return Err(Error::InvalidArgument("resolution must be positive".into()));
        }
        if self.background.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("background must lie in [0, 1]".into()));
        }
        self.lr.validate()?;
        self.densify.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            background: self.background,
            parallel: self.parallel,
            ..RenderOptions::default()
        }
    }

    pub fn eval_due(&self, step: u32) -> bool {
        step == self.iterations || (self.eval_interval > 0 && step.is_multiple_of(self.eval_interval))
    }
}

/// Posed target views.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub cameras: Vec<Camera>,
    pub targets: Vec<Image<f32>>,
}

impl TrainingData {
    pub fn new(cameras: Vec<Camera>, targets: Vec<Image<f32>>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::InvalidArgument("training needs at least one view".into()));
        }
        if cameras.len() != targets.len() {
            return Err(Error::Dimension(format!(
                "{} cameras but {} images",
                cameras.len(),
                targets.len()
            )));
        }
        for (i, (c, t)) in cameras.iter().zip(&targets).enumerate() {
            c.validate()?;
            if t.width() != c.width as usize || t.height() != c.height as usize {
                return Err(Error::Dimension(format!(
                    "view {i}: image is {}x{}, camera is {}x{}",
                    t.width(),
                    t.height(),
                    c.width,
                    c.height
                )));
            }
        }
        Ok(Self { cameras, targets })
    }

    /// Loads the views listed in a ground-truth manifest.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let mut cameras = Vec::new();
        let mut targets = Vec::new();
        for (entry, path) in read_manifest(manifest)? {
            targets.push(Image::load_png(&path)?);
            cameras.push(entry.camera);
        }
        Self::new(cameras, targets)
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Width of the first view; all views are checked against `expected`.
    pub fn resolution(&self, expected: Option<u32>) -> Result<u32> {
        let res = self.cameras[0].width;
        if let Some(want) = expected {
            if let Some(c) = self.cameras.iter().find(|c| c.width != want || c.height != want) {
                return Err(Error::Dimension(format!(
                    "configured resolution {want} but a view is {}x{}",
                    c.width, c.height
                )));
            }
        }
        Ok(res)
    }
}

/// Epoch-based view order: every view once per epoch, shuffled per epoch
/// from the seed.
#[derive(Debug, Clone)]
pub struct ViewSchedule {
    seed: u64,
    views: usize,
    epoch: Option<u64>,
    order: Vec<usize>,
}

impl ViewSchedule {
    pub fn new(seed: u64, views: usize) -> Self {
        Self {
            seed,
            views,
            epoch: None,
            order: Vec::new(),
        }
    }

    /// View used by zero-based iteration `it`.
    pub fn view(&mut self, it: u32) -> usize {
        let epoch = it as u64 / self.views as u64;
        if self.epoch != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            self.order = (0..self.views).collect();
            self.order.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        self.order[it as usize % self.views]
    }
}

/// Mean loss, PSNR and SSIM over all views. Metrics use 8-bit renders and
/// targets.
pub fn evaluate(cloud: &GaussianCloud<f32>, data: &TrainingData, cfg: &TrainConfig) -> Result<(f64, f64, f64)> {
    let opts = RenderOptions {
        parallel: false,
        ..cfg.render_options()
    };
    let per_view: Vec<Result<(f64, f64, f64)>> = data
        .cameras
        .par_iter()
        .zip(&data.targets)
        .map(|(cam, target)| {
            let (w, h) = (cam.width as usize, cam.height as usize);
            let grid = TileGrid::new(w, h, opts.tile_size);
            let splats = project(cloud, cam, &grid);
            let img = render_forward(&splats, w, h, &opts).image;
            let (loss, _) = loss_l1_dssim(&img, target, cfg.lambda_dssim)?;
            let (q, t) = (img.quantized(), target.quantized());
            Ok((loss, psnr(&q, &t)?, ssim(&q, &t)?))
        })
        .collect();
    let n = per_view.len() as f64;
    let mut sums = (0.0, 0.0, 0.0);
    for v in per_view {
        let (l, p, s) = v?;
        sums.0 += l;
        sums.1 += p;
        sums.2 += s;
    }
    Ok((sums.0 / n, sums.1 / n, sums.2 / n))
}

pub(crate) fn eval_record(
    cloud: &GaussianCloud<f32>,
    data: &TrainingData,
    cfg: &TrainConfig,
    iteration: u32,
    wall_s: f64,
) -> Result<EvalRecord> {
    let (loss, psnr, ssim) = evaluate(cloud, data, cfg)?;
    Ok(EvalRecord {
        iteration,
        loss,
        psnr,
        ssim,
        wall_s,
        gaussians: cloud.len(),
    })
}

/// Optimizes `init` against `data` on one worker.
pub fn train_single(
    init: &GaussianCloud<f32>,
    data: &TrainingData,
    cfg: &TrainConfig,
) -> Result<(GaussianCloud<f32>, TrainReport)> {
    cfg.validate()?;
    let resolution = data.resolution(cfg.resolution)?;
    let opts = cfg.render_options();
    let extent = init.extent();
    let mut cloud = init.clone();
    let mut state = AdamState::zeros_like(&cloud);
    let mut stats = DensifyStats::new(cloud.len());
    let mut schedule = ViewSchedule::new(cfg.seed, data.len());
    let mut report = TrainReport::new(1, resolution);
    report.records.push(eval_record(&cloud, data, cfg, 0, 0.0)?);

    let mut wall = 0.0;
    for it in 0..cfg.iterations {
        let t0 = Instant::now();
        let step = it + 1;
        let view = schedule.view(it);
        let cam = &data.cameras[view];
        let (w, h) = (cam.width as usize, cam.height as usize);
        let grid = TileGrid::new(w, h, opts.tile_size);
        let splats = project(&cloud, cam, &grid);
        let mut fwd = render_forward(&splats, w, h, &opts);
        let (loss, dl) = loss_l1_dssim(&fwd.image, &data.targets[view], cfg.lambda_dssim)?;
        let g2d = render_backward_2d(&splats, &mut fwd, &dl, cloud.len(), &opts)?;
        let params = CameraParams::new(cam);
        let mut grads = cloud.zeros_like();
        for s in &splats {
            let i = s.gaussian_index;
            if g2d[i].touched > 0 {
                crate::rasterizer::project_backward(&cloud, i, &params, &g2d[i], &mut grads, i);
                stats.record(i, &g2d[i], w, h);
            }
        }
        adam_step(
            &mut cloud,
            &grads,
            &mut state,
            step as u64,
            &cfg.lr.at(it, cfg.iterations, extent),
        )?;
        report.losses.push(loss);

        if cfg.densify.due(step, cfg.iterations) {
            let th = cfg.densify.thresholds(resolution, extent);
            let (c, s, _) = densify_and_prune(&cloud, &state, &stats, &th, cfg.seed, step);
            cloud = c;
            state = s;
            stats = DensifyStats::new(cloud.len());
        }
        wall += t0.elapsed().as_secs_f64();
        if cfg.eval_due(step) {
            report.records.push(eval_record(&cloud, data, cfg, step, wall)?);
        }
    }
    Ok((cloud, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian_model::logit;

    fn toy() -> (GaussianCloud<f32>, TrainingData) {
        let cams: Vec<Camera> = (0..3)
            .map(|i| {
                let a = i as f64 * 0.4;
                Camera::look_at(
                    [4.0 * a.sin(), 0.3, -4.0 * a.cos()],
                    [0.0; 3],
                    [0.0, 1.0, 0.0],
                    0.9,
                    24,
                    24,
                )
            })
            .collect();
        let targets = cams
            .iter()
            .map(|c| {
                let mut img = Image::filled(24, 24, [1.0f32; 3]);
                let (u, v, _) = c.world_to_pixel([0.0; 3]);
                for y in 0..24 {
                    for x in 0..24 {
                        let d = ((x as f64 + 0.5 - u).powi(2) + (y as f64 + 0.5 - v).powi(2)).sqrt();
                        if d < 6.0 {
                            img.set_pixel(x, y, [0.8, 0.3, 0.2]);
                        }
                    }
                }
                img.quantized()
            })
            .collect();
        let cloud = GaussianCloud::from_parts(
            vec![0.1, 0.0, 0.0, -0.2, 0.1, 0.1, 0.0, -0.1, 0.2],
            vec![-1.5f32; 9],
            [1.0f32, 0.0, 0.0, 0.0].repeat(3),
            vec![logit(0.3) as f32; 3],
            vec![0.0; 36],
            1,
        )
        .unwrap();
        (cloud, TrainingData::new(cams, targets).unwrap())
    }

    fn cfg(iterations: u32) -> TrainConfig {
        TrainConfig {
            iterations,
            eval_interval: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let (cloud, data) = toy();
        let (out, report) = train_single(&cloud, &data, &cfg(0)).unwrap();
        assert_eq!(out, cloud);
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.records[0].iteration, 0);
        assert!(report.losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let (cloud, data) = toy();
        let (a, ra) = train_single(&cloud, &data, &cfg(60)).unwrap();
        let (b, rb) = train_single(&cloud, &data, &cfg(60)).unwrap();
        assert_eq!(a, b);
        assert!(ra.same_trajectory(&rb));
        assert_eq!(ra.losses.len(), 60);
        assert_eq!(
            ra.records.iter().map(|r| r.iteration).collect::<Vec<_>>(),
            vec![0, 10, 20, 30, 40, 50, 60]
        );
        assert!(ra.records.windows(2).all(|w| w[0].wall_s <= w[1].wall_s));
        assert!(ra.last().unwrap().loss < ra.initial().unwrap().loss);
    }

    #[test]
    fn schedule_covers_every_view_per_epoch() {
        let mut s = ViewSchedule::new(7, 5);
        for epoch in 0..3 {
            let mut seen: Vec<usize> = (0..5).map(|i| s.view(epoch * 5 + i)).collect();
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        }
        let a: Vec<usize> = (0..10).map(|i| ViewSchedule::new(1, 5).view(i)).collect();
        let b: Vec<usize> = (0..10).map(|i| ViewSchedule::new(1, 5).view(i)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = TrainConfig {
            iterations: 17,
            ..TrainConfig::default()
        };
        c.densify.enabled = false;
        c.lr.sh = 0.5;
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = TrainConfig::from_toml("iterations = 5\n[densify]\nstart = 3\n").unwrap();
        assert_eq!(partial.iterations, 5);
        assert_eq!(partial.densify.start, 3);
        assert_eq!(partial.lr, LearningRates::default());
        assert!(TrainConfig::from_toml("lambda_dssim = 2.0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }
}
