use isosplat::dataset::sphere_training_set;
use isosplat::distributed::{
    partition_gaussians, partition_pixels, sharded_backward, train_distributed, DistributedOptions, PartitionStrategy,
};
use isosplat::gaussian_model::GaussianCloud;
use isosplat::rasterizer::{project, render_backward, render_forward, RenderOptions, TileGrid};
use isosplat::training::{loss_l1_dssim, train_single, TrainConfig, TrainingData};
use isosplat::Error;

fn scene() -> (GaussianCloud<f32>, TrainingData) {
    sphere_training_set(48, 6, 1).unwrap()
}

fn config(iterations: u32, densify: bool) -> TrainConfig {
    let mut cfg = TrainConfig {
        iterations,
        eval_interval: 10,
        ..TrainConfig::default()
    };
    cfg.densify.enabled = densify;
    cfg.densify.start = 8;
    cfg.densify.interval = 8;
    cfg.densify.stop_fraction = 1.0;
    cfg
}

#[test]
fn sharded_gradients_match_single_pass() {
    let (cloud, data) = scene();
    let cam = &data.cameras[2];
    let (w, h) = (cam.width as usize, cam.height as usize);
    let opts = RenderOptions::default();
    let grid = TileGrid::new(w, h, opts.tile_size);
    let splats = project(&cloud, cam, &grid);
    let mut fwd = render_forward(&splats, w, h, &opts);
    let (_, dl) = loss_l1_dssim(&fwd.image, &data.targets[2], 0.2).unwrap();
    let single = render_backward(&cloud, cam, &splats, &mut fwd, &dl, &opts).unwrap();
    for workers in [1, 2, 3, 5] {
        let map = partition_gaussians(cloud.len(), workers, PartitionStrategy::ContiguousBalanced).unwrap();
        let part = partition_pixels(w, h, opts.tile_size, workers).unwrap();
        let out = sharded_backward(&cloud, cam, &dl, &map, &part, &opts).unwrap();
        assert_eq!(out.image, fwd.image, "W={workers}");
        assert_eq!(out.concatenated(&map), single, "W={workers}");
        assert_eq!(out.messages.len(), workers * workers);
    }
}

#[test]
fn distributed_training_matches_single_worker() {
    let (init, data) = scene();
    for densify in [false, true] {
        let cfg = config(30, densify);
        let (cloud, report) = train_single(&init, &data, &cfg).unwrap();
        if densify {
            assert_ne!(cloud.len(), init.len(), "densification should change the cloud");
        }
        for workers in [1, 2, 3] {
            let run = train_distributed(&init, &data, &cfg, &DistributedOptions::new(workers)).unwrap();
            assert!(run.report.same_trajectory(&report), "W={workers} densify={densify}");
            assert_eq!(run.cloud, cloud, "W={workers} densify={densify}");
            assert_eq!(run.report.workers, workers);
            assert!(run.grad_messages.iter().all(|&m| m == workers * workers));
            let bound = cloud.len().max(init.len()).div_ceil(workers) + 1;
            assert!(
                run.max_resident_rows.iter().all(|&r| r <= bound),
                "{:?}",
                run.max_resident_rows
            );
            assert_eq!(run.trace.rows.len(), 30);
        }
    }
}

#[test]
fn worker_failure_aborts_the_run() {
    let (init, data) = scene();
    let opts = DistributedOptions {
        workers: 3,
        fail_at: Some((1, 4)),
    };
    match train_distributed(&init, &data, &config(10, false), &opts) {
        Err(Error::WorkerFailed { worker, reason }) => {
            assert_eq!(worker, 1);
            assert!(reason.contains("injected"), "{reason}");
        }
        other => panic!("expected a worker failure, got {other:?}"),
    }
    assert!(train_distributed(&init, &data, &config(1, false), &DistributedOptions::new(0)).is_err());
}
