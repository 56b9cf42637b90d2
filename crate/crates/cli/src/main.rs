//! `isosplat` command-line driver.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 when a command fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use isosplat::bench::{emit_tables, quality_csv, run_bench, timing_csv, BenchGrid, TimeUnit};
use isosplat::camera::{load_cameras, make_orbit, save_cameras};
use isosplat::dataset::{synthesize_sphere, DatasetDescriptor, SPHERE_VIEWS};
use isosplat::distributed::{train_distributed, DistributedOptions};
use isosplat::gaussian_model::{init_from_points, GaussianCloud};
use isosplat::image::Image;
use isosplat::rasterizer::{project, render_forward, RenderOptions, TileGrid};
use isosplat::reference_renderer::{generate_ground_truth, view_file_name, RaycastOptions, MANIFEST_FILE};
use isosplat::training::{psnr, ssim, train_single, TrainConfig, TrainingData};
use isosplat::volume::{extract_isosurface_points, PointCloud};

/// Overrides the output directory of dataset descriptors.
const OUT_ENV: &str = "ISOSPLAT_OUT";

#[derive(Parser)]
#[command(
    name = "isosplat",
    version,
    about = "Isosurface reconstruction with distributed Gaussian splatting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic sphere volume and its dataset descriptor.
    SynthSphere { dir: PathBuf },
    /// Extract isosurface points from the descriptor's volume.
    Extract {
        #[command(flatten)]
        ds: DatasetArgs,
        /// Subsampling seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the camera orbit for each resolution.
    Cameras {
        #[command(flatten)]
        ds: DatasetArgs,
        #[arg(long)]
        resolution: Option<u32>,
        /// Rotates the orbit pattern.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Raycast ground-truth views for each resolution.
    Groundtruth {
        #[command(flatten)]
        ds: DatasetArgs,
        #[arg(long)]
        resolution: Option<u32>,
    },
    /// Optimize Gaussians against the ground-truth views.
    Train(TrainArgs),
    /// Render a checkpoint from a camera file into PNGs.
    Render {
        checkpoint: PathBuf,
        cameras: PathBuf,
        out_dir: PathBuf,
    },
    /// PSNR and SSIM between same-named PNGs of two directories.
    Metrics {
        dir_a: PathBuf,
        dir_b: PathBuf,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time training over a grid of resolutions and worker counts.
    Bench(BenchArgs),
}

#[derive(Args)]
struct DatasetArgs {
    /// Dataset descriptor (TOML).
    descriptor: PathBuf,
    /// Output directory, overriding the descriptor and $ISOSPLAT_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl DatasetArgs {
    fn load(&self) -> Result<DatasetDescriptor> {
        let mut d = DatasetDescriptor::load(&self.descriptor)?;
        if let Some(o) = self
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        {
            d.output_dir = o;
        }
        Ok(d)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    ds: DatasetArgs,
    /// Training config (TOML); flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<u32>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    iterations: Option<u32>,
    #[arg(long)]
    eval_interval: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_densify: bool,
    /// Use the threaded runtime even with one worker.
    #[arg(long)]
    distributed: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Dataset descriptor; the built-in sphere scene when omitted.
    descriptor: Option<PathBuf>,
    /// Cells as RESxW, comma separated.
    #[arg(long, default_value = "128x1,128x2,128x4")]
    grid: String,
    #[arg(long, default_value_t = 200)]
    iterations: u32,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Gaussians one worker can hold.
    #[arg(long)]
    capacity: Option<i64>,
    #[arg(long, value_parser = parse_unit, default_value = "seconds")]
    units: TimeUnit,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_unit(s: &str) -> Result<TimeUnit, String> {
    match s {
        "seconds" | "s" => Ok(TimeUnit::Seconds),
        "minutes" | "min" => Ok(TimeUnit::Minutes),
        _ => Err(format!("unknown unit {s:?}, expected seconds or minutes")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn resolutions(d: &DatasetDescriptor, only: Option<u32>) -> Result<Vec<u32>> {
    match only {
        Some(0) => bail!("resolution must be positive"),
        Some(r) => Ok(vec![r]),
        None => Ok(d.resolutions.clone()),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthSphere { dir } => {
            let d = synthesize_sphere(&dir)?;
            println!("wrote {}", d.volume.path.display());
        }
        Command::Extract { ds, seed } => {
            let d = ds.load()?;
            let mut opts = d.extract_options();
            if let Some(s) = seed {
                opts.seed = s;
            }
            let points = extract_isosurface_points(&d.load_volume()?, &opts)?;
            create_dir(&d.output_dir)?;
            points.save(d.points_path())?;
            println!("{} points -> {}", points.len(), d.points_path().display());
        }
        Command::Cameras { ds, resolution, seed } => {
            let mut d = ds.load()?;
            if let Some(s) = seed {
                d.orbit.seed = s;
            }
            let grid = d.load_volume()?;
            create_dir(&d.output_dir)?;
            for res in resolutions(&d, resolution)? {
                let cams = make_orbit(&d.orbit_spec(&grid, res))?;
                save_cameras(d.cameras_path(res), &cams)?;
                println!("{} cameras -> {}", cams.len(), d.cameras_path(res).display());
            }
        }
        Command::Groundtruth { ds, resolution } => {
            let d = ds.load()?;
            let grid = d.load_volume()?;
            for res in resolutions(&d, resolution)? {
                let path = d.cameras_path(res);
                let cams = load_cameras(&path).with_context(|| format!("run `cameras` first ({})", path.display()))?;
                let dir = d.ground_truth_dir(res);
                generate_ground_truth(&grid, d.isovalue, &cams, &dir, &RaycastOptions::default())?;
                println!("{} views -> {}", cams.len(), dir.display());
            }
        }
        Command::Train(args) => train(args)?,
        Command::Render {
            checkpoint,
            cameras,
            out_dir,
        } => {
            let cloud = GaussianCloud::load(&checkpoint)?;
            let cams = load_cameras(&cameras)?;
            create_dir(&out_dir)?;
            let opts = RenderOptions::default();
            for (i, cam) in cams.iter().enumerate() {
                let (w, h) = (cam.width as usize, cam.height as usize);
                let splats = project(&cloud, cam, &TileGrid::new(w, h, opts.tile_size));
                render_forward(&splats, w, h, &opts)
                    .image
                    .save_png(out_dir.join(view_file_name(i)))?;
            }
            println!("{} views -> {}", cams.len(), out_dir.display());
        }
        Command::Metrics { dir_a, dir_b, out } => {
            let csv = metrics(&dir_a, &dir_b)?;
            match out {
                Some(p) => fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::Bench(args) => bench(args)?,
    }
    Ok(())
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

fn train(args: TrainArgs) -> Result<()> {
    let d = args.ds.load()?;
    let mut cfg = train_config(args.config.as_deref())?;
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.eval_interval {
        cfg.eval_interval = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if args.no_densify {
        cfg.densify.enabled = false;
    }
    let res = match (args.resolution, cfg.resolution) {
        (Some(r), _) | (None, Some(r)) => r,
        (None, None) => d.resolutions[0],
    };
    cfg.resolution = Some(res);
    cfg.validate()?;
    if args.workers == 0 {
        bail!("--workers must be at least 1");
    }

    let points = PointCloud::load(d.points_path()).context("run `extract` first")?;
    let init = init_from_points::<f32>(&points, cfg.sh_degree)?;
    let manifest = d.ground_truth_dir(res).join(MANIFEST_FILE);
    let data =
        TrainingData::load(&manifest).with_context(|| format!("run `groundtruth` first ({})", manifest.display()))?;
    let out = d.train_dir(res, args.workers);
    create_dir(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;

    let (cloud, report) = if args.workers > 1 || args.distributed {
        let run = train_distributed(&init, &data, &cfg, &DistributedOptions::new(args.workers))?;
        run.trace.save(out.join("trace.csv"))?;
        (run.cloud, run.report)
    } else {
        train_single(&init, &data, &cfg)?
    };
    cloud.save(out.join("checkpoint.ssgc"))?;
    report.save(out.join("report.csv"))?;
    fs::write(out.join("losses.csv"), report.losses_csv())?;
    if let (Some(a), Some(b)) = (report.initial(), report.last()) {
        println!(
            "{} iterations on {} worker(s): PSNR {:.2} -> {:.2} dB, SSIM {:.4} -> {:.4}, {} Gaussians, {:.1} s",
            cfg.iterations, args.workers, a.psnr, b.psnr, a.ssim, b.ssim, b.gaussians, b.wall_s
        );
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn metrics(a: &Path, b: &Path) -> Result<String> {
    let names = png_names(a)?;
    if names.is_empty() {
        bail!("no PNG images in {}", a.display());
    }
    if names != png_names(b)? {
        bail!("{} and {} hold different image sets", a.display(), b.display());
    }
    let mut csv = String::from("image,psnr,ssim\n");
    let (mut sp, mut ss) = (0.0, 0.0);
    for n in &names {
        let x = Image::<f32>::load_png(a.join(n))?;
        let y = Image::<f32>::load_png(b.join(n))?;
        let (p, s) = (psnr(&x, &y)?, ssim(&x, &y)?);
        sp += p;
        ss += s;
        csv.push_str(&format!("{n},{p},{s}\n"));
    }
    let k = names.len() as f64;
    csv.push_str(&format!("mean,{},{}\n", sp / k, ss / k));
    Ok(csv)
}

fn bench(args: BenchArgs) -> Result<()> {
    let cfg = train_config(args.config.as_deref())?;
    let grid = BenchGrid {
        cells: BenchGrid::parse_cells(&args.grid)?,
        iterations: args.iterations,
        repetitions: args.reps,
        capacity: args.capacity,
    };
    let descriptor = args.descriptor.as_deref().map(DatasetDescriptor::load).transpose()?;
    let out = args
        .out
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("bench_out"));
    create_dir(&out)?;
    let sh = cfg.sh_degree;
    let result = run_bench(
        &grid,
        &cfg,
        |res| match &descriptor {
            Some(d) => d.training_set(res, sh),
            None => isosplat::dataset::sphere_training_set(res, SPHERE_VIEWS, sh),
        },
        |row| {
            eprintln!(
                "{}x{} rep {}: {:.3} s",
                row.resolution,
                row.workers,
                row.rep.unwrap_or(0),
                row.wall_s
            )
        },
    )?;
    let tables = emit_tables(&result.reports, &result.infeasible, args.units)?;
    fs::write(out.join("timing.csv"), timing_csv(&result.timings))?;
    fs::write(out.join("quality.csv"), quality_csv(&result.reports))?;
    fs::write(out.join("table_time.csv"), &tables.time)?;
    fs::write(out.join("table_speedup.csv"), &tables.speedup)?;
    fs::write(out.join("table_quality.csv"), &tables.quality)?;
    print!("{}", tables.time);
    println!("speedup");
    print!("{}", tables.speedup);
    println!("tables in {}", out.display());
    Ok(())
}
