//! Scaling benchmark: timing and quality tables laid out with worker counts
//! as rows and resolutions as columns.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::distributed::{estimate_min_workers, train_distributed, DistributedOptions};
use crate::gaussian_model::GaussianCloud;
use crate::training::{TrainConfig, TrainReport, TrainingData};
use crate::{Error, Result};

pub const TIMING_HEADER: &str = "workers,resolution,rep,wall_s";
pub const QUALITY_HEADER: &str = "workers,resolution,psnr,ssim";
/// Marks a cell that cannot run within the capacity limit.
pub const INFEASIBLE: &str = "X";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    #[default]
    Seconds,
    Minutes,
}

impl TimeUnit {
    pub fn from_seconds(self, s: f64) -> f64 {
        match self {
            TimeUnit::Seconds => s,
            TimeUnit::Minutes => s / 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchGrid {
    /// `(resolution, workers)` cells.
    pub cells: Vec<(u32, usize)>,
    pub iterations: u32,
    pub repetitions: usize,
    /// Gaussians one worker can hold; `None` is unlimited.
    #[serde(default)]
    pub capacity: Option<i64>,
}

impl BenchGrid {
    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::InvalidArgument("bench grid has no cells".into()));
        }
        if let Some(c) = self.cells.iter().find(|c| c.0 == 0 || c.1 == 0) {
            return Err(Error::InvalidArgument(format!(
                "bench cell {c:?}: resolution and workers must be positive"
            )));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidArgument("repetitions must be at least 1".into()));
        }
        if self.capacity.is_some_and(|c| c <= 0) {
            return Err(Error::InvalidArgument("capacity must be positive".into()));
        }
        Ok(())
    }

    /// Parses `RESxW` items such as `128x1,128x4`.
    pub fn parse_cells(text: &str) -> Result<Vec<(u32, usize)>> {
        text.split(',')
            .map(|item| {
                let bad = || Error::InvalidArgument(format!("bad bench cell {item:?}, expected RESxW"));
                let (r, w) = item.trim().split_once('x').ok_or_else(bad)?;
                Ok((r.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
            })
            .collect()
    }
}

/// Ratio of baseline to parallel time.
pub fn compute_speedup(t_baseline: f64, t_parallel: f64) -> Result<f64> {
    if !(t_baseline > 0.0) || !(t_parallel > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "times must be positive, got {t_baseline} and {t_parallel}"
        )));
    }
    Ok(t_baseline / t_parallel)
}

/// One decimal and a multiplication sign, e.g. `5.6×`.
pub fn format_speedup(ratio: f64) -> String {
    format!("{ratio:.1}×")
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingRow {
    pub workers: usize,
    pub resolution: u32,
    /// Repetition number; `None` for the per-cell median row.
    pub rep: Option<usize>,
    pub wall_s: f64,
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut s = String::from(TIMING_HEADER);
    s.push('\n');
    for r in rows {
        let rep = r.rep.map_or("median".to_string(), |k| k.to_string());
        let _ = writeln!(s, "{},{},{rep},{}", r.workers, r.resolution, r.wall_s);
    }
    s
}

pub fn parse_timing_csv(text: &str) -> Result<Vec<TimingRow>> {
    let bad = |m: String| Error::Format(format!("timing csv: {m}"));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(TIMING_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(bad(format!("row {l:?}")));
            }
            Ok(TimingRow {
                workers: f[0].parse().map_err(|e| bad(format!("{e}")))?,
                resolution: f[1].parse().map_err(|e| bad(format!("{e}")))?,
                rep: match f[2] {
                    "median" => None,
                    k => Some(k.parse().map_err(|e| bad(format!("{e}")))?),
                },
                wall_s: f[3].parse().map_err(|e| bad(format!("{e}")))?,
            })
        })
        .collect()
}

/// One row per report: `workers,resolution,psnr,ssim` of its last record.
pub fn quality_csv(reports: &[TrainReport]) -> String {
    let mut s = String::from(QUALITY_HEADER);
    s.push('\n');
    for r in reports {
        if let Some(l) = r.last() {
            let _ = writeln!(s, "{},{},{},{}", r.workers, r.resolution, l.psnr, l.ssim);
        }
    }
    s
}

/// Worker-by-resolution tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Tables {
    /// Training time per cell.
    pub time: String,
    /// Time of the one-worker cell over each cell's time.
    pub speedup: String,
    /// `psnr/ssim` per cell.
    pub quality: String,
}

/// Lays reports out as tables. Cells listed in `infeasible` print
/// [`INFEASIBLE`]; every other cell of the grid spanned by all worker counts
/// and resolutions needs exactly one report.
pub fn emit_tables(reports: &[TrainReport], infeasible: &[(u32, usize)], unit: TimeUnit) -> Result<Tables> {
    let mut cells: BTreeMap<(usize, u32), &TrainReport> = BTreeMap::new();
    for r in reports {
        if cells.insert((r.workers, r.resolution), r).is_some() {
            return Err(Error::InvalidArgument(format!(
                "two reports for workers {} at {}",
                r.workers, r.resolution
            )));
        }
    }
    let x: BTreeSet<(usize, u32)> = infeasible.iter().map(|&(res, w)| (w, res)).collect();
    let workers: BTreeSet<usize> = cells.keys().chain(&x).map(|k| k.0).collect();
    let resolutions: BTreeSet<u32> = cells.keys().chain(&x).map(|k| k.1).collect();
    if workers.is_empty() {
        return Err(Error::InvalidArgument("no reports to tabulate".into()));
    }
    let missing: Vec<String> = workers
        .iter()
        .flat_map(|&w| resolutions.iter().map(move |&r| (w, r)))
        .filter(|k| !cells.contains_key(k) && !x.contains(k))
        .map(|(w, r)| format!("(workers {w}, resolution {r})"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "ragged grid, missing {}",
            missing.join(", ")
        )));
    }

    let header = {
        let mut h = String::from("workers");
        for r in &resolutions {
            let _ = write!(h, ",{r}");
        }
        h
    };
    let table = |cell: &dyn Fn(usize, u32) -> String| {
        let mut s = header.clone();
        s.push('\n');
        for &w in &workers {
            s.push_str(&w.to_string());
            for &r in &resolutions {
                s.push(',');
                s.push_str(&cell(w, r));
            }
            s.push('\n');
        }
        s
    };
    let time = table(&|w, r| {
        cells.get(&(w, r)).map_or(INFEASIBLE.into(), |rep| {
            format!("{:.2}", unit.from_seconds(rep.wall_s()))
        })
    });
    let speedup = table(&|w, r| match (cells.get(&(1, r)), cells.get(&(w, r))) {
        (Some(base), Some(rep)) => compute_speedup(base.wall_s(), rep.wall_s())
            .map(|v| format!("{v:.2}"))
            .unwrap_or_else(|_| "-".into()),
        _ => INFEASIBLE.into(),
    });
    let quality = table(&|w, r| {
        cells
            .get(&(w, r))
            .and_then(|rep| rep.last())
            .map_or(INFEASIBLE.into(), |l| format!("{:.2}/{:.4}", l.psnr, l.ssim))
    });
    Ok(Tables { time, speedup, quality })
}

/// A table as `(resolutions, rows of (workers, cells))`.
pub type ParsedTable = (Vec<u32>, Vec<(usize, Vec<String>)>);

pub fn parse_table(text: &str) -> Result<ParsedTable> {
    let bad = |m: String| Error::Format(format!("table: {m}"));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("empty".into()))?;
    let mut cols = header.split(',');
    if cols.next() != Some("workers") {
        return Err(bad("first column must be workers".into()));
    }
    let res: Vec<u32> = cols
        .map(|c| c.parse().map_err(|_| bad(format!("bad resolution {c:?}"))))
        .collect::<Result<_>>()?;
    let rows = lines
        .map(|l| {
            let mut f = l.split(',');
            let w = f
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("bad row {l:?}")))?;
            let cells: Vec<String> = f.map(str::to_string).collect();
            if cells.len() != res.len() {
                return Err(bad(format!("row {l:?} has {} cells", cells.len())));
            }
            Ok((w, cells))
        })
        .collect::<Result<_>>()?;
    Ok((res, rows))
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub timings: Vec<TimingRow>,
    /// Median-time report of every feasible cell.
    pub reports: Vec<TrainReport>,
    /// `(resolution, workers)` cells skipped for capacity.
    pub infeasible: Vec<(u32, usize)>,
}

impl BenchResult {
    pub fn median_wall(&self, resolution: u32, workers: usize) -> Option<f64> {
        self.timings
            .iter()
            .find(|t| t.rep.is_none() && t.resolution == resolution && t.workers == workers)
            .map(|t| t.wall_s)
    }
}

/// Runs every cell `repetitions` times. `dataset` builds the initial
/// Gaussians and views for a resolution; it is called once per resolution
/// and its time is not counted. Evaluation time is excluded as in training.
pub fn run_bench(
    grid: &BenchGrid,
    cfg: &TrainConfig,
    mut dataset: impl FnMut(u32) -> Result<(GaussianCloud<f32>, TrainingData)>,
    mut progress: impl FnMut(&TimingRow),
) -> Result<BenchResult> {
    grid.validate()?;
    let cfg = TrainConfig {
        iterations: grid.iterations,
        eval_interval: 0,
        ..cfg.clone()
    };
    let mut out = BenchResult {
        timings: Vec::new(),
        reports: Vec::new(),
        infeasible: Vec::new(),
    };
    let mut cache: BTreeMap<u32, (GaussianCloud<f32>, TrainingData)> = BTreeMap::new();
    for &(res, w) in &grid.cells {
        if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(res) {
            e.insert(dataset(res)?);
        }
        let (init, data) = &cache[&res];
        if let Some(cap) = grid.capacity {
            if estimate_min_workers(init.len() as u64, cap)? > w as u64 {
                out.infeasible.push((res, w));
                continue;
            }
        }
        let mut runs = Vec::with_capacity(grid.repetitions);
        for rep in 0..grid.repetitions {
            let run = train_distributed(init, data, &cfg, &DistributedOptions::new(w))?;
            let row = TimingRow {
                workers: w,
                resolution: res,
                rep: Some(rep),
                wall_s: run.report.wall_s(),
            };
            progress(&row);
            out.timings.push(row);
            runs.push(run.report);
        }
        let walls: Vec<f64> = runs.iter().map(TrainReport::wall_s).collect();
        let med = median(&walls);
        out.timings.push(TimingRow {
            workers: w,
            resolution: res,
            rep: None,
            wall_s: med,
        });
        let pick = walls
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - med).abs().total_cmp(&(b.1 - med).abs()))
            .map_or(0, |p| p.0);
        out.reports.push(runs.swap_remove(pick));
    }
    Ok(out)
}
