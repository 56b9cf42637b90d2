use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

pub const REPORT_HEADER: &str = "iteration,loss,psnr,ssim,wall_s,gaussians,workers,resolution";
pub const LOSSES_HEADER: &str = "iteration,loss";

/// Metrics at one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub iteration: u32,
    /// Mean training loss over all views.
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Training time so far, evaluation excluded.
    pub wall_s: f64,
    pub gaussians: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub workers: usize,
    pub resolution: u32,
    pub records: Vec<EvalRecord>,
    /// Loss of every iteration, in order.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn new(workers: usize, resolution: u32) -> Self {
        Self {
            workers,
            resolution,
            records: Vec::new(),
            losses: Vec::new(),
        }
    }

    pub fn initial(&self) -> Option<&EvalRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }

    pub fn wall_s(&self) -> f64 {
        self.last().map_or(0.0, |r| r.wall_s)
    }

    /// Equal in everything but timing.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        let strip = |r: &EvalRecord| EvalRecord { wall_s: 0.0, ..*r };
        self.resolution == other.resolution
            && self.losses.len() == other.losses.len()
            && self
                .losses
                .iter()
                .zip(&other.losses)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| strip(a) == strip(b))
    }

    fn row(&self, label: &str, r: &EvalRecord) -> String {
        format!(
            "{label},{},{},{},{},{},{},{}",
            r.loss, r.psnr, r.ssim, r.wall_s, r.gaussians, self.workers, self.resolution
        )
    }

    /// Evaluation rows followed by a `summary` row repeating the last one.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{}", self.row(&r.iteration.to_string(), r));
        }
        if let Some(r) = self.last() {
            let _ = writeln!(s, "{}", self.row("summary", r));
        }
        s
    }

    pub fn losses_csv(&self) -> String {
        let mut s = String::from(LOSSES_HEADER);
        s.push('\n');
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{},{l}", i + 1);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("train report: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == REPORT_HEADER => {}
            other => return Err(bad(format!("unexpected header {other:?}"))),
        }
        let mut report = Self::new(0, 0);
        let mut summary = None;
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 8 {
                return Err(bad(format!("row {} has {} fields", n + 1, f.len())));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|e| bad(format!("row {}: {e}", n + 1)));
            let int = |i: usize| f[i].parse::<u64>().map_err(|e| bad(format!("row {}: {e}", n + 1)));
            let rec = EvalRecord {
                iteration: 0,
                loss: num(1)?,
                psnr: num(2)?,
                ssim: num(3)?,
                wall_s: num(4)?,
                gaussians: int(5)? as usize,
            };
            report.workers = int(6)? as usize;
            report.resolution = int(7)? as u32;
            if f[0] == "summary" {
                summary = Some(rec);
            } else {
                let iteration = int(0)? as u32;
                report.records.push(EvalRecord { iteration, ..rec });
            }
        }
        match (summary, report.last()) {
            (Some(s), Some(l)) if s == EvalRecord { iteration: 0, ..*l } => Ok(report),
            (None, None) => Ok(report),
            _ => Err(bad("summary row does not match the last record".into())),
        }
    }

    pub fn parse_losses(text: &str) -> Result<Vec<f64>> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(LOSSES_HEADER) {
            return Err(Error::Format("loss trace: unexpected header".into()));
        }
        lines
            .map(|l| {
                let v = l
                    .split(',')
                    .nth(1)
                    .ok_or_else(|| Error::Format(format!("loss trace: bad row {l:?}")))?;
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("loss trace: {e}")))
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrainReport {
        let mut r = TrainReport::new(2, 128);
        r.records.push(EvalRecord {
            iteration: 0,
            loss: 0.3,
            psnr: 12.25,
            ssim: 0.5,
            wall_s: 0.0,
            gaussians: 100,
        });
        r.records.push(EvalRecord {
            iteration: 10,
            loss: 0.1 + 0.2,
            psnr: 20.0 / 3.0,
            ssim: 0.95,
            wall_s: 1.5,
            gaussians: 120,
        });
        r.losses = vec![0.1, 1.0 / 3.0, 2.0f64.sqrt()];
        r
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let r = sample();
        let mut back = TrainReport::from_csv(&r.to_csv()).unwrap();
        back.losses = TrainReport::parse_losses(&r.losses_csv()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.to_csv().lines().last().unwrap().split(',').next(), Some("summary"));
    }

    #[test]
    fn trajectory_comparison_ignores_time() {
        let a = sample();
        let mut b = sample();
        b.records[1].wall_s = 9.0;
        assert!(a.same_trajectory(&b));
        b.losses[1] = 0.3333;
        assert!(!a.same_trajectory(&b));
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(TrainReport::from_csv("nope\n").is_err());
        let mut text = sample().to_csv();
        text = text.replace("summary,0.30000000000000004", "summary,0.4");
        assert!(TrainReport::from_csv(&text).is_err());
    }
}
