//! Interval IoU, "R@n, IoU=m" recall, rare/common breakdowns and the 2-D
//! projection of memory slots.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::PredictionSet;
use crate::numcore::Mat;

/// Closed interval in frame units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        let i = Self { start, end };
        i.check()?;
        Ok(i)
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    fn check(&self) -> Result<()> {
        if !(self.start.is_finite() && self.end.is_finite()) || self.start > self.end {
            return Err(Error::Input(format!("inverted or non-finite interval [{}, {}]", self.start, self.end)));
        }
        Ok(())
    }
}

/// `|a ∩ b| / |a ∪ b|` with lengths `end − start`. Two identical point
/// intervals have IoU 1.
pub fn interval_iou(a: Interval, b: Interval) -> Result<f64> {
    a.check()?;
    b.check()?;
    if a == b {
        return Ok(1.0);
    }
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.end.max(b.end) - a.start.min(b.start);
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Best IoU over the first `n` predictions; `None` for an empty set.
pub fn best_iou(preds: &PredictionSet, gt: Interval, n: usize) -> Result<Option<f64>> {
    let mut best: Option<f64> = None;
    for p in preds.iter().take(n) {
        let iou = interval_iou(p.interval, gt)?;
        best = Some(best.map_or(iou, |b| b.max(iou)));
    }
    Ok(best)
}

/// Percentage of samples where some top-`n` prediction has IoU strictly
/// greater than `m`. Empty prediction sets count as misses.
pub fn recall_at(preds: &[PredictionSet], gts: &[Interval], n: usize, m: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Input(format!("{} prediction sets for {} ground truths", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(Error::Input("recall over zero samples".into()));
    }
    let mut hits = 0usize;
    for (i, (p, &gt)) in preds.iter().zip(gts).enumerate() {
        match best_iou(p, gt, n)? {
            Some(iou) if iou > m => hits += 1,
            Some(_) => {}
            None => warn!("sample {i} has no predictions; counted as a miss"),
        }
    }
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub n: usize,
    pub m: f64,
    pub overall: f64,
    pub rare: Option<f64>,
    pub common: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleCounts {
    pub total: usize,
    pub rare: usize,
    pub common: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub counts: SampleCounts,
    pub recalls: Vec<RecallEntry>,
    /// Per-epoch training loss, when the report comes out of training.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_curve: Vec<f64>,
}

/// Grid mirroring the usual benchmark columns.
pub const DEFAULT_GRID: [(usize, f64); 4] = [(1, 0.5), (1, 0.7), (5, 0.5), (5, 0.7)];

fn subset<T: Clone>(xs: &[T], flags: &[bool], want: bool) -> Vec<T> {
    xs.iter().zip(flags).filter(|(_, &f)| f == want).map(|(x, _)| x.clone()).collect()
}

pub fn breakdown(
    split: &str,
    preds: &[PredictionSet],
    gts: &[Interval],
    rare: &[bool],
    grid: &[(usize, f64)],
) -> Result<MetricsReport> {
    if rare.len() != preds.len() {
        return Err(Error::Input(format!("{} rarity flags for {} samples", rare.len(), preds.len())));
    }
    let (rp, rg) = (subset(preds, rare, true), subset(gts, rare, true));
    let (cp, cg) = (subset(preds, rare, false), subset(gts, rare, false));
    let mut recalls = Vec::with_capacity(grid.len());
    for &(n, m) in grid {
        let part = |p: &[PredictionSet], g: &[Interval]| -> Result<Option<f64>> {
            if p.is_empty() {
                Ok(None)
            } else {
                recall_at(p, g, n, m).map(Some)
            }
        };
        recalls.push(RecallEntry {
            n,
            m,
            overall: recall_at(preds, gts, n, m)?,
            rare: part(&rp, &rg)?,
            common: part(&cp, &cg)?,
        });
    }
    Ok(MetricsReport {
        split: split.to_string(),
        counts: SampleCounts { total: preds.len(), rare: rp.len(), common: cp.len() },
        recalls,
        loss_curve: Vec::new(),
    })
}

impl MetricsReport {
    pub fn get(&self, n: usize, m: f64) -> Option<&RecallEntry> {
        self.recalls.iter().find(|r| r.n == n && r.m == m)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format { what: "metrics report", msg: e.to_string() })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format { what: "metrics report", msg: e.to_string() })
    }

    /// Flat `(n, m, split, recall)` rows; partitions absent from the data are skipped.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Format { what: "metrics csv", msg: e.to_string() };
        w.write_record(["n", "m", "split", "recall"]).map_err(csv_err)?;
        for r in &self.recalls {
            let parts = [("overall", Some(r.overall)), ("rare", r.rare), ("common", r.common)];
            for (name, v) in parts {
                if let Some(v) = v {
                    let split = if name == "overall" { self.split.clone() } else { format!("{}-{name}", self.split) };
                    w.write_record([r.n.to_string(), r.m.to_string(), split, v.to_string()]).map_err(csv_err)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: usize,
    pub rare: bool,
    pub gt: Interval,
    /// Ranked `(interval, score)` pairs.
    pub predictions: Vec<(Interval, f64)>,
}

impl PredictionRecord {
    pub fn prediction_set(&self) -> PredictionSet {
        PredictionSet(
            self.predictions
                .iter()
                .enumerate()
                .map(|(i, &(interval, score))| crate::grounding::Prediction { interval, score, frame: i })
                .collect(),
        )
    }
}

pub fn write_predictions<W: Write>(records: &[PredictionRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions<R: std::io::BufRead>(input: R) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PredictionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format { what: "prediction dump", msg: format!("line {}: {e}", i + 1) })?;
        out.push(r);
    }
    Ok(out)
}

/// [`breakdown`] over a prediction dump.
pub fn report_from_records(split: &str, records: &[PredictionRecord], grid: &[(usize, f64)]) -> Result<MetricsReport> {
    let preds: Vec<PredictionSet> = records.iter().map(PredictionRecord::prediction_set).collect();
    let gts: Vec<Interval> = records.iter().map(|r| r.gt).collect();
    let rare: Vec<bool> = records.iter().map(|r| r.rare).collect();
    breakdown(split, &preds, &gts, &rare, grid)
}

/// Relative eigenvalue below which a principal direction counts as absent.
const RANK_TOL: f64 = 1e-12;

/// Mean-centred slots projected on their top two principal directions. The
/// first nonzero component of each direction is made positive.
pub fn memory_projection(slots: &Mat) -> Result<Mat> {
    let (l, d) = slots.dim();
    if l < 2 {
        return Err(Error::Input(format!("projection needs at least 2 slots, got {l}")));
    }
    if slots.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("memory_projection"));
    }
    let mean = slots.mean_axis(ndarray::Axis(0)).expect("l ≥ 2");
    let centred = slots - &mean;
    let cov = centred.t().dot(&centred) / (l - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = order.first().map_or(0.0, |&i| eig.eigenvalues[i]);
    let scale = cov.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if top <= RANK_TOL * scale.max(1.0) {
        warn!("memory slots are all identical; projection is zero");
        return Ok(Mat::zeros((l, 2)));
    }
    let mut out = Mat::zeros((l, 2));
    for (k, &idx) in order.iter().take(2).enumerate() {
        if eig.eigenvalues[idx] <= RANK_TOL * top {
            continue;
        }
        let mut dir: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        if let Some(first) = dir.iter().copied().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                dir.iter_mut().for_each(|x| *x = -*x);
            }
        }
        for r in 0..l {
            out[[r, k]] = centred.row(r).iter().zip(&dir).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

pub fn write_projection_csv<W: Write>(proj: &Mat, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let csv_err = |e: csv::Error| Error::Format { what: "projection csv", msg: e.to_string() };
    for row in proj.rows() {
        w.write_record(row.iter().map(|x| x.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
