//! Confusion statistics, precision/recall/F1, FPR/FNR, pooled PR curves
//! and contrast measures of change maps. Changed pixels are the positive
//! class. Rates with a zero denominator are reported as 0.

use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::ChangeMask;
use crate::metric::ChangeMap;
use crate::numerics::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Names of the rates whose denominator is zero.
    pub fn degenerate(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.tp + self.fp == 0 {
            out.push("precision");
        }
        if self.tp + self.fn_ == 0 {
            out.push("recall");
            out.push("fnr");
        }
        if self.fp + self.tn == 0 {
            out.push("fpr");
        }
        out
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_threshold(theta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(invalid!("threshold {theta} outside [0, 1]"));
    }
    Ok(())
}

/// Changed where `value ≥ θ`.
pub fn binarize<T: Scalar>(cm: &ChangeMap<T>, theta: f64) -> Result<ChangeMask> {
    check_threshold(theta)?;
    let (h, w) = cm.resolution();
    let y = cm
        .data()
        .iter()
        .map(|v| u8::from(v.to_f64_lossy() < theta))
        .collect();
    ChangeMask::new(h, w, y)
}

pub fn confusion(pred: &ChangeMask, gt: &ChangeMask) -> Result<ConfusionCounts> {
    if pred.resolution() != gt.resolution() {
        return Err(invalid!(
            "prediction {:?} and ground truth {:?} differ in resolution",
            pred.resolution(),
            gt.resolution()
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        match (p == 0, g == 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `(P, R, F1)`.
pub fn precision_recall_f(c: &ConfusionCounts) -> (f64, f64, f64) {
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    let f = if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    };
    (p, r, f)
}

/// `(FPR, FNR)`.
pub fn fpr_fnr(c: &ConfusionCounts) -> (f64, f64) {
    (ratio(c.fp, c.fp + c.tn), ratio(c.fn_, c.fn_ + c.tp))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub best_threshold: f64,
    pub best_f: f64,
}

/// `i / (n − 1)` for `i = 0..n`.
pub fn thresholds(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Counts pooled over all items at each of `n` evenly spaced thresholds.
/// The best threshold maximizes F1; ties go to the lowest threshold.
pub fn pr_curve<T: Scalar>(
    maps: &[ChangeMap<T>],
    gts: &[ChangeMask],
    n_thresholds: usize,
) -> Result<PrCurve> {
    if n_thresholds < 2 {
        return Err(invalid!(
            "a PR curve needs at least 2 thresholds, got {n_thresholds}"
        ));
    }
    if maps.len() != gts.len() {
        return Err(invalid!(
            "{} maps but {} ground-truth masks",
            maps.len(),
            gts.len()
        ));
    }
    let ths = thresholds(n_thresholds);
    // histogram of changed / unchanged pixels by the number of thresholds each clears
    let mut pos = vec![0u64; n_thresholds + 1];
    let mut neg = vec![0u64; n_thresholds + 1];
    for (m, g) in maps.iter().zip(gts) {
        if m.resolution() != g.resolution() {
            return Err(invalid!(
                "map {:?} and mask {:?} differ in resolution",
                m.resolution(),
                g.resolution()
            ));
        }
        for (i, v) in m.data().iter().enumerate() {
            let v = v.to_f64_lossy();
            let cleared = ths.partition_point(|&t| t <= v);
            if g.is_changed(i) {
                pos[cleared] += 1;
            } else {
                neg[cleared] += 1;
            }
        }
    }
    let total_pos: u64 = pos.iter().sum();
    let total_neg: u64 = neg.iter().sum();
    let mut points = Vec::with_capacity(n_thresholds);
    let (mut best_threshold, mut best_f) = (ths[0], f64::NEG_INFINITY);
    // a pixel is predicted changed at threshold k iff it clears more than k thresholds
    let (mut pos_below, mut neg_below) = (0u64, 0u64);
    for (k, &t) in ths.iter().enumerate() {
        pos_below += pos[k];
        neg_below += neg[k];
        let c = ConfusionCounts {
            tp: total_pos - pos_below,
            fn_: pos_below,
            fp: total_neg - neg_below,
            tn: neg_below,
        };
        let (p, r, f) = precision_recall_f(&c);
        if f > best_f {
            best_f = f;
            best_threshold = t;
        }
        points.push(PrPoint {
            threshold: t,
            precision: p,
            recall: r,
            f_score: f,
        });
    }
    Ok(PrCurve {
        points,
        best_threshold,
        best_f,
    })
}

fn values_f64<T: Scalar>(map: &[T]) -> impl Iterator<Item = f64> + '_ {
    map.iter().map(|v| v.to_f64_lossy())
}

/// `(L_max − L_min) / (L_max + L_min)`; 0 for an all-zero map.
pub fn michelson_contrast<T: Scalar>(map: &[T]) -> Result<f64> {
    if map.is_empty() {
        return Err(invalid!("contrast of an empty map"));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values_f64(map) {
        if !(v >= 0.0) {
            return Err(invalid!(
                "michelson contrast needs a non-negative map, found {v}"
            ));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok(if hi + lo == 0.0 {
        0.0
    } else {
        (hi - lo) / (hi + lo)
    })
}

/// Population standard deviation over the mean; 0 when the mean is 0.
pub fn rms_contrast<T: Scalar>(map: &[T]) -> f64 {
    if map.is_empty() {
        return 0.0;
    }
    let n = map.len() as f64;
    let mean = values_f64(map).sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = values_f64(map)
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    var.sqrt() / mean
}

/// Summary of a prediction set at one operating threshold plus the PR sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub pr_points: Vec<PrPoint>,
    pub best_threshold: f64,
    pub best_f: f64,
    /// Rates reported as 0 because their denominator was 0.
    pub degenerate: Vec<String>,
}

/// Pools counts over all items at `threshold` and sweeps `n_thresholds`.
pub fn evaluate<T: Scalar>(
    maps: &[ChangeMap<T>],
    gts: &[ChangeMask],
    threshold: f64,
    n_thresholds: usize,
) -> Result<EvalReport> {
    check_threshold(threshold)?;
    let curve = pr_curve(maps, gts, n_thresholds)?;
    let mut counts = ConfusionCounts::default();
    for (m, g) in maps.iter().zip(gts) {
        counts += confusion(&binarize(m, threshold)?, g)?;
    }
    let (precision, recall, f_score) = precision_recall_f(&counts);
    let (fpr, fnr) = fpr_fnr(&counts);
    Ok(EvalReport {
        threshold,
        counts,
        precision,
        recall,
        f_score,
        fpr,
        fnr,
        pr_points: curve.points,
        best_threshold: curve.best_threshold,
        best_f: curve.best_f,
        degenerate: counts.degenerate().into_iter().map(str::to_owned).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastKind {
    Michelson,
    Rms,
}

impl ContrastKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ContrastKind::Michelson => "michelson",
            ContrastKind::Rms => "rms",
        }
    }
}

/// One value of a contrast trajectory. `metric` names the distance and the
/// contrast measure, e.g. `l2_rms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub epoch: usize,
    pub layer: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContrastReport {
    pub rows: Vec<ContrastRow>,
}

impl ContrastReport {
    pub fn value(&self, epoch: usize, layer: usize, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.epoch == epoch && r.layer == layer && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv_writer(path)?;
        w.write_record(["epoch", "layer", "metric", "value"])
            .map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                r.layer.to_string(),
                r.metric.clone(),
                r.value.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["epoch", "layer", "metric", "value"] {
            return Err(Error::Format {
                what: "contrast csv",
                message: format!("unexpected header {:?} in {}", headers, path.display()),
            });
        }
        let mut rows = Vec::new();
        for rec in r.deserialize() {
            rows.push(rec.map_err(|e| Error::Format {
                what: "contrast csv",
                message: format!("{}: {e}", path.display()),
            })?);
        }
        Ok(Self { rows })
    }
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, e.into())
}

/// `threshold,precision,recall` rows.
pub fn write_pr_csv(points: &[PrPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["threshold", "precision", "recall"])
        .map_err(|e| csv_error(path, e))?;
    for p in points {
        w.write_record([
            p.threshold.to_string(),
            p.precision.to_string(),
            p.recall.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<S: Serialize>(value: &S, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        what: "json report",
        message: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
