//! Per-epoch training records and the contrast trajectories derived from them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::{csv_error, csv_writer, ContrastReport, ContrastRow};
use crate::metric::DistanceKind;

/// Mean contrast of one level's change maps over an epoch's training pairs.
/// The l2 map is `d/2`, the cosine map `(1 − s)/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerContrast {
    /// 1-based.
    pub layer: usize,
    pub l2_rms: f64,
    pub l2_michelson: f64,
    pub cos_rms: f64,
    pub cos_michelson: f64,
}

/// A change map the epoch's contrast values were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredMap {
    pub item: usize,
    pub layer: usize,
    pub metric: DistanceKind,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean objective per training pair.
    pub loss: f64,
    pub layer_losses: Vec<f64>,
    pub class_loss: Option<f64>,
    pub contrast: Vec<LayerContrast>,
    /// Best fused F1 on the test split.
    pub heldout_f: Option<f64>,
    /// Empty unless maps were kept.
    pub maps: Vec<StoredMap>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
}

const CONTRAST_METRICS: [&str; 4] = ["l2_rms", "l2_michelson", "cos_rms", "cos_michelson"];

impl LayerContrast {
    fn values(&self) -> [f64; 4] {
        [
            self.l2_rms,
            self.l2_michelson,
            self.cos_rms,
            self.cos_michelson,
        ]
    }
}

impl RunHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Long-format rows: `loss`, `class_loss` and `heldout_f` on layer 0,
    /// `layer_loss` and the contrast metrics per layer.
    pub fn rows(&self) -> Vec<ContrastRow> {
        let row = |epoch, layer, metric: &str, value| ContrastRow {
            epoch,
            layer,
            metric: metric.to_owned(),
            value,
        };
        let mut out = Vec::new();
        for r in &self.records {
            out.push(row(r.epoch, 0, "loss", r.loss));
            if let Some(c) = r.class_loss {
                out.push(row(r.epoch, 0, "class_loss", c));
            }
            if let Some(f) = r.heldout_f {
                out.push(row(r.epoch, 0, "heldout_f", f));
            }
            for (l, v) in r.layer_losses.iter().enumerate() {
                out.push(row(r.epoch, l + 1, "layer_loss", *v));
            }
            for c in &r.contrast {
                for (name, v) in CONTRAST_METRICS.iter().zip(c.values()) {
                    out.push(row(r.epoch, c.layer, name, v));
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv_writer(path)?;
        w.write_record(["epoch", "layer", "metric", "value"])
            .map_err(|e| csv_error(path, e))?;
        for r in self.rows() {
            w.write_record([
                r.epoch.to_string(),
                r.layer.to_string(),
                r.metric,
                r.value.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Inverse of [`RunHistory::write_csv`]; stored maps are not part of the file.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let rows = ContrastReport::read_csv(path)?.rows;
        let malformed = |message: String| Error::Format {
            what: "history csv",
            message: format!("{}: {message}", path.display()),
        };
        let mut records: Vec<EpochRecord> = Vec::new();
        for r in rows {
            if records.last().is_none_or(|last| last.epoch != r.epoch) {
                if records.last().is_some_and(|last| last.epoch > r.epoch) {
                    return Err(malformed(format!("epoch {} out of order", r.epoch)));
                }
                records.push(EpochRecord {
                    epoch: r.epoch,
                    loss: f64::NAN,
                    layer_losses: Vec::new(),
                    class_loss: None,
                    contrast: Vec::new(),
                    heldout_f: None,
                    maps: Vec::new(),
                });
            }
            let rec = records.last_mut().expect("pushed above");
            match r.metric.as_str() {
                "loss" => rec.loss = r.value,
                "class_loss" => rec.class_loss = Some(r.value),
                "heldout_f" => rec.heldout_f = Some(r.value),
                "layer_loss" => rec.layer_losses.push(r.value),
                m => {
                    let k = CONTRAST_METRICS
                        .iter()
                        .position(|&c| c == m)
                        .ok_or_else(|| malformed(format!("unknown metric `{m}`")))?;
                    if rec.contrast.last().is_none_or(|c| c.layer != r.layer) {
                        rec.contrast.push(LayerContrast {
                            layer: r.layer,
                            l2_rms: f64::NAN,
                            l2_michelson: f64::NAN,
                            cos_rms: f64::NAN,
                            cos_michelson: f64::NAN,
                        });
                    }
                    let c = rec.contrast.last_mut().expect("pushed above");
                    match k {
                        0 => c.l2_rms = r.value,
                        1 => c.l2_michelson = r.value,
                        2 => c.cos_rms = r.value,
                        _ => c.cos_michelson = r.value,
                    }
                }
            }
        }
        Ok(Self { records })
    }
}

/// Contrast rows per epoch, layer and metric.
pub fn contrast_analysis(history: &RunHistory) -> Result<ContrastReport> {
    if history.is_empty() {
        return Err(crate::error::invalid!(
            "contrast analysis needs at least one epoch"
        ));
    }
    let mut rows = Vec::new();
    for r in &history.records {
        for c in &r.contrast {
            for (name, v) in CONTRAST_METRICS.iter().zip(c.values()) {
                rows.push(ContrastRow {
                    epoch: r.epoch,
                    layer: c.layer,
                    metric: (*name).to_owned(),
                    value: v,
                });
            }
        }
    }
    Ok(ContrastReport { rows })
}
