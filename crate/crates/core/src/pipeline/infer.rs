//! Multi-level inference: per-level change maps at output resolution,
//! averaged into one map, then thresholded once at the mean of the
//! per-level thresholds.

use serde::{Deserialize, Serialize};

use crate::data::{ImagePair, ScenePair};
use crate::encoder::LEVELS;
use crate::error::{invalid, Result};
use crate::evalsuite::{
    binarize, confusion, fpr_fnr, pr_curve, precision_recall_f, ConfusionCounts, EvalReport,
};
use crate::losses::ChangeMask;
use crate::metric::{fuse_predictions, upsample_change_map, ChangeMap};
use crate::numerics::Scalar;

use super::model::CosimNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// Distance-derived change maps.
    Metric,
    /// Changed-class probability of the classification head.
    Classifier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceConfig {
    pub thresholds: [f64; LEVELS],
    /// `(H, W)`; the input resolution when absent.
    pub output: Option<(usize, usize)>,
    pub head: OutputHead,
}

impl InferenceConfig {
    /// Thresholds of 0.5 and the classifier head when the model has one.
    pub fn for_model<T: Scalar>(model: &CosimNet<T>) -> Self {
        Self {
            thresholds: [0.5; LEVELS],
            output: None,
            head: default_head(model),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(invalid!("threshold {t} outside [0, 1]"));
        }
        Ok(())
    }

    pub fn fused_threshold(&self) -> f64 {
        self.thresholds.iter().sum::<f64>() / LEVELS as f64
    }
}

pub fn default_head<T: Scalar>(model: &CosimNet<T>) -> OutputHead {
    if model.has_classifier() {
        OutputHead::Classifier
    } else {
        OutputHead::Metric
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference<T> {
    pub levels: Vec<ChangeMap<T>>,
    pub fused: ChangeMap<T>,
    pub prediction: ChangeMask,
}

fn level_and_fused<T: Scalar>(
    model: &CosimNet<T>,
    pair: &ImagePair<T>,
    head: OutputHead,
    (h, w): (usize, usize),
) -> Result<(Vec<ChangeMap<T>>, ChangeMap<T>)> {
    match head {
        OutputHead::Metric => {
            let levels = model.upsampled_level_maps(pair, h, w)?;
            let fused = fuse_predictions(&levels)?;
            Ok((levels, fused))
        }
        OutputHead::Classifier => {
            let (f0, f1) = model.encode_pair(pair)?;
            model.class_probability_maps(&f0, &f1, h, w)
        }
    }
}

pub fn infer<T: Scalar>(
    model: &CosimNet<T>,
    pair: &ImagePair<T>,
    icfg: &InferenceConfig,
) -> Result<Inference<T>> {
    icfg.validate()?;
    let res = icfg.output.unwrap_or_else(|| pair.resolution());
    let (levels, fused) = level_and_fused(model, pair, icfg.head, res)?;
    let prediction = binarize(&fused, icfg.fused_threshold())?;
    Ok(Inference {
        levels,
        fused,
        prediction,
    })
}

/// Fused map at the input resolution.
pub fn predict_fused<T: Scalar>(
    model: &CosimNet<T>,
    pair: &ImagePair<T>,
    head: OutputHead,
) -> Result<ChangeMap<T>> {
    Ok(level_and_fused(model, pair, head, pair.resolution())?.1)
}

/// Per-level thresholds maximizing pooled F1 of each level's upsampled map
/// over `items`.
pub fn select_thresholds<T: Scalar>(
    model: &CosimNet<T>,
    items: &[&ScenePair<T>],
    head: OutputHead,
    n_thresholds: usize,
) -> Result<[f64; LEVELS]> {
    if items.is_empty() {
        return Err(invalid!("threshold selection needs at least one item"));
    }
    let mut per_level: Vec<Vec<ChangeMap<T>>> = (0..LEVELS)
        .map(|_| Vec::with_capacity(items.len()))
        .collect();
    let gts: Vec<ChangeMask> = items.iter().map(|s| s.mask.clone()).collect();
    for s in items {
        let (levels, _) = level_and_fused(model, &s.pair, head, s.pair.resolution())?;
        for (l, m) in levels.into_iter().enumerate() {
            per_level[l].push(m);
        }
    }
    let mut out = [0.0; LEVELS];
    for (l, maps) in per_level.iter().enumerate() {
        out[l] = pr_curve(maps, &gts, n_thresholds)?.best_threshold;
    }
    Ok(out)
}

/// Pooled report of fused maps over `items`, binarized at the mean threshold.
pub fn evaluate_model<T: Scalar>(
    model: &CosimNet<T>,
    items: &[&ScenePair<T>],
    icfg: &InferenceConfig,
    n_thresholds: usize,
) -> Result<EvalReport> {
    icfg.validate()?;
    let threshold = icfg.fused_threshold();
    let mut maps = Vec::with_capacity(items.len());
    let mut gts = Vec::with_capacity(items.len());
    let mut counts = ConfusionCounts::default();
    for s in items {
        let fused = predict_fused(model, &s.pair, icfg.head)?;
        let fused = if let Some((h, w)) = icfg.output.filter(|&r| r != s.pair.resolution()) {
            upsample_change_map(&fused, h, w)?
        } else {
            fused
        };
        if fused.resolution() != s.mask.resolution() {
            return Err(invalid!(
                "prediction {:?} does not match mask {:?} of `{}`",
                fused.resolution(),
                s.mask.resolution(),
                s.pair.identifier
            ));
        }
        counts += confusion(&binarize(&fused, threshold)?, &s.mask)?;
        maps.push(fused);
        gts.push(s.mask.clone());
    }
    let curve = pr_curve(&maps, &gts, n_thresholds)?;
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
