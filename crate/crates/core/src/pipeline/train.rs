//! Mini-batch SGD over side-output losses, with per-epoch bookkeeping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{item_seed, Dataset, ScenePair};
use crate::encoder::{EncoderConfig, LEVELS};
use crate::error::{invalid, Error, Result};
use crate::evalsuite::{michelson_contrast, pr_curve, rms_contrast};
use crate::losses::{
    balanced_pixel_cross_entropy, mlso_loss, multitask_loss, pixel_cross_entropy, LayerInput,
    LossConfig, LossKind,
};
use crate::metric::{cosine_similarity_map, l2_distance_map, DistanceKind};
use crate::numerics::{sgd_step, zero_grads, Graph, LearningRates, Scalar, Tensor, Var};

use super::history::{EpochRecord, LayerContrast, RunHistory, StoredMap};
use super::infer::{predict_fused, OutputHead};
use super::model::{Bound, CosimNet, PairFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Side-output metric losses only.
    Metric,
    /// Pixel cross-entropy of the classification head plus `λ` times the
    /// side-output metric losses.
    FcnMetrics,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "metric" => Ok(TrainMode::Metric),
            "fcn" | "fcn_metrics" => Ok(TrainMode::FcnMetrics),
            other => Err(invalid!("unknown mode `{other}` (expected metric or fcn)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossConfig<f64>,
    pub mode: TrainMode,
    pub seed: u64,
    /// Resolution of the held-out PR sweep.
    pub eval_thresholds: usize,
    /// Keep every map the contrast averages were computed from.
    pub keep_maps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr_backbone: 1e-2,
            lr_head: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-5,
            loss: LossConfig::default(),
            mode: TrainMode::Metric,
            seed: 0,
            eval_thresholds: 101,
            keep_maps: false,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning rates meant for a pretrained backbone.
    pub fn paper_preset() -> Self {
        Self {
            lr_backbone: 1e-7,
            lr_head: 1e-8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid!("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be at least 1"));
        }
        for (name, v) in [
            ("backbone learning rate", self.lr_backbone),
            ("head learning rate", self.lr_head),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid!(
                    "{name} must be a finite non-negative number, got {v}"
                ));
            }
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(invalid!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.eval_thresholds < 2 {
            return Err(invalid!("at least 2 evaluation thresholds are needed"));
        }
        self.loss.validate()?;
        if self.loss.betas.len() != LEVELS {
            return Err(invalid!(
                "expected {LEVELS} layer weights, got {}",
                self.loss.betas.len()
            ));
        }
        Ok(())
    }

    /// Distance implied by the loss.
    pub fn distance(&self) -> DistanceKind {
        match self.loss.kind {
            LossKind::Cosine => DistanceKind::Cosine,
            LossKind::L2Contrastive | LossKind::Thresholded => DistanceKind::Euclidean,
        }
    }

    /// A freshly initialized model matching this configuration.
    pub fn init_model<T: Scalar>(&self, encoder: EncoderConfig) -> Result<CosimNet<T>> {
        CosimNet::new(encoder, self.distance(), self.mode == TrainMode::FcnMetrics)
    }
}

/// Passed to the step observer after every optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// 1-based.
    pub epoch: usize,
    /// 0-based within the epoch.
    pub batch: usize,
    /// Mean item loss of the batch.
    pub loss: f64,
}

/// Item visiting order of an epoch.
pub fn epoch_order(seed: u64, epoch: usize, items: &[usize]) -> Vec<usize> {
    let mut order = items.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(item_seed(seed, epoch)));
    order
}

/// Scalar objective of one pair and its parts.
pub struct ItemObjective<T> {
    pub total: Var,
    pub total_value: T,
    pub layer_values: Vec<T>,
    pub class_value: Option<T>,
    pub features: PairFeatures,
}

pub fn item_objective<T: Scalar>(
    model: &CosimNet<T>,
    g: &Graph<T>,
    bound: &Bound,
    item: &ScenePair<T>,
    loss: &LossConfig<T>,
    mode: TrainMode,
) -> Result<ItemObjective<T>> {
    let features = model.forward(g, bound, &item.pair)?;
    let masks = (0..LEVELS)
        .map(|l| {
            let s = g.shape(features.f0[l]);
            item.mask.resize_nearest(s[1], s[2])
        })
        .collect::<Result<Vec<_>>>()?;
    let layers: Vec<LayerInput<'_>> = (0..LEVELS)
        .map(|l| LayerInput {
            f0: features.f0[l],
            f1: features.f1[l],
            mask: &masks[l],
        })
        .collect();
    let cos = (loss.kind == LossKind::Cosine).then(|| bound.cos_pairs());
    let breakdown = mlso_loss(g, &layers, loss, cos.as_deref())?;
    let (total, class_value) = match mode {
        TrainMode::Metric => (breakdown.total, None),
        TrainMode::FcnMetrics => {
            let (h, w) = item.pair.resolution();
            let logits = model.class_logits(g, bound, &features, h, w)?;
            let ce = if loss.balance_classes {
                balanced_pixel_cross_entropy(g, logits, &item.mask)?
            } else {
                pixel_cross_entropy(g, logits, &item.mask)?
            };
            (
                multitask_loss(g, ce, breakdown.total, loss.lambda)?,
                Some(g.item(ce)?),
            )
        }
    };
    Ok(ItemObjective {
        total,
        total_value: g.item(total)?,
        layer_values: breakdown.per_layer_values,
        class_value,
        features,
    })
}

#[derive(Default)]
struct ContrastAccumulator {
    sums: [[f64; 4]; LEVELS],
    count: usize,
    maps: Vec<StoredMap>,
}

impl ContrastAccumulator {
    fn add<T: Scalar>(
        &mut self,
        item: usize,
        f0: &[Tensor<T>],
        f1: &[Tensor<T>],
        keep: bool,
    ) -> Result<()> {
        for l in 0..LEVELS {
            let d = l2_distance_map(&f0[l], &f1[l])?;
            let l2: Vec<f64> = d
                .values
                .data()
                .iter()
                .map(|v| (v.to_f64_lossy() / 2.0).clamp(0.0, 1.0))
                .collect();
            let s = cosine_similarity_map(&f0[l], &f1[l])?;
            let cos: Vec<f64> = s
                .values
                .data()
                .iter()
                .map(|v| ((1.0 - v.to_f64_lossy()) / 2.0).clamp(0.0, 1.0))
                .collect();
            let sums = &mut self.sums[l];
            sums[0] += rms_contrast(&l2);
            sums[1] += michelson_contrast(&l2)?;
            sums[2] += rms_contrast(&cos);
            sums[3] += michelson_contrast(&cos)?;
            if keep {
                for (metric, values) in [(DistanceKind::Euclidean, l2), (DistanceKind::Cosine, cos)]
                {
                    self.maps.push(StoredMap {
                        item,
                        layer: l + 1,
                        metric,
                        values,
                    });
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    fn finish(self) -> (Vec<LayerContrast>, Vec<StoredMap>) {
        let n = self.count.max(1) as f64;
        let rows = self
            .sums
            .iter()
            .enumerate()
            .map(|(l, s)| LayerContrast {
                layer: l + 1,
                l2_rms: s[0] / n,
                l2_michelson: s[1] / n,
                cos_rms: s[2] / n,
                cos_michelson: s[3] / n,
            })
            .collect();
        (rows, self.maps)
    }
}

fn check_model<T: Scalar>(model: &CosimNet<T>, cfg: &TrainConfig) -> Result<()> {
    if model.distance != cfg.distance() {
        return Err(invalid!(
            "model reports {} distances but the loss needs {}",
            model.distance.as_str(),
            cfg.distance().as_str()
        ));
    }
    if cfg.mode == TrainMode::FcnMetrics && !model.has_classifier() {
        return Err(invalid!(
            "fcn mode needs a model with a classification head"
        ));
    }
    Ok(())
}

/// Best F1 of fused maps over the test split, if there is one.
pub fn heldout_f<T: Scalar>(
    model: &CosimNet<T>,
    ds: &Dataset<T>,
    head: OutputHead,
    n: usize,
) -> Result<Option<f64>> {
    if ds.split.test.is_empty() {
        return Ok(None);
    }
    let mut maps = Vec::with_capacity(ds.split.test.len());
    let mut gts = Vec::with_capacity(ds.split.test.len());
    for item in ds.test() {
        maps.push(predict_fused(model, &item.pair, head)?);
        gts.push(item.mask.clone());
    }
    Ok(Some(pr_curve(&maps, &gts, n)?.best_f))
}

pub fn train<T: Scalar>(
    model: CosimNet<T>,
    ds: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<(CosimNet<T>, RunHistory)> {
    train_with(model, ds, cfg, |_, _| {})
}

/// [`train`], calling `observer` after every optimizer step.
pub fn train_with<T, F>(
    mut model: CosimNet<T>,
    ds: &Dataset<T>,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<(CosimNet<T>, RunHistory)>
where
    T: Scalar,
    F: FnMut(&StepInfo, &CosimNet<T>),
{
    cfg.validate()?;
    check_model(&model, cfg)?;
    if ds.split.train.is_empty() {
        return Err(invalid!("training split is empty"));
    }
    let loss_cfg: LossConfig<T> = cfg.loss.cast();
    let lrs = LearningRates::new(
        T::from_f64_lossy(cfg.lr_backbone),
        T::from_f64_lossy(cfg.lr_head),
    );
    let momentum = T::from_f64_lossy(cfg.momentum);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    let use_cos = cfg.loss.kind == LossKind::Cosine;
    let use_cls = cfg.mode == TrainMode::FcnMetrics;
    let head = if use_cls {
        OutputHead::Classifier
    } else {
        OutputHead::Metric
    };

    let mut history = RunHistory::default();
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, &ds.split.train);
        let mut loss_sum = 0.0;
        let mut layer_sums = [0.0; LEVELS];
        let mut class_sum = 0.0;
        let mut contrast = ContrastAccumulator::default();

        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            zero_grads(model.encoder.params_mut());
            if use_cos {
                zero_grads(&mut model.cos_heads);
            }
            if let Some(c) = model.classifier.as_mut().filter(|_| use_cls) {
                zero_grads(c);
            }
            let scale = T::one() / T::from_usize_lossy(chunk.len());
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let item = &ds.items[idx];
                let g = Graph::new();
                let bound = model.bind(&g);
                let obj = item_objective(&model, &g, &bound, item, &loss_cfg, cfg.mode)?;
                let value = obj.total_value.to_f64_lossy();
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch,
                        message: format!("loss is {value} on item `{}`", item.pair.identifier),
                    });
                }
                batch_loss += value;
                for (s, v) in layer_sums.iter_mut().zip(&obj.layer_values) {
                    *s += v.to_f64_lossy();
                }
                class_sum += obj.class_value.map_or(0.0, |v| v.to_f64_lossy());
                {
                    let f0: Vec<Tensor<T>> = obj
                        .features
                        .f0
                        .iter()
                        .map(|&v| g.value(v).clone())
                        .collect();
                    let f1: Vec<Tensor<T>> = obj
                        .features
                        .f1
                        .iter()
                        .map(|&v| g.value(v).clone())
                        .collect();
                    contrast.add(idx, &f0, &f1, cfg.keep_maps)?;
                }
                let scaled = g.affine(obj.total, scale, T::zero());
                let grads = g.backward(scaled)?;
                grads.accumulate_into(&bound.encoder, model.encoder.params_mut())?;
                if use_cos {
                    grads.accumulate_into(&bound.cos_heads, &mut model.cos_heads)?;
                }
                if use_cls {
                    let c = model.classifier.as_mut().expect("checked by check_model");
                    grads.accumulate_into(&bound.classifier, c)?;
                }
            }
            sgd_step(model.encoder.params_mut(), &lrs, momentum, wd)?;
            if use_cos {
                sgd_step(&mut model.cos_heads, &lrs, momentum, wd)?;
            }
            if use_cls {
                sgd_step(
                    model.classifier.as_mut().expect("checked"),
                    &lrs,
                    momentum,
                    wd,
                )?;
            }
            loss_sum += batch_loss;
            observer(
                &StepInfo {
                    epoch,
                    batch,
                    loss: batch_loss / chunk.len() as f64,
                },
                &model,
            );
        }

        let n = order.len() as f64;
        let (layer_contrast, maps) = contrast.finish();
        history.records.push(EpochRecord {
            epoch,
            loss: loss_sum / n,
            layer_losses: layer_sums.iter().map(|s| s / n).collect(),
            class_loss: use_cls.then_some(class_sum / n),
            contrast: layer_contrast,
            heldout_f: heldout_f(&model, ds, head, cfg.eval_thresholds)?,
            maps,
        });
    }
    Ok((model, history))
}
