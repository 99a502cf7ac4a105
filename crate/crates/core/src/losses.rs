//! Contrastive-family objectives over paired feature maps, the per-layer
//! combination used for side-output supervision, and the pixel
//! classification terms of the multi-task mode.
//!
//! All losses are built on a [`Graph`] so they can be differentiated; the
//! returned [`Var`] is a scalar node.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metric::cos_change_graph;
use crate::numerics::{Graph, Scalar, Var, NORMALIZE_EPS};

/// Binary per-pixel labels. Stored as `y`, with `1` = unchanged and `0` =
/// changed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChangeMask {
    height: usize,
    width: usize,
    y: Vec<u8>,
}

impl ChangeMask {
    pub fn new(height: usize, width: usize, y: Vec<u8>) -> Result<Self> {
        if y.len() != height * width {
            return Err(invalid!(
                "mask of {height}×{width} needs {} labels, got {}",
                height * width,
                y.len()
            ));
        }
        if let Some(v) = y.iter().find(|&&v| v > 1) {
            return Err(invalid!("mask labels must be 0 or 1, found {v}"));
        }
        Ok(Self { height, width, y })
    }

    pub fn all_unchanged(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            y: vec![1; height * width],
        }
    }

    /// From a changed-indicator array (`true` = changed).
    pub fn from_changed(height: usize, width: usize, changed: &[bool]) -> Result<Self> {
        Self::new(
            height,
            width,
            changed.iter().map(|&c| u8::from(!c)).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Raw `y` labels.
    pub fn labels(&self) -> &[u8] {
        &self.y
    }

    #[inline]
    pub fn is_changed(&self, i: usize) -> bool {
        self.y[i] == 0
    }

    pub fn changed_count(&self) -> usize {
        self.y.iter().filter(|&&v| v == 0).count()
    }

    pub fn changed_indicator(&self) -> Vec<u8> {
        self.y.iter().map(|&v| 1 - v).collect()
    }

    pub fn unchanged_labels<T: Scalar>(&self) -> Vec<T> {
        self.y
            .iter()
            .map(|&v| if v == 1 { T::one() } else { T::zero() })
            .collect()
    }

    /// Nearest-neighbour resampling with pixel-centre alignment; labels
    /// stay binary.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("mask target size must be positive"));
        }
        let rows = nearest_index(self.height, height);
        let cols = nearest_index(self.width, width);
        let mut y = Vec::with_capacity(height * width);
        for &r in &rows {
            for &c in &cols {
                y.push(self.y[r * self.width + c]);
            }
        }
        Ok(Self { height, width, y })
    }
}

/// `src = floor((dst + ½)·n_src / n_dst)`, clamped.
pub(crate) fn nearest_index(n_src: usize, n_dst: usize) -> Vec<usize> {
    (0..n_dst)
        .map(|d| (((2 * d + 1) * n_src) / (2 * n_dst)).min(n_src - 1))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L2Contrastive,
    Cosine,
    Thresholded,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::L2Contrastive => "l2",
            LossKind::Cosine => "cos",
            LossKind::Thresholded => "tcl",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" | "l2_contrastive" => Ok(LossKind::L2Contrastive),
            "cos" | "cosine" => Ok(LossKind::Cosine),
            "tcl" | "thresholded" => Ok(LossKind::Thresholded),
            other => Err(invalid!("unknown loss `{other}` (expected l2, cos or tcl)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig<T> {
    pub margin: T,
    pub tau: T,
    pub betas: Vec<T>,
    pub lambda: T,
    pub kind: LossKind,
    /// Inverse-frequency pixel weighting of changed vs unchanged pixels.
    pub balance_classes: bool,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        Self {
            margin: T::one(),
            tau: T::zero(),
            betas: vec![T::one(); 3],
            lambda: T::from_f64_lossy(3.0),
            kind: LossKind::L2Contrastive,
            balance_classes: false,
        }
    }
}

impl<T: Scalar> LossConfig<T> {
    pub fn cast<U: Scalar>(&self) -> LossConfig<U> {
        let c = |v: T| U::from_f64_lossy(v.to_f64_lossy());
        LossConfig {
            margin: c(self.margin),
            tau: c(self.tau),
            betas: self.betas.iter().map(|&b| c(b)).collect(),
            lambda: c(self.lambda),
            kind: self.kind,
            balance_classes: self.balance_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > T::zero()) {
            return Err(invalid!("margin must be positive, got {}", self.margin));
        }
        check_tau(self.margin, self.tau)?;
        if self.betas.iter().any(|b| !(*b >= T::zero())) {
            return Err(invalid!("layer weights must be non-negative"));
        }
        if !self.betas.iter().any(|b| *b > T::zero()) {
            return Err(invalid!("at least one layer weight must be positive"));
        }
        if !(self.lambda >= T::zero()) {
            return Err(invalid!("lambda must be non-negative, got {}", self.lambda));
        }
        Ok(())
    }
}

fn check_tau<T: Scalar>(m: T, tau: T) -> Result<()> {
    if !(tau >= T::zero() && tau < m) {
        return Err(invalid!(
            "threshold tau={tau} must satisfy 0 <= tau < margin ({m})"
        ));
    }
    Ok(())
}

fn check_mask<T: Scalar>(g: &Graph<T>, f: Var, mask: &ChangeMask) -> Result<()> {
    let shape = g.shape(f);
    let (h, w) = match shape[..] {
        [_, h, w] => (h, w),
        _ => return Err(invalid!("features must be C×h×w, got {shape:?}")),
    };
    if (h, w) != mask.resolution() {
        return Err(invalid!(
            "mask resolution {:?} does not match feature map {h}×{w}",
            mask.resolution()
        ));
    }
    Ok(())
}

/// Per-pixel weights normalized to mean one, or `None` when unweighted.
fn pixel_weights<T: Scalar>(mask: &ChangeMask, balance: bool) -> Option<Vec<T>> {
    if !balance {
        return None;
    }
    let n = mask.len();
    let changed = mask.changed_count();
    let unchanged = n - changed;
    if changed == 0 || unchanged == 0 {
        return None;
    }
    let half_n = T::from_usize_lossy(n) / (T::one() + T::one());
    let wc = half_n / T::from_usize_lossy(changed);
    let wu = half_n / T::from_usize_lossy(unchanged);
    Some(
        (0..n)
            .map(|i| if mask.is_changed(i) { wc } else { wu })
            .collect(),
    )
}

/// Splits `(y, 1−y)` factors, folding in optional pixel weights.
fn branch_factors<T: Scalar>(mask: &ChangeMask, weights: Option<&[T]>) -> (Vec<T>, Vec<T>) {
    let y = mask.unchanged_labels::<T>();
    let mut pos = y.clone();
    let mut neg: Vec<T> = y.iter().map(|&v| T::one() - v).collect();
    if let Some(w) = weights {
        pos.iter_mut().zip(w).for_each(|(p, &w)| *p *= w);
        neg.iter_mut().zip(w).for_each(|(p, &w)| *p *= w);
    }
    (pos, neg)
}

fn reduce_mean<T: Scalar>(g: &Graph<T>, per_pixel: Var, weights: Option<&[T]>) -> Var {
    match weights {
        None => g.mean(per_pixel),
        Some(w) => {
            let total: T = w.iter().copied().sum();
            g.affine(g.sum(per_pixel), T::one() / total, T::zero())
        }
    }
}

fn contrastive_impl<T: Scalar>(
    g: &Graph<T>,
    f0: Var,
    f1: Var,
    mask: &ChangeMask,
    margin: T,
    tau: Option<T>,
    balance: bool,
) -> Result<Var> {
    check_mask(g, f0, mask)?;
    let d = g.l2_distance(f0, f1)?;
    let weights = pixel_weights::<T>(mask, balance);
    let (pos_f, neg_f) = branch_factors(mask, weights.as_deref());
    let pull = match tau {
        None => d,
        Some(t) => g.relu(g.affine(d, T::one(), -t)),
    };
    let pos = g.mul_const(pull, &pos_f)?;
    let neg = g.mul_const(g.relu(g.affine(d, -T::one(), margin)), &neg_f)?;
    Ok(reduce_mean(g, g.add(pos, neg)?, weights.as_deref()))
}

/// Mean over pixels of `y·D + (1−y)·max(0, m − D)`, `D` the l2 distance.
pub fn contrastive_loss<T: Scalar>(
    g: &Graph<T>,
    f0: Var,
    f1: Var,
    mask: &ChangeMask,
    margin: T,
) -> Result<Var> {
    if !(margin > T::zero()) {
        return Err(invalid!("margin must be positive, got {margin}"));
    }
    contrastive_impl(g, f0, f1, mask, margin, None, false)
}

/// Mean over pixels of `y·max(0, D − τ) + (1−y)·max(0, m − D)`.
pub fn thresholded_contrastive_loss<T: Scalar>(
    g: &Graph<T>,
    f0: Var,
    f1: Var,
    mask: &ChangeMask,
    margin: T,
    tau: T,
) -> Result<Var> {
    check_tau(margin, tau)?;
    contrastive_impl(g, f0, f1, mask, margin, Some(tau), false)
}

/// `Σ_k (y_k − exp(−|w·s_k + b|))²` with `s` the cosine similarity and
/// `w`, `b` scalar nodes.
pub fn cosine_loss<T: Scalar>(
    g: &Graph<T>,
    f0: Var,
    f1: Var,
    mask: &ChangeMask,
    w: Var,
    b: Var,
) -> Result<Var> {
    cosine_impl(g, f0, f1, mask, w, b, false)
}

fn cosine_impl<T: Scalar>(
    g: &Graph<T>,
    f0: Var,
    f1: Var,
    mask: &ChangeMask,
    w: Var,
    b: Var,
    balance: bool,
) -> Result<Var> {
    check_mask(g, f0, mask)?;
    let s = g.cosine_similarity(f0, f1, T::from_f64_lossy(NORMALIZE_EPS))?;
    // change = 1 − exp(−|ws+b|), so y − exp(−|ws+b|) = change − (1 − y)
    let change = cos_change_graph(g, s, w, b)?;
    let target: Vec<T> = mask
        .unchanged_labels::<T>()
        .iter()
        .map(|&y| y - T::one())
        .collect();
    let resid = g.square(g.add_const(change, &target)?);
    Ok(match pixel_weights::<T>(mask, balance) {
        None => g.sum(resid),
        Some(wts) => g.sum(g.mul_const(resid, &wts)?),
    })
}

/// Inputs of one side-output layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerInput<'a> {
    pub f0: Var,
    pub f1: Var,
    pub mask: &'a ChangeMask,
}

#[derive(Debug, Clone)]
pub struct LayerLossBreakdown<T> {
    pub per_layer: Vec<Var>,
    pub total: Var,
    pub per_layer_values: Vec<T>,
    pub total_value: T,
}

/// One layer's loss under `cfg.kind`; `cos_head` supplies `(w, b)` for
/// the cosine objective.
pub fn layer_loss<T: Scalar>(
    g: &Graph<T>,
    layer: LayerInput<'_>,
    cfg: &LossConfig<T>,
    cos_head: Option<(Var, Var)>,
) -> Result<Var> {
    let LayerInput { f0, f1, mask } = layer;
    match cfg.kind {
        LossKind::L2Contrastive => {
            contrastive_impl(g, f0, f1, mask, cfg.margin, None, cfg.balance_classes)
        }
        LossKind::Thresholded => {
            check_tau(cfg.margin, cfg.tau)?;
            contrastive_impl(
                g,
                f0,
                f1,
                mask,
                cfg.margin,
                Some(cfg.tau),
                cfg.balance_classes,
            )
        }
        LossKind::Cosine => {
            let (w, b) =
                cos_head.ok_or_else(|| invalid!("cosine loss needs per-layer scale and shift"))?;
            cosine_impl(g, f0, f1, mask, w, b, cfg.balance_classes)
        }
    }
}

/// `Σ_h β_h·loss_h` over side-output layers.
pub fn mlso_loss<T: Scalar>(
    g: &Graph<T>,
    layers: &[LayerInput<'_>],
    cfg: &LossConfig<T>,
    cos_heads: Option<&[(Var, Var)]>,
) -> Result<LayerLossBreakdown<T>> {
    cfg.validate()?;
    if cfg.betas.len() != layers.len() {
        return Err(invalid!(
            "{} layer weights for {} layers",
            cfg.betas.len(),
            layers.len()
        ));
    }
    if let Some(h) = cos_heads {
        if h.len() != layers.len() {
            return Err(invalid!(
                "{} cosine heads for {} layers",
                h.len(),
                layers.len()
            ));
        }
    }
    let mut per_layer = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        per_layer.push(layer_loss(g, *layer, cfg, cos_heads.map(|h| h[i]))?);
    }
    let terms: Vec<(Var, T)> = per_layer
        .iter()
        .copied()
        .zip(cfg.betas.iter().copied())
        .collect();
    let total = g.weighted_sum(&terms)?;
    let per_layer_values = per_layer
        .iter()
        .map(|&v| g.item(v))
        .collect::<Result<_>>()?;
    let total_value = g.item(total)?;
    Ok(LayerLossBreakdown {
        per_layer,
        total,
        per_layer_values,
        total_value,
    })
}

/// Class index per pixel: `1` = changed, `0` = unchanged.
pub fn change_classes(mask: &ChangeMask) -> Vec<usize> {
    mask.labels().iter().map(|&y| usize::from(y == 0)).collect()
}

/// Mean two-class cross-entropy of `2×h×w` logits; channel 1 is "changed".
pub fn pixel_cross_entropy<T: Scalar>(g: &Graph<T>, logits: Var, mask: &ChangeMask) -> Result<Var> {
    check_logits(g, logits, mask)?;
    g.softmax_cross_entropy(logits, &change_classes(mask))
}

/// [`pixel_cross_entropy`] under the inverse-frequency pixel weights of the
/// metric losses; unweighted when the mask holds a single class.
pub fn balanced_pixel_cross_entropy<T: Scalar>(
    g: &Graph<T>,
    logits: Var,
    mask: &ChangeMask,
) -> Result<Var> {
    check_logits(g, logits, mask)?;
    match pixel_weights::<T>(mask, true) {
        Some(w) => g.weighted_softmax_cross_entropy(logits, &change_classes(mask), &w),
        None => g.softmax_cross_entropy(logits, &change_classes(mask)),
    }
}

fn check_logits<T: Scalar>(g: &Graph<T>, logits: Var, mask: &ChangeMask) -> Result<()> {
    let shape = g.shape(logits);
    match shape[..] {
        [2, h, w] if (h, w) == mask.resolution() => Ok(()),
        [2, h, w] => Err(invalid!(
            "logits {h}×{w} do not match mask {:?}",
            mask.resolution()
        )),
        _ => Err(invalid!(
            "pixel cross entropy needs 2 class channels, got shape {shape:?}"
        )),
    }
}

/// `class_loss + λ·feat_loss`.
pub fn multitask_loss<T: Scalar>(
    g: &Graph<T>,
    class_loss: Var,
    feat_loss: Var,
    lambda: T,
) -> Result<Var> {
    g.weighted_sum(&[(class_loss, T::one()), (feat_loss, lambda)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn single(g: &Graph<f64>, a: &[f64], b: &[f64]) -> (Var, Var) {
        let c = a.len();
        (
            g.constant(Tensor::from_f64(&[c, 1, 1], a).unwrap()),
            g.constant(Tensor::from_f64(&[c, 1, 1], b).unwrap()),
        )
    }

    const UNCHANGED: u8 = 1;
    const CHANGED: u8 = 0;

    #[test]
    fn contrastive_examples() {
        let g = Graph::<f64>::new();
        let m1 = ChangeMask::new(1, 1, vec![UNCHANGED]).unwrap();
        let m0 = ChangeMask::new(1, 1, vec![CHANGED]).unwrap();
        let (a, _) = single(&g, &[0.6, 0.8], &[0.0, 0.0]);
        assert_eq!(
            g.item(contrastive_loss(&g, a, a, &m1, 1.0).unwrap())
                .unwrap(),
            0.0
        );

        let (a, b) = single(&g, &[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(
            g.item(contrastive_loss(&g, a, b, &m0, 1.0).unwrap())
                .unwrap(),
            0.0
        );
        let v = g
            .item(contrastive_loss(&g, a, b, &m1, 1.0).unwrap())
            .unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn thresholded_examples() {
        let g = Graph::<f64>::new();
        let m1 = ChangeMask::new(1, 1, vec![UNCHANGED]).unwrap();
        let (a, b) = single(&g, &[0.05, 0.0], &[0.0, 0.0]);
        assert_eq!(
            g.item(thresholded_contrastive_loss(&g, a, b, &m1, 1.0, 0.1).unwrap())
                .unwrap(),
            0.0
        );
        let (a, b) = single(&g, &[1.0, 0.0], &[0.0, 1.0]);
        let v = g
            .item(thresholded_contrastive_loss(&g, a, b, &m1, 1.0, 0.1).unwrap())
            .unwrap();
        assert!((v - (2f64.sqrt() - 0.1)).abs() < 1e-15);
        assert!(thresholded_contrastive_loss(&g, a, b, &m1, 1.0, 1.0).is_err());
    }

    #[test]
    fn cosine_examples() {
        let g = Graph::<f64>::new();
        let m1 = ChangeMask::new(1, 1, vec![UNCHANGED]).unwrap();
        let (a, _) = single(&g, &[0.6, 0.8], &[0.0, 0.0]);
        let w = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(-1.0));
        assert!(
            g.item(cosine_loss(&g, a, a, &m1, w, b).unwrap())
                .unwrap()
                .abs()
                < 1e-30
        );
        let b0 = g.constant(Tensor::scalar(0.0));
        let v = g.item(cosine_loss(&g, a, a, &m1, w, b0).unwrap()).unwrap();
        let expect = (1.0 - (-1f64).exp()).powi(2);
        assert!((v - expect).abs() < 1e-15 && (v - 0.39958).abs() < 1e-5);

        let m0 = ChangeMask::new(1, 1, vec![CHANGED]).unwrap();
        let big = g.constant(Tensor::scalar(800.0));
        assert!(
            g.item(cosine_loss(&g, a, a, &m0, big, b0).unwrap())
                .unwrap()
                < 1e-300
        );
    }

    #[test]
    fn mlso_weighting() {
        let g = Graph::<f64>::new();
        let m = ChangeMask::new(1, 1, vec![UNCHANGED]).unwrap();
        let mut layers = Vec::new();
        for d in [0.2, 0.3, 0.5] {
            let (a, b) = single(&g, &[d, 0.0], &[0.0, 0.0]);
            layers.push(LayerInput {
                f0: a,
                f1: b,
                mask: &m,
            });
        }
        let cfg = LossConfig::<f64>::default();
        let out = mlso_loss(&g, &layers, &cfg, None).unwrap();
        assert!((out.total_value - 1.0).abs() < 1e-15);

        let one_hot = LossConfig {
            betas: vec![0.0, 0.0, 1.0],
            ..cfg.clone()
        };
        let out = mlso_loss(&g, &layers, &one_hot, None).unwrap();
        assert_eq!(out.total_value, out.per_layer_values[2]);

        let zero = LossConfig {
            betas: vec![0.0; 3],
            ..cfg.clone()
        };
        assert!(mlso_loss(&g, &layers, &zero, None).is_err());
        let short = LossConfig {
            betas: vec![1.0; 2],
            ..cfg
        };
        assert!(mlso_loss(&g, &layers, &short, None).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let g = Graph::<f64>::new();
        let m = ChangeMask::new(1, 2, vec![CHANGED, UNCHANGED]).unwrap();
        // channel 1 = changed
        let right = g.constant(Tensor::from_f64(&[2, 1, 2], &[-20.0, 20.0, 20.0, -20.0]).unwrap());
        assert!(g.item(pixel_cross_entropy(&g, right, &m).unwrap()).unwrap() < 1e-8);
        let flat = g.constant(Tensor::zeros(&[2, 1, 2]));
        let v = g.item(pixel_cross_entropy(&g, flat, &m).unwrap()).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let wrong = g.constant(Tensor::from_f64(&[2, 1, 2], &[10.0, 0.0, 0.0, 10.0]).unwrap());
        let v = g.item(pixel_cross_entropy(&g, wrong, &m).unwrap()).unwrap();
        assert!((v - 10.0).abs() < 1e-3, "{v}");
        let wrong20 = g.constant(Tensor::from_f64(&[2, 1, 2], &[20.0, 0.0, 0.0, 20.0]).unwrap());
        let v = g
            .item(pixel_cross_entropy(&g, wrong20, &m).unwrap())
            .unwrap();
        assert!((v - 20.0).abs() < 1e-6, "{v}");
        let three = g.constant(Tensor::zeros(&[3, 1, 2]));
        assert!(pixel_cross_entropy(&g, three, &m).is_err());
    }

    #[test]
    fn multitask_examples() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(0.5));
        let f = g.constant(Tensor::scalar(0.1));
        assert!((g.item(multitask_loss(&g, c, f, 3.0).unwrap()).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(g.item(multitask_loss(&g, c, f, 0.0).unwrap()).unwrap(), 0.5);
        let z = g.constant(Tensor::scalar(0.0));
        assert_eq!(g.item(multitask_loss(&g, c, z, 3.0).unwrap()).unwrap(), 0.5);
    }

    #[test]
    fn mask_validation_and_resizing() {
        assert!(ChangeMask::new(1, 2, vec![0, 2]).is_err());
        assert!(ChangeMask::new(2, 2, vec![0, 1]).is_err());
        let checker: Vec<u8> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as u8).collect();
        let m = ChangeMask::new(4, 4, checker).unwrap();
        let half = m.resize_nearest(2, 2).unwrap();
        assert!(half.labels().iter().all(|&v| v <= 1));
        assert_eq!(m.resize_nearest(4, 4).unwrap(), m);
    }

    #[test]
    fn balanced_weights_average_to_one() {
        let m = ChangeMask::new(1, 4, vec![0, 1, 1, 1]).unwrap();
        let w = pixel_weights::<f64>(&m, true).unwrap();
        assert!((w.iter().sum::<f64>() - 4.0).abs() < 1e-12);
        assert!((w[0] - 2.0).abs() < 1e-12);
        assert!(pixel_weights::<f64>(&m, false).is_none());
    }
}
