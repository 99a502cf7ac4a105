//! Image pairs with change masks: synthetic generation, viewpoint warps,
//! resizing, splitting and on-disk datasets.

mod io;
mod synth;
mod warp;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::losses::ChangeMask;
use crate::numerics::{Scalar, Tensor};

pub use io::{load_dataset, load_image, save_change_map, save_dataset, save_mask, MANIFEST_FILE};
pub use synth::{
    compose_scene_pair, generate_synthetic, item_seed, semantic_change_mask, Background, Scene,
    Shape, ShapeKind, SynthConfig,
};
pub use warp::warp_viewpoint;

/// Two co-registered (or deliberately misregistered) `3×H×W` images in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair<T> {
    pub t0: Tensor<T>,
    pub t1: Tensor<T>,
    pub identifier: String,
}

impl<T: Scalar> ImagePair<T> {
    pub fn new(t0: Tensor<T>, t1: Tensor<T>, identifier: impl Into<String>) -> Result<Self> {
        if t0.shape() != t1.shape() {
            return Err(invalid!(
                "image pair shapes differ: {:?} vs {:?}",
                t0.shape(),
                t1.shape()
            ));
        }
        let (c, _, _) = t0.dims3()?;
        if c != 3 {
            return Err(invalid!("images must have 3 channels, got {c}"));
        }
        for t in [&t0, &t1] {
            if t.data()
                .iter()
                .any(|v| !(*v >= T::zero() && *v <= T::one()))
            {
                return Err(invalid!("image values must lie in [0, 1]"));
            }
        }
        Ok(Self {
            t0,
            t1,
            identifier: identifier.into(),
        })
    }

    /// `(H, W)`.
    pub fn resolution(&self) -> (usize, usize) {
        (self.t0.shape()[1], self.t0.shape()[2])
    }
}

/// A recorded semantic edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "edit", rename_all = "snake_case")]
pub enum SemanticEdit {
    Add { shape: Shape },
    Remove { shape: Shape },
    Move { from: Shape, to: Shape },
}

/// Everything applied to `t1` on top of the shared scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub edits: Vec<SemanticEdit>,
    pub brightness: f64,
    pub noise_sigma: f64,
    pub shadow_polygon: Vec<(f64, f64)>,
    pub shadow_opacity: f64,
    pub rotation_deg: f64,
    pub zoom: f64,
    pub translation: (f64, f64),
    pub noise_seed: u64,
}

impl Default for Provenance {
    /// No edits and no perturbation.
    fn default() -> Self {
        Self {
            edits: Vec::new(),
            brightness: 0.0,
            noise_sigma: 0.0,
            shadow_polygon: Vec::new(),
            shadow_opacity: 0.0,
            rotation_deg: 0.0,
            zoom: 1.0,
            translation: (0.0, 0.0),
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair<T> {
    pub pair: ImagePair<T>,
    pub mask: ChangeMask,
    /// Absent for pairs loaded from disk.
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub items: Vec<ScenePair<T>>,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    /// Every item in the training split.
    pub fn new(items: Vec<ScenePair<T>>) -> Self {
        let split = Split {
            train: (0..items.len()).collect(),
            test: Vec::new(),
        };
        Self { items, split }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn train(&self) -> impl Iterator<Item = &ScenePair<T>> + '_ {
        self.split.train.iter().map(move |&i| &self.items[i])
    }

    pub fn test(&self) -> impl Iterator<Item = &ScenePair<T>> + '_ {
        self.split.test.iter().map(move |&i| &self.items[i])
    }

    /// Items in `idx`, in order, as a dataset of their own.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let items = idx
            .iter()
            .map(|&i| {
                self.items.get(i).cloned().ok_or_else(|| {
                    invalid!("index {i} out of range for {} items", self.items.len())
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(items))
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            items: self
                .items
                .iter()
                .map(|s| ScenePair {
                    pair: ImagePair {
                        t0: s.pair.t0.cast(),
                        t1: s.pair.t1.cast(),
                        identifier: s.pair.identifier.clone(),
                    },
                    mask: s.mask.clone(),
                    provenance: s.provenance.clone(),
                })
                .collect(),
            split: self.split.clone(),
        }
    }
}

/// Seeded shuffle, then the first `floor(fraction·n)` items train.
pub fn split_dataset<T: Scalar>(
    mut ds: Dataset<T>,
    train_fraction: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(invalid!(
            "train fraction must lie strictly between 0 and 1, got {train_fraction}"
        ));
    }
    let n = ds.items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * n as f64).floor() as usize;
    let test = order.split_off(n_train);
    ds.split = Split { train: order, test };
    Ok(ds)
}

fn check_target(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(8) || !w.is_multiple_of(8) {
        return Err(invalid!(
            "target size {h}×{w} must be a positive multiple of 8"
        ));
    }
    Ok(())
}

struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-centre taps for resampling `n_src` samples to `n_dst`.
fn resize_taps(n_src: usize, n_dst: usize) -> Vec<Tap> {
    let scale = n_src as f64 / n_dst as f64;
    (0..n_dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_src - 1) as f64);
            let lo = s.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(n_src - 1),
                frac: s - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of a `C×H×W` image.
pub fn resize_bilinear<T: Scalar>(img: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (c, sh, sw) = img.dims3()?;
    if h == 0 || w == 0 {
        return Err(invalid!("resize target must be positive"));
    }
    let rows = resize_taps(sh, h);
    let cols = resize_taps(sw, w);
    let src = img.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = &src[ch * sh * sw..(ch + 1) * sh * sw];
        for r in &rows {
            let fy = T::from_f64_lossy(r.frac);
            for q in &cols {
                let fx = T::from_f64_lossy(q.frac);
                let top = lerp(plane[r.lo * sw + q.lo], plane[r.lo * sw + q.hi], fx);
                let bot = lerp(plane[r.hi * sw + q.lo], plane[r.hi * sw + q.hi], fx);
                out.push(lerp(top, bot, fy));
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

#[inline]
pub(crate) fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    a + (b - a) * t
}

/// Resizes both images bilinearly and the mask by nearest neighbour.
pub fn preprocess<T: Scalar>(
    pair: &ImagePair<T>,
    mask: &ChangeMask,
    h: usize,
    w: usize,
) -> Result<(ImagePair<T>, ChangeMask)> {
    check_target(h, w)?;
    if mask.resolution() != pair.resolution() {
        return Err(invalid!(
            "mask {:?} does not match images {:?}",
            mask.resolution(),
            pair.resolution()
        ));
    }
    let clamp01 = |t: Tensor<T>| t.map(|v| v.max(T::zero()).min(T::one()));
    let out = ImagePair {
        t0: clamp01(resize_bilinear(&pair.t0, h, w)?),
        t1: clamp01(resize_bilinear(&pair.t1, h, w)?),
        identifier: pair.identifier.clone(),
    };
    Ok((out, mask.resize_nearest(h, w)?))
}
