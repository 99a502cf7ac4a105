//! The full change detector: shared encoder, per-level distance heads and an
//! optional per-level two-class classifier over concatenated pair features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{item_seed, ImagePair};
use crate::encoder::{init_encoder, Encoder, EncoderConfig, FeaturePyramid, LEVELS};
use crate::error::{invalid, Result};
use crate::metric::{
    change_map_from_cos, change_map_from_l2, cosine_similarity_map, l2_distance_map,
    upsample_change_map, ChangeMap, DistanceKind, MapSource,
};
use crate::numerics::{ops, Graph, ParamGroup, Parameter, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct CosimNet<T> {
    pub encoder: Encoder<T>,
    /// Scale and shift of each level's cosine head, as `[1]` tensors.
    pub cos_heads: Vec<Parameter<T>>,
    /// Per level, when present: hidden weight `[C, 2C, 1, 1]` and bias `[C]`,
    /// then output weight `[2, C, 1, 1]` and bias `[2]`.
    pub classifier: Option<Vec<Parameter<T>>>,
    /// Distance the metric branch reports change with.
    pub distance: DistanceKind,
}

/// Parameter nodes of one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    pub encoder: Vec<Var>,
    pub cos_heads: Vec<Var>,
    pub classifier: Vec<Var>,
}

impl Bound {
    /// `(w, b)` per level.
    pub fn cos_pairs(&self) -> Vec<(Var, Var)> {
        self.cos_heads
            .chunks_exact(2)
            .map(|c| (c[0], c[1]))
            .collect()
    }
}

/// Taped features of both branches, finest level first.
#[derive(Debug, Clone, Copy)]
pub struct PairFeatures {
    pub f0: [Var; LEVELS],
    pub f1: [Var; LEVELS],
}

/// Hidden weight and bias, output weight and bias.
const CLASSIFIER_PARAMS: usize = 4;

fn scalar_param<T: Scalar>(name: String, v: f64) -> Parameter<T> {
    Parameter::new(
        name,
        Tensor::from_vec(&[1], vec![T::from_f64_lossy(v)]).expect("one element"),
        ParamGroup::Head,
    )
}

impl<T: Scalar> CosimNet<T> {
    pub fn new(
        config: EncoderConfig,
        distance: DistanceKind,
        with_classifier: bool,
    ) -> Result<Self> {
        let encoder = init_encoder::<T>(config)?;
        let mut cos_heads = Vec::with_capacity(2 * LEVELS);
        for l in 1..=LEVELS {
            cos_heads.push(scalar_param(format!("cos{l}.scale"), 1.0));
            cos_heads.push(scalar_param(format!("cos{l}.shift"), -1.0));
        }
        let classifier = with_classifier.then(|| init_classifier(&encoder));
        Ok(Self {
            encoder,
            cos_heads,
            classifier,
            distance,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn has_classifier(&self) -> bool {
        self.classifier.is_some()
    }

    /// Every parameter, encoder first.
    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out: Vec<&Parameter<T>> = self.encoder.params().iter().collect();
        out.extend(&self.cos_heads);
        if let Some(c) = &self.classifier {
            out.extend(c);
        }
        out
    }

    pub fn bind(&self, g: &Graph<T>) -> Bound {
        Bound {
            encoder: self.encoder.bind(g),
            cos_heads: self.cos_heads.iter().map(|p| g.param(p)).collect(),
            classifier: self
                .classifier
                .as_ref()
                .map_or_else(Vec::new, |c| c.iter().map(|p| g.param(p)).collect()),
        }
    }

    pub fn forward(
        &self,
        g: &Graph<T>,
        bound: &Bound,
        pair: &ImagePair<T>,
    ) -> Result<PairFeatures> {
        let x0 = g.constant(pair.t0.clone());
        let x1 = g.constant(pair.t1.clone());
        Ok(PairFeatures {
            f0: self.encoder.encode_graph(g, &bound.encoder, x0)?,
            f1: self.encoder.encode_graph(g, &bound.encoder, x1)?,
        })
    }

    /// Two-class logits at `h×w`: each level's 1×1 classifier output,
    /// upsampled and averaged.
    pub fn class_logits(
        &self,
        g: &Graph<T>,
        bound: &Bound,
        feats: &PairFeatures,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        if bound.classifier.len() != CLASSIFIER_PARAMS * LEVELS {
            return Err(invalid!("model has no classification head"));
        }
        let weight = T::one() / T::from_usize_lossy(LEVELS);
        let mut terms = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let p = &bound.classifier[CLASSIFIER_PARAMS * l..CLASSIFIER_PARAMS * (l + 1)];
            let cat = g.concat_channels(feats.f0[l], feats.f1[l])?;
            let hidden = g.relu(g.conv2d(cat, p[0], p[1], 1, 0)?);
            let logits = g.conv2d(hidden, p[2], p[3], 1, 0)?;
            terms.push((g.bilinear_upsample(logits, h, w)?, weight));
        }
        g.weighted_sum(&terms)
    }

    pub fn encode_pair(
        &self,
        pair: &ImagePair<T>,
    ) -> Result<(FeaturePyramid<T>, FeaturePyramid<T>)> {
        self.encoder.encode_pair(pair)
    }

    pub fn cos_head(&self, level: usize) -> (T, T) {
        (
            self.cos_heads[2 * level].value.data()[0],
            self.cos_heads[2 * level + 1].value.data()[0],
        )
    }

    /// Change map of each level at its native resolution, using the
    /// model's distance.
    pub fn level_change_maps(
        &self,
        f0: &FeaturePyramid<T>,
        f1: &FeaturePyramid<T>,
    ) -> Result<Vec<ChangeMap<T>>> {
        (0..LEVELS)
            .map(|l| {
                let mut m = match self.distance {
                    DistanceKind::Euclidean => {
                        change_map_from_l2(&l2_distance_map(&f0.levels[l], &f1.levels[l])?)?
                    }
                    DistanceKind::Cosine => {
                        let (w, b) = self.cos_head(l);
                        change_map_from_cos(
                            &cosine_similarity_map(&f0.levels[l], &f1.levels[l])?,
                            w,
                            b,
                        )?
                    }
                };
                m.source = MapSource::Level(l);
                Ok(m)
            })
            .collect()
    }

    /// Per-level and fused probabilities of the "changed" class at `h×w`.
    pub fn class_probability_maps(
        &self,
        f0: &FeaturePyramid<T>,
        f1: &FeaturePyramid<T>,
        h: usize,
        w: usize,
    ) -> Result<(Vec<ChangeMap<T>>, ChangeMap<T>)> {
        let params = self
            .classifier
            .as_ref()
            .ok_or_else(|| invalid!("model has no classification head"))?;
        let weight = T::one() / T::from_usize_lossy(LEVELS);
        let mut acc = Tensor::<T>::zeros(&[2, h, w]);
        let mut levels = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let (a, b) = (&f0.levels[l], &f1.levels[l]);
            let (c, lh, lw) = a.dims3()?;
            let mut cat = a.data().to_vec();
            cat.extend_from_slice(b.data());
            let cat = Tensor::from_vec(&[2 * c, lh, lw], cat)?;
            let p = &params[CLASSIFIER_PARAMS * l..CLASSIFIER_PARAMS * (l + 1)];
            let hidden = ops::relu(&ops::conv2d(&cat, &p[0].value, &p[1].value, 1, 0)?);
            let logits = ops::conv2d(&hidden, &p[2].value, &p[3].value, 1, 0)?;
            let up = ops::bilinear_upsample(&logits, h, w)?;
            for (s, &v) in acc.data_mut().iter_mut().zip(up.data()) {
                *s += weight * v;
            }
            levels.push(ChangeMap::new(
                changed_probability(&up, h, w)?,
                MapSource::Level(l),
            )?);
        }
        let fused = ChangeMap::new(changed_probability(&acc, h, w)?, MapSource::Fused)?;
        Ok((levels, fused))
    }

    /// Level maps upsampled to `h×w`; fusion is left to the caller.
    pub fn upsampled_level_maps(
        &self,
        pair: &ImagePair<T>,
        h: usize,
        w: usize,
    ) -> Result<Vec<ChangeMap<T>>> {
        let (f0, f1) = self.encode_pair(pair)?;
        self.level_change_maps(&f0, &f1)?
            .iter()
            .map(|m| upsample_change_map(m, h, w))
            .collect()
    }
}

/// Softmax probability of class 1 from `2×h×w` logits.
fn changed_probability<T: Scalar>(logits: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let d = logits.data();
    let n = h * w;
    let p = (0..n)
        .map(|i| {
            let p = T::one() / (T::one() + (d[i] - d[n + i]).exp());
            p.max(T::zero()).min(T::one())
        })
        .collect();
    Tensor::from_vec(&[h, w], p)
}

fn init_classifier<T: Scalar>(encoder: &Encoder<T>) -> Vec<Parameter<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(encoder.config().seed, usize::MAX));
    let mut out = Vec::with_capacity(CLASSIFIER_PARAMS * LEVELS);
    for (l, &c) in encoder.level_channels().iter().enumerate() {
        for (part, cout, cin) in [("hidden", c, 2 * c), ("out", 2, c)] {
            let bound = (3.0 / cin as f64).sqrt();
            let w = (0..cout * cin)
                .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                .collect();
            out.push(Parameter::new(
                format!("cls{}.{part}.weight", l + 1),
                Tensor::from_vec(&[cout, cin, 1, 1], w).expect("sized above"),
                ParamGroup::Head,
            ));
            out.push(Parameter::new(
                format!("cls{}.{part}.bias", l + 1),
                Tensor::zeros(&[cout]),
                ParamGroup::Head,
            ));
        }
    }
    out
}
