//! Siamese feature extractor: one weight set, three normalized side outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ImagePair;
use crate::error::{invalid, Result};
use crate::numerics::{ops, Graph, ParamGroup, Parameter, Scalar, Tensor, Var, NORMALIZE_EPS};

pub const LEVELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; LEVELS],
    /// Odd, so `k/2` padding preserves spatial size ahead of pooling.
    pub kernel_size: usize,
    /// Pooling window and stride of every stage.
    pub pool_stride: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: [16, 32, 64],
            kernel_size: 3,
            pool_stride: 2,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(invalid!("encoder input channels must be positive"));
        }
        if let Some(i) = self.stage_channels.iter().position(|&c| c == 0) {
            return Err(invalid!("encoder stage {} has zero channels", i + 1));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(invalid!(
                "encoder kernel size must be odd, got {}",
                self.kernel_size
            ));
        }
        if self.pool_stride == 0 {
            return Err(invalid!("encoder pool stride must be positive"));
        }
        Ok(())
    }

    /// Input extents must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        self.pool_stride.pow(LEVELS as u32)
    }

    pub fn parameter_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        let mut cin = self.in_channels;
        let mut total = 0;
        for &c in &self.stage_channels {
            total += cin * c * k2 + c;
            cin = c;
        }
        total
    }
}

/// Three unit-normalized feature maps, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    config: EncoderConfig,
    params: Vec<Parameter<T>>,
}

/// Seeds a fresh encoder; weights are uniform in `±sqrt(3/fan_in)`, biases zero.
pub fn init_encoder<T: Scalar>(config: EncoderConfig) -> Result<Encoder<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.kernel_size;
    let mut params = Vec::with_capacity(2 * LEVELS);
    let mut cin = config.in_channels;
    for (i, &cout) in config.stage_channels.iter().enumerate() {
        let fan_in = cin * k * k;
        let bound = (3.0 / fan_in as f64).sqrt();
        let w: Vec<T> = (0..cout * fan_in)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect();
        let group = if i == 0 {
            ParamGroup::Backbone
        } else {
            ParamGroup::Head
        };
        params.push(Parameter::new(
            format!("stage{}.weight", i + 1),
            Tensor::from_vec(&[cout, cin, k, k], w)?,
            group,
        ));
        params.push(Parameter::new(
            format!("stage{}.bias", i + 1),
            Tensor::zeros(&[cout]),
            group,
        ));
        cin = cout;
    }
    Ok(Encoder { config, params })
}

impl<T: Scalar> Encoder<T> {
    /// Rebuilds an encoder from stored parameters, checking their shapes.
    pub fn from_parts(config: EncoderConfig, params: Vec<Parameter<T>>) -> Result<Self> {
        let fresh = init_encoder::<T>(config.clone())?;
        if params.len() != fresh.params.len() {
            return Err(invalid!(
                "encoder expects {} parameters, got {}",
                fresh.params.len(),
                params.len()
            ));
        }
        for (p, q) in params.iter().zip(&fresh.params) {
            if p.name != q.name || p.value.shape() != q.value.shape() {
                return Err(invalid!(
                    "encoder parameter `{}` {:?} does not match expected `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    q.name,
                    q.value.shape()
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn level_channels(&self) -> [usize; LEVELS] {
        self.config.stage_channels
    }

    fn check_image(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let [c, h, w] = shape[..] else {
            return Err(invalid!("encoder input must be C×H×W, got {shape:?}"));
        };
        if c != self.config.in_channels {
            return Err(invalid!(
                "encoder expects {} input channels, got {c}",
                self.config.in_channels
            ));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(invalid!(
                "image size {h}×{w} is not a multiple of {m}; resize the input first"
            ));
        }
        Ok((h, w))
    }

    /// Untaped forward pass.
    pub fn encode(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        self.check_image(image.shape())?;
        let (pad, s) = (self.config.kernel_size / 2, self.config.pool_stride);
        let eps = T::from_f64_lossy(NORMALIZE_EPS);
        let mut x = image.clone();
        let mut levels = Vec::with_capacity(LEVELS);
        for stage in self.params.chunks_exact(2) {
            let a = ops::conv2d(&x, &stage[0].value, &stage[1].value, 1, pad)?;
            x = ops::maxpool2d(&ops::relu(&a), s, s)?;
            levels.push(ops::l2_normalize_channels(&x, eps)?);
        }
        Ok(FeaturePyramid {
            levels,
            normalized: true,
        })
    }

    pub fn encode_pair(
        &self,
        pair: &ImagePair<T>,
    ) -> Result<(FeaturePyramid<T>, FeaturePyramid<T>)> {
        if pair.t0.shape() != pair.t1.shape() {
            return Err(invalid!(
                "image pair shapes differ: {:?} vs {:?}",
                pair.t0.shape(),
                pair.t1.shape()
            ));
        }
        Ok((self.encode(&pair.t0)?, self.encode(&pair.t1)?))
    }

    /// Registers every parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p)).collect()
    }

    /// Taped forward pass using parameter nodes from [`Encoder::bind`].
    pub fn encode_graph(&self, g: &Graph<T>, bound: &[Var], image: Var) -> Result<[Var; LEVELS]> {
        self.check_image(&g.shape(image))?;
        if bound.len() != self.params.len() {
            return Err(invalid!(
                "{} bound parameters for an encoder with {}",
                bound.len(),
                self.params.len()
            ));
        }
        let (pad, s) = (self.config.kernel_size / 2, self.config.pool_stride);
        let eps = T::from_f64_lossy(NORMALIZE_EPS);
        let mut x = image;
        let mut levels = [image; LEVELS];
        for (l, stage) in bound.chunks_exact(2).enumerate() {
            let a = g.conv2d(x, stage[0], stage[1], 1, pad)?;
            x = g.maxpool2d(g.relu(a), s, s)?;
            levels[l] = g.l2_normalize_channels(x, eps)?;
        }
        Ok(levels)
    }
}
