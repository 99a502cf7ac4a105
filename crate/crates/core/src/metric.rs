//! The fixed distance layer between paired features and its conversion to
//! change maps.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{kernels, ops, Graph, Scalar, Tensor, Var, NORMALIZE_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Euclidean,
    Cosine,
}

impl DistanceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceKind::Euclidean => "l2",
            DistanceKind::Cosine => "cos",
        }
    }
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" | "euclidean" => Ok(DistanceKind::Euclidean),
            "cos" | "cosine" => Ok(DistanceKind::Cosine),
            other => Err(invalid!("unknown distance `{other}` (expected l2 or cos)")),
        }
    }
}

/// Per-location distance (euclidean) or similarity (cosine), shape `h×w`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap<T> {
    pub values: Tensor<T>,
    pub kind: DistanceKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSource {
    Level(usize),
    Fused,
    Unspecified,
}

/// Change confidence in `[0, 1]`, shape `H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeMap<T> {
    values: Tensor<T>,
    pub source: MapSource,
}

impl<T: Scalar> ChangeMap<T> {
    pub fn new(values: Tensor<T>, source: MapSource) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(invalid!(
                "change map must be H×W, got shape {:?}",
                values.shape()
            ));
        }
        if let Some(v) = values
            .data()
            .iter()
            .find(|v| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::InvariantViolation(format!(
                "change map value {v} outside [0, 1]"
            )));
        }
        Ok(Self { values, source })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn data(&self) -> &[T] {
        self.values.data()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    /// 8-bit encoding, `round(255·v)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data()
            .iter()
            .map(|v| (v.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

fn check_pair<T: Scalar>(f0: &Tensor<T>, f1: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if f0.shape() != f1.shape() {
        return Err(invalid!(
            "feature maps differ in shape: {:?} vs {:?}",
            f0.shape(),
            f1.shape()
        ));
    }
    f0.dims3()
}

pub fn l2_distance_map<T: Scalar>(f0: &Tensor<T>, f1: &Tensor<T>) -> Result<DistanceMap<T>> {
    let dims = check_pair(f0, f1)?;
    let d = kernels::l2_distance_forward(f0.data(), f1.data(), dims);
    Ok(DistanceMap {
        values: Tensor::from_vec(&[dims.1, dims.2], d)?,
        kind: DistanceKind::Euclidean,
    })
}

pub fn cosine_similarity_map<T: Scalar>(f0: &Tensor<T>, f1: &Tensor<T>) -> Result<DistanceMap<T>> {
    let dims = check_pair(f0, f1)?;
    let parts =
        kernels::cosine_forward(f0.data(), f1.data(), dims, T::from_f64_lossy(NORMALIZE_EPS));
    Ok(DistanceMap {
        values: Tensor::from_vec(&[dims.1, dims.2], parts.sim)?,
        kind: DistanceKind::Cosine,
    })
}

/// Halves a euclidean distance between unit vectors (sphere diameter 2).
pub fn change_map_from_l2<T: Scalar>(d: &DistanceMap<T>) -> Result<ChangeMap<T>> {
    if d.kind != DistanceKind::Euclidean {
        return Err(invalid!(
            "change_map_from_l2 needs a euclidean distance map"
        ));
    }
    let limit = T::from_f64_lossy(2.0 + 1e-6);
    if let Some(v) = d
        .values
        .data()
        .iter()
        .find(|&&v| v > limit || v < T::zero())
    {
        return Err(Error::InvariantViolation(format!(
            "distance {v} exceeds the unit-sphere diameter; were the features normalized?"
        )));
    }
    let half = T::from_f64_lossy(0.5);
    let values = d.values.map(|v| (v * half).min(T::one()));
    ChangeMap::new(values, MapSource::Unspecified)
}

/// `1 − exp(−|w·s + b|)`: complement of the predicted unchanged confidence.
pub fn change_map_from_cos<T: Scalar>(s: &DistanceMap<T>, w: T, b: T) -> Result<ChangeMap<T>> {
    if s.kind != DistanceKind::Cosine {
        return Err(invalid!(
            "change_map_from_cos needs a cosine similarity map"
        ));
    }
    let values = s.values.map(|v| T::one() - (-(w * v + b).abs()).exp());
    ChangeMap::new(values, MapSource::Unspecified)
}

pub fn upsample_change_map<T: Scalar>(
    cm: &ChangeMap<T>,
    h: usize,
    w: usize,
) -> Result<ChangeMap<T>> {
    let (sh, sw) = cm.resolution();
    let x = cm.values.reshape(&[1, sh, sw])?;
    let up = ops::bilinear_upsample(&x, h, w)?.reshape(&[h, w])?;
    ChangeMap::new(up, cm.source)
}

/// Elementwise mean of equally sized maps.
pub fn fuse_predictions<T: Scalar>(maps: &[ChangeMap<T>]) -> Result<ChangeMap<T>> {
    let Some(first) = maps.first() else {
        return Err(invalid!("fuse_predictions needs at least one map"));
    };
    let res = first.resolution();
    let mut acc = vec![T::zero(); first.values.len()];
    for m in maps {
        if m.resolution() != res {
            return Err(invalid!(
                "cannot fuse maps of resolution {:?} and {:?}",
                res,
                m.resolution()
            ));
        }
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let n = T::from_usize_lossy(maps.len());
    let values = acc.into_iter().map(|v| (v / n).min(T::one())).collect();
    ChangeMap::new(Tensor::from_vec(&[res.0, res.1], values)?, MapSource::Fused)
}

/// Taped change confidence of the cosine branch, for learnable scalars
/// `w` and `b`.
pub fn cos_change_graph<T: Scalar>(g: &Graph<T>, sim: Var, w: Var, b: Var) -> Result<Var> {
    let z = g.shift_by(g.scale_by(sim, w)?, b)?;
    let unchanged = g.exp(g.affine(g.abs(z), -T::one(), T::zero()));
    Ok(g.affine(unchanged, -T::one(), T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(a: &[f64], b: &[f64]) -> (Tensor<f64>, Tensor<f64>) {
        let c = a.len();
        (
            Tensor::from_f64(&[c, 1, 1], a).unwrap(),
            Tensor::from_f64(&[c, 1, 1], b).unwrap(),
        )
    }

    #[test]
    fn l2_examples() {
        let (a, _) = pair(&[0.6, 0.8], &[0.0, 0.0]);
        assert_eq!(l2_distance_map(&a, &a).unwrap().values.data(), &[0.0]);
        let (a, b) = pair(&[1.0, 0.0], &[0.0, 1.0]);
        let d = l2_distance_map(&a, &b).unwrap().values.data()[0];
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        let (a, b) = pair(&[1.0, 0.0], &[-1.0, 0.0]);
        assert_eq!(l2_distance_map(&a, &b).unwrap().values.data(), &[2.0]);
        let bad = Tensor::<f64>::zeros(&[3, 1, 1]);
        assert!(l2_distance_map(&a, &bad).is_err());
    }

    #[test]
    fn cosine_examples() {
        let (a, b) = pair(&[0.6, 0.8], &[0.8, 0.6]);
        assert!((cosine_similarity_map(&a, &b).unwrap().values.data()[0] - 0.96).abs() < 1e-15);
        assert!((cosine_similarity_map(&a, &a).unwrap().values.data()[0] - 1.0).abs() < 1e-15);
        let (a, b) = pair(&[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(cosine_similarity_map(&a, &b).unwrap().values.data(), &[0.0]);
    }

    fn dist(values: &[f64], kind: DistanceKind) -> DistanceMap<f64> {
        DistanceMap {
            values: Tensor::from_f64(&[1, values.len()], values).unwrap(),
            kind,
        }
    }

    #[test]
    fn l2_change_map_halves() {
        let cm = change_map_from_l2(&dist(&[0.0, 2.0, 1.5], DistanceKind::Euclidean)).unwrap();
        assert_eq!(&cm.data()[..2], &[0.0, 1.0]);
        assert!((cm.data()[2] - 0.75).abs() < 1e-12);
        assert!(matches!(
            change_map_from_l2(&dist(&[2.1], DistanceKind::Euclidean)),
            Err(Error::InvariantViolation(_))
        ));
    }

    #[test]
    fn cos_change_map_examples() {
        let s = dist(&[1.0], DistanceKind::Cosine);
        assert_eq!(change_map_from_cos(&s, 1.0, -1.0).unwrap().data(), &[0.0]);
        let v = change_map_from_cos(&s, 1.0, 0.0).unwrap().data()[0];
        assert!((v - (1.0 - (-1f64).exp())).abs() < 1e-15);
        assert!((v - 0.63212).abs() < 1e-5);
        let wide = dist(&[-1.0, 0.3, 1.0], DistanceKind::Cosine);
        for v in change_map_from_cos(&wide, 250.0, 17.0).unwrap().data() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn upsample_and_fuse() {
        let row = ChangeMap::<f64>::new(
            Tensor::from_f64(&[1, 2], &[0.0, 1.0]).unwrap(),
            MapSource::Level(0),
        )
        .unwrap();
        assert_eq!(
            upsample_change_map(&row, 1, 3).unwrap().data(),
            &[0.0, 0.5, 1.0]
        );
        assert!(upsample_change_map(&row, 1, 1).is_err());

        let c = |v: f64| ChangeMap::new(Tensor::full(&[2, 2], v), MapSource::Unspecified).unwrap();
        let fused = fuse_predictions(&[c(0.2), c(0.6)]).unwrap();
        assert!(fused.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        assert_eq!(fuse_predictions(&[c(0.3)]).unwrap().data(), c(0.3).data());
        assert!(fuse_predictions::<f64>(&[]).is_err());
        let odd = ChangeMap::new(Tensor::full(&[2, 3], 0.1), MapSource::Unspecified).unwrap();
        assert!(fuse_predictions(&[c(0.2), odd]).is_err());
    }

    #[test]
    fn u8_encoding_rounds() {
        let cm = ChangeMap::<f64>::new(
            Tensor::from_f64(&[1, 3], &[0.0, 0.5, 1.0]).unwrap(),
            MapSource::Fused,
        )
        .unwrap();
        assert_eq!(cm.to_u8(), vec![0, 128, 255]);
    }
}
