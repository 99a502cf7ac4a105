//! Model checkpoints: a text header naming every parameter array with its
//! shape and byte offset, then the little-endian payload.
//!
//! ```text
//! COSIM1
//! meta dtype=f64
//! meta distance=l2
//! ...
//! param name=conv1.weight group=backbone shape=16x3x3x3 offset=0 len=432
//! ...
//! END
//! <payload>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::encoder::{Encoder, EncoderConfig, LEVELS};
use crate::error::{Error, Result};
use crate::metric::DistanceKind;
use crate::numerics::{ParamGroup, Parameter, Scalar, Tensor};

use super::model::CosimNet;

pub const MAGIC: &str = "COSIM1";

/// A model plus the per-level thresholds chosen for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: CosimNet<T>,
    pub thresholds: [f64; LEVELS],
}

fn format_err(message: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        message: message.into(),
    }
}

fn join<D: ToString>(xs: &[D]) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: CosimNet<T>, thresholds: [f64; LEVELS]) -> Self {
        Self { model, thresholds }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.model.config();
        let mut header = format!("{MAGIC}\n");
        let mut meta = |k: &str, v: String| header.push_str(&format!("meta {k}={v}\n"));
        meta("dtype", T::NAME.to_owned());
        meta("in_channels", cfg.in_channels.to_string());
        meta("stage_channels", join(&cfg.stage_channels));
        meta("kernel_size", cfg.kernel_size.to_string());
        meta("pool_stride", cfg.pool_stride.to_string());
        meta("seed", cfg.seed.to_string());
        meta("distance", self.model.distance.as_str().to_owned());
        meta("classifier", self.model.has_classifier().to_string());
        meta(
            "thresholds",
            self.thresholds.map(|t| t.to_string()).join(","),
        );

        let width = std::mem::size_of::<T>();
        let mut payload = Vec::new();
        for p in self.model.parameters() {
            header.push_str(&format!(
                "param name={} group={} shape={} offset={} len={}\n",
                p.name,
                p.group,
                join(p.value.shape()),
                payload.len(),
                p.value.len()
            ));
            for &v in p.value.data() {
                if width == 4 {
                    payload.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
                } else {
                    payload.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
                }
            }
        }
        header.push_str("END\n");
        let mut out = header.into_bytes();
        out.extend(payload);
        out
    }

    /// Parses a checkpoint of either precision into `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end = bytes
            .windows(5)
            .position(|w| w == b"\nEND\n")
            .ok_or_else(|| format_err("header terminator not found"))?;
        let header =
            std::str::from_utf8(&bytes[..end]).map_err(|_| format_err("header is not UTF-8"))?;
        let payload = &bytes[end + 5..];
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(format_err(format!("missing `{MAGIC}` magic")));
        }
        let mut meta = BTreeMap::new();
        let mut params = Vec::new();
        for line in lines {
            let (kind, rest) = line
                .split_once(' ')
                .ok_or_else(|| format_err(format!("bad line `{line}`")))?;
            let fields: BTreeMap<&str, &str> = rest
                .split(' ')
                .filter_map(|kv| kv.split_once('='))
                .collect();
            match kind {
                "meta" => meta.extend(
                    fields
                        .into_iter()
                        .map(|(k, v)| (k.to_owned(), v.to_owned())),
                ),
                "param" => params.push(fields),
                _ => return Err(format_err(format!("unknown record `{kind}`"))),
            }
        }
        let get = |k: &str| {
            meta.get(k)
                .map(String::as_str)
                .ok_or_else(|| format_err(format!("missing meta `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| format_err(format!("bad meta `{k}`")))
        };

        let width = match get("dtype")? {
            "f32" => 4,
            "f64" => 8,
            d => return Err(format_err(format!("unsupported dtype `{d}`"))),
        };
        let stage: Vec<usize> = get("stage_channels")?
            .split('x')
            .map(|s| s.parse().map_err(|_| format_err("bad stage_channels")))
            .collect::<Result<_>>()?;
        let stage_channels: [usize; LEVELS] = stage
            .try_into()
            .map_err(|_| format_err(format!("expected {LEVELS} stage widths")))?;
        let config = EncoderConfig {
            in_channels: num("in_channels")? as usize,
            stage_channels,
            kernel_size: num("kernel_size")? as usize,
            pool_stride: num("pool_stride")? as usize,
            seed: num("seed")?,
        };
        let distance: DistanceKind = get("distance")?.parse()?;
        let with_classifier = match get("classifier")? {
            "true" => true,
            "false" => false,
            _ => return Err(format_err("bad meta `classifier`")),
        };
        let ts: Vec<f64> = get("thresholds")?
            .split(',')
            .map(|s| s.parse().map_err(|_| format_err("bad thresholds")))
            .collect::<Result<_>>()?;
        let thresholds: [f64; LEVELS] = ts.try_into().map_err(|_| format_err("bad thresholds"))?;

        let mut loaded = Vec::with_capacity(params.len());
        for f in &params {
            let field = |k: &str| {
                f.get(k)
                    .copied()
                    .ok_or_else(|| format_err(format!("param missing `{k}`")))
            };
            let usize_field = |k: &str| -> Result<usize> {
                field(k)?
                    .parse()
                    .map_err(|_| format_err(format!("bad param `{k}`")))
            };
            let name = field("name")?;
            let group = match field("group")? {
                "backbone" => ParamGroup::Backbone,
                "head" => ParamGroup::Head,
                g => return Err(format_err(format!("unknown group `{g}`"))),
            };
            let shape: Vec<usize> = field("shape")?
                .split('x')
                .map(|s| {
                    s.parse()
                        .map_err(|_| format_err(format!("bad shape of `{name}`")))
                })
                .collect::<Result<_>>()?;
            let (offset, len) = (usize_field("offset")?, usize_field("len")?);
            let bytes = offset
                .checked_add(len * width)
                .and_then(|e| payload.get(offset..e))
                .ok_or_else(|| format_err(format!("payload of `{name}` out of range")))?;
            let data = bytes
                .chunks_exact(width)
                .map(|c| {
                    T::from_f64_lossy(if width == 4 {
                        f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64
                    } else {
                        f64::from_le_bytes(c.try_into().expect("8 bytes"))
                    })
                })
                .collect();
            let value =
                Tensor::from_vec(&shape, data).map_err(|e| format_err(format!("`{name}`: {e}")))?;
            loaded.push(Parameter::new(name, value, group));
        }

        let mut fresh = CosimNet::<T>::new(config.clone(), distance, with_classifier)?;
        let expected: Vec<(String, Vec<usize>)> = fresh
            .parameters()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect();
        if loaded.len() != expected.len() {
            return Err(format_err(format!(
                "expected {} parameters, found {}",
                expected.len(),
                loaded.len()
            )));
        }
        for (p, (name, shape)) in loaded.iter().zip(&expected) {
            if &p.name != name || p.value.shape() != shape.as_slice() {
                return Err(format_err(format!(
                    "parameter `{}` does not match expected `{name}`",
                    p.name
                )));
            }
        }
        let n_enc = fresh.encoder.params().len();
        let mut rest = loaded.split_off(n_enc);
        fresh.encoder = Encoder::from_parts(config, loaded)?;
        let classifier = rest.split_off(2 * LEVELS);
        fresh.cos_heads = rest;
        fresh.classifier = with_classifier.then_some(classifier);
        Ok(Self {
            model: fresh,
            thresholds,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile {
                path: path.to_path_buf(),
            });
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { what, message } => Error::Format {
                what,
                message: format!("{}: {message}", path.display()),
            },
            e => e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(classifier: bool) -> CosimNet<f64> {
        let cfg = EncoderConfig {
            seed: 5,
            ..Default::default()
        };
        CosimNet::new(cfg, DistanceKind::Cosine, classifier).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for cls in [false, true] {
            let ck = Checkpoint::new(model(cls), [0.25, 0.5, 0.125]);
            let bytes = ck.to_bytes();
            assert!(bytes.starts_with(b"COSIM1\n"));
            let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
            assert_eq!(back.thresholds, ck.thresholds);
            assert_eq!(back.model.distance, DistanceKind::Cosine);
            for (a, b) in back.model.parameters().iter().zip(ck.model.parameters()) {
                assert_eq!(a.name, b.name);
                assert_eq!(a.group, b.group);
                assert_eq!(a.value.data(), b.value.data());
            }
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn f32_checkpoint_loads_into_f64() {
        let m32 =
            CosimNet::<f32>::new(EncoderConfig::default(), DistanceKind::Euclidean, false).unwrap();
        let bytes = Checkpoint::new(m32.clone(), [0.5; LEVELS]).to_bytes();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        for (a, b) in back.model.parameters().iter().zip(m32.parameters()) {
            assert!(a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| *x == *y as f64));
        }
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = Checkpoint::new(model(false), [0.5; LEVELS]).to_bytes();
        let truncated = &bytes[..bytes.len() - 8];
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(truncated),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bad),
            Err(Error::Format { .. })
        ));
        assert!(Checkpoint::<f64>::from_bytes(b"").is_err());
    }
}
