//! Sampled per-location feature vectors with ground-truth labels, for
//! external embedding analysis.

use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{item_seed, ScenePair};
use crate::encoder::LEVELS;
use crate::error::{invalid, Error, Result};
use crate::numerics::Scalar;

use super::model::CosimNet;

/// Writes `pair_id,branch,x,y,changed,f0,…` rows. Each pair contributes
/// `samples` locations, drawn without replacement at level resolution and
/// exported for both branches. `level` is 1-based.
pub fn export_features<T: Scalar, W: Write>(
    model: &CosimNet<T>,
    items: &[ScenePair<T>],
    level: usize,
    samples: usize,
    seed: u64,
    out: W,
) -> Result<usize> {
    if !(1..=LEVELS).contains(&level) {
        return Err(invalid!("level must be in 1..={LEVELS}, got {level}"));
    }
    let channels = model.encoder.level_channels()[level - 1];
    let mut w = csv::Writer::from_writer(out);
    let werr = |e: csv::Error| Error::Format {
        what: "feature table",
        message: e.to_string(),
    };
    let mut header = vec![
        "pair_id".to_owned(),
        "branch".into(),
        "x".into(),
        "y".into(),
        "changed".into(),
    ];
    header.extend((0..channels).map(|c| format!("f{c}")));
    w.write_record(&header).map_err(werr)?;

    let mut rows = 0;
    for (i, item) in items.iter().enumerate() {
        if samples == 0 {
            break;
        }
        let (f0, f1) = model.encode_pair(&item.pair)?;
        let (c, h, wd) = f0.levels[level - 1].dims3()?;
        if samples > h * wd {
            return Err(invalid!(
                "{samples} samples requested from a {h}×{wd} feature map"
            ));
        }
        let mask = item.mask.resize_nearest(h, wd)?;
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, i));
        let mut picks = index::sample(&mut rng, h * wd, samples).into_vec();
        picks.sort_unstable();
        for (branch, pyr) in [("t0", &f0), ("t1", &f1)] {
            let data = pyr.levels[level - 1].data();
            for &p in &picks {
                let mut rec = vec![
                    item.pair.identifier.clone(),
                    branch.to_owned(),
                    (p % wd).to_string(),
                    (p / wd).to_string(),
                    u8::from(mask.is_changed(p)).to_string(),
                ];
                rec.extend((0..c).map(|ch| data[ch * h * wd + p].to_string()));
                w.write_record(&rec).map_err(werr)?;
                rows += 1;
            }
        }
    }
    w.flush().map_err(|e| Error::Format {
        what: "feature table",
        message: e.to_string(),
    })?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::encoder::EncoderConfig;
    use crate::metric::DistanceKind;

    fn setup() -> (CosimNet<f64>, Vec<ScenePair<f64>>) {
        let net = CosimNet::new(EncoderConfig::default(), DistanceKind::Euclidean, false).unwrap();
        let ds = generate_synthetic::<f64>(&SynthConfig {
            count: 3,
            height: 32,
            width: 32,
            ..Default::default()
        })
        .unwrap();
        (net, ds.items)
    }

    #[test]
    fn row_count_and_determinism() {
        let (net, items) = setup();
        let mut a = Vec::new();
        let rows = export_features(&net, &items, 2, 5, 9, &mut a).unwrap();
        assert_eq!(rows, 3 * 5 * 2);
        let text = String::from_utf8(a.clone()).unwrap();
        assert_eq!(text.lines().count(), 1 + rows);
        assert!(text.starts_with("pair_id,branch,x,y,changed,f0,"));
        let mut b = Vec::new();
        export_features(&net, &items, 2, 5, 9, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_samples_is_header_only() {
        let (net, items) = setup();
        let mut a = Vec::new();
        assert_eq!(export_features(&net, &items, 1, 0, 0, &mut a).unwrap(), 0);
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1);
    }

    #[test]
    fn invalid_level_is_rejected() {
        let (net, items) = setup();
        assert!(export_features(&net, &items, 0, 1, 0, Vec::new()).is_err());
        assert!(export_features(&net, &items, 4, 1, 0, Vec::new()).is_err());
    }
}
