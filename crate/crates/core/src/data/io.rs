//! On-disk layout: `t0/`, `t1/` and `mask/` hold images with matching file
//! stems. Masks are single-channel with changed pixels bright; anything at
//! or above 128 counts as changed. An optional `manifest.txt` restricts the
//! dataset to the identifiers it lists.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::losses::ChangeMask;
use crate::metric::ChangeMap;
use crate::numerics::{Scalar, Tensor};

use super::{Dataset, ImagePair, ScenePair};

pub const MANIFEST_FILE: &str = "manifest.txt";
const PROVENANCE_FILE: &str = "provenance.jsonl";
const EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];
const MASK_THRESHOLD: u8 = 128;

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile {
            path: dir.to_path_buf(),
        });
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_owned(), path);
        }
    }
    Ok(out)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    let scale = T::from_f64_lossy(1.0 / 255.0);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] =
                T::from_f64_lossy(f64::from(px[c])) * scale;
        }
    }
    Tensor::from_vec(&[3, h, w], data).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_mask(path: &Path) -> Result<ChangeMask> {
    let img = decode(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let y = img
        .pixels()
        .map(|p| u8::from(p[0] < MASK_THRESHOLD))
        .collect();
    ChangeMask::new(h, w, y)
}

fn read_manifest(root: &Path) -> Result<Option<Vec<String>>> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_owned)
            .collect(),
    ))
}

fn counterpart(
    dir: &Path,
    files: &BTreeMap<String, PathBuf>,
    stem: &str,
    like: &Path,
) -> Result<PathBuf> {
    files.get(stem).cloned().ok_or_else(|| Error::MissingFile {
        path: dir.join(like.file_name().unwrap_or_default()),
    })
}

/// Reads every triple under `root`, in file-name order.
pub fn load_dataset<T: Scalar>(root: impl AsRef<Path>) -> Result<Dataset<T>> {
    let root = root.as_ref();
    let dirs = [root.join("t0"), root.join("t1"), root.join("mask")];
    let t0 = list_images(&dirs[0])?;
    let t1 = list_images(&dirs[1])?;
    let masks = list_images(&dirs[2])?;

    for files in [&t1, &masks] {
        if let Some((_, path)) = files.iter().find(|(s, _)| !t0.contains_key(*s)) {
            return Err(Error::MissingFile {
                path: dirs[0].join(path.file_name().unwrap_or_default()),
            });
        }
    }

    let stems: Vec<String> = match read_manifest(root)? {
        None => t0.keys().cloned().collect(),
        Some(ids) => {
            for id in &ids {
                if !t0.contains_key(id) {
                    return Err(Error::MissingFile {
                        path: dirs[0].join(format!("{id}.png")),
                    });
                }
            }
            let mut ids = ids;
            ids.sort();
            ids.dedup();
            ids
        }
    };

    let mut items = Vec::with_capacity(stems.len());
    for stem in stems {
        let p0 = &t0[&stem];
        let p1 = counterpart(&dirs[1], &t1, &stem, p0)?;
        let pm = counterpart(&dirs[2], &masks, &stem, p0)?;
        let a = read_rgb::<T>(p0)?;
        let b = read_rgb::<T>(&p1)?;
        let mask = read_mask(&pm)?;
        if a.shape() != b.shape() {
            return Err(Error::Format {
                what: "image pair",
                message: format!(
                    "{} is {:?} but {} is {:?}",
                    p0.display(),
                    a.shape(),
                    p1.display(),
                    b.shape()
                ),
            });
        }
        if mask.resolution() != (a.shape()[1], a.shape()[2]) {
            return Err(Error::Format {
                what: "change mask",
                message: format!(
                    "{} is {:?} but its images are {}×{}",
                    pm.display(),
                    mask.resolution(),
                    a.shape()[1],
                    a.shape()[2]
                ),
            });
        }
        items.push(ScenePair {
            pair: ImagePair::new(a, b, stem)?,
            mask,
            provenance: None,
        });
    }
    Ok(Dataset::new(items))
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub(crate) fn rgb_image<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(crate::error::invalid!("expected 3 channels, got {c}"));
    }
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|ch| to_u8(d[ch * h * w + i].to_f64_lossy())))
    }))
}

/// Reads one RGB image as a `3×H×W` tensor in `[0, 1]`.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    read_rgb(path)
}

fn save_gray(path: &Path, (h, w): (usize, usize), bytes: Vec<u8>) -> Result<()> {
    GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer matches map size")
        .save(path)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// 8-bit grayscale PNG with pixel `round(255·v)`.
pub fn save_change_map<T: Scalar>(map: &ChangeMap<T>, path: impl AsRef<Path>) -> Result<()> {
    save_gray(path.as_ref(), map.resolution(), map.to_u8())
}

/// Changed pixels 255, unchanged 0.
pub fn save_mask(mask: &ChangeMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes = mask
        .labels()
        .iter()
        .map(|&y| if y == 0 { 255 } else { 0 })
        .collect();
    save_gray(path.as_ref(), mask.resolution(), bytes)
}

/// Writes `ds` in the layout read by [`load_dataset`], plus a manifest and
/// one JSON line of provenance per synthetic item.
pub fn save_dataset<T: Scalar>(ds: &Dataset<T>, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for sub in ["t0", "t1", "mask"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = String::new();
    let mut provenance = String::new();
    for item in &ds.items {
        let id = &item.pair.identifier;
        for (sub, t) in [("t0", &item.pair.t0), ("t1", &item.pair.t1)] {
            let path = root.join(sub).join(format!("{id}.png"));
            rgb_image(t)?.save(&path).map_err(|e| Error::Decode {
                path: path.clone(),
                message: e.to_string(),
            })?;
        }
        save_mask(&item.mask, root.join("mask").join(format!("{id}.png")))?;
        manifest.push_str(id);
        manifest.push('\n');
        if let Some(p) = &item.provenance {
            let line = serde_json::json!({ "id": id, "provenance": p });
            provenance.push_str(&line.to_string());
            provenance.push('\n');
        }
    }
    let write = |name: &str, text: &str| -> Result<()> {
        let path = root.join(name);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(text.as_bytes())
            .map_err(|e| Error::io(&path, e))
    };
    write(MANIFEST_FILE, &manifest)?;
    if !provenance.is_empty() {
        write(PROVENANCE_FILE, &provenance)?;
    }
    Ok(())
}
