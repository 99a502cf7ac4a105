//! Procedural scene pairs. A scene is a smooth textured background with
//! opaque rectangles and discs; `t1` differs from `t0` by optional object
//! edits (semantic change) followed by a viewpoint warp and photometric
//! perturbations (noisy change). The mask is derived from object identity,
//! never from pixel values, so noise alone cannot mark a pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::losses::ChangeMask;
use crate::numerics::{Scalar, Tensor};

use super::{warp_viewpoint, Dataset, ImagePair, Provenance, ScenePair, SemanticEdit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub count: usize,
    /// Inclusive range of objects per scene.
    pub objects: (usize, usize),
    pub p_change: f64,
    /// Largest absolute brightness offset, sampled per item.
    pub brightness: f64,
    pub noise_sigma: f64,
    /// Largest shadow darkening factor; shadows appear on about half the items.
    pub shadow_opacity: f64,
    /// Rotation is sampled from `±rotation_deg`.
    pub rotation_deg: f64,
    /// Inclusive zoom range.
    pub zoom: (f64, f64),
    /// Each translation component is sampled from `±translation` pixels.
    pub translation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            count: 320,
            objects: (2, 5),
            p_change: 0.75,
            brightness: 0.15,
            noise_sigma: 0.02,
            shadow_opacity: 0.3,
            rotation_deg: 0.0,
            zoom: (1.0, 1.0),
            translation: 0.0,
            seed: 0,
        }
    }
}

fn in_range(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if !(v >= lo && v <= hi) {
        return Err(invalid!("{name}={v} outside [{lo}, {hi}]"));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(8)
            || !self.width.is_multiple_of(8)
        {
            return Err(invalid!(
                "canvas {}×{} must be a positive multiple of 8",
                self.height,
                self.width
            ));
        }
        if self.height < 32 || self.width < 32 {
            return Err(invalid!("canvas must be at least 32×32 to hold objects"));
        }
        if self.objects.0 > self.objects.1 {
            return Err(invalid!(
                "object count range {}..={} is empty",
                self.objects.0,
                self.objects.1
            ));
        }
        in_range("p_change", self.p_change, 0.0, 1.0)?;
        in_range("brightness", self.brightness, -0.3, 0.3)?;
        in_range("noise", self.noise_sigma, 0.0, 0.05)?;
        in_range("shadow opacity", self.shadow_opacity, 0.0, 0.5)?;
        in_range("rotation", self.rotation_deg, -10.0, 10.0)?;
        in_range("zoom minimum", self.zoom.0, 1.0, 1.3)?;
        in_range("zoom maximum", self.zoom.1, self.zoom.0, 1.3)?;
        in_range("translation", self.translation, 0.0, 8.0)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeKind {
    /// Covers columns `x..x+w` and rows `y..y+h`.
    Rect { x: i64, y: i64, w: i64, h: i64 },
    /// Covers pixels whose centre lies within `r` of `(cx, cy)`.
    Disc { cx: f64, cy: f64, r: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    /// Non-zero; zero denotes background.
    pub id: u32,
    pub geometry: ShapeKind,
    pub color: [f64; 3],
}

impl Shape {
    #[inline]
    pub fn covers(&self, px: usize, py: usize) -> bool {
        match self.geometry {
            ShapeKind::Rect { x, y, w, h } => {
                let (px, py) = (px as i64, py as i64);
                px >= x && px < x + w && py >= y && py < y + h
            }
            ShapeKind::Disc { cx, cy, r } => {
                let dx = px as f64 + 0.5 - cx;
                let dy = py as f64 + 0.5 - cy;
                dx * dx + dy * dy <= r * r
            }
        }
    }

    fn translated(&self, dx: i64, dy: i64) -> Shape {
        let geometry = match self.geometry {
            ShapeKind::Rect { x, y, w, h } => ShapeKind::Rect {
                x: x + dx,
                y: y + dy,
                w,
                h,
            },
            ShapeKind::Disc { cx, cy, r } => ShapeKind::Disc {
                cx: cx + dx as f64,
                cy: cy + dy as f64,
                r,
            },
        };
        Shape {
            geometry,
            ..self.clone()
        }
    }
}

/// Smooth background: a base colour, a linear ramp and one sinusoidal texture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [f64; 3],
    pub ramp: (f64, f64),
    pub texture_amplitude: f64,
    pub texture_frequency: (f64, f64),
    pub texture_phase: f64,
}

impl Background {
    pub fn flat(color: [f64; 3]) -> Self {
        Self {
            base: color,
            ramp: (0.0, 0.0),
            texture_amplitude: 0.0,
            texture_frequency: (0.0, 0.0),
            texture_phase: 0.0,
        }
    }

    fn shade(&self, px: usize, py: usize, h: usize, w: usize) -> f64 {
        let u = px as f64 / w as f64 - 0.5;
        let v = py as f64 / h as f64 - 0.5;
        let (fx, fy) = self.texture_frequency;
        self.ramp.0 * u
            + self.ramp.1 * v
            + self.texture_amplitude
                * (std::f64::consts::TAU * (fx * u + fy * v) + self.texture_phase).sin()
    }
}

/// Painter's-order list of opaque shapes over a background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub background: Background,
    pub shapes: Vec<Shape>,
}

impl Scene {
    /// Id of the topmost shape at each pixel (0 for background), row-major.
    pub fn id_map(&self, h: usize, w: usize) -> Vec<u32> {
        let mut ids = vec![0; h * w];
        for s in &self.shapes {
            for py in 0..h {
                for px in 0..w {
                    if s.covers(px, py) {
                        ids[py * w + px] = s.id;
                    }
                }
            }
        }
        ids
    }

    /// `3×H×W` rendering in `[0, 1]`.
    pub fn render(&self, h: usize, w: usize) -> Vec<f64> {
        let ids = self.id_map(h, w);
        let mut out = vec![0.0; 3 * h * w];
        for py in 0..h {
            for px in 0..w {
                let i = py * w + px;
                let rgb = match ids[i] {
                    0 => {
                        let s = self.background.shade(px, py, h, w);
                        self.background.base.map(|c| c + s)
                    }
                    id => self
                        .shapes
                        .iter()
                        .find(|s| s.id == id)
                        .map_or([0.0; 3], |s| s.color),
                };
                for (c, v) in rgb.into_iter().enumerate() {
                    out[c * h * w + i] = v.clamp(0.0, 1.0);
                }
            }
        }
        out
    }
}

/// Pixels whose topmost object differs between the two scenes are changed.
pub fn semantic_change_mask(s0: &Scene, s1: &Scene, h: usize, w: usize) -> ChangeMask {
    let a = s0.id_map(h, w);
    let b = s1.id_map(h, w);
    let y = a.iter().zip(&b).map(|(p, q)| u8::from(p == q)).collect();
    ChangeMask::new(h, w, y).expect("labels are binary by construction")
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of item `index` under `master`; independent of generation order.
pub fn item_seed(master: u64, index: usize) -> u64 {
    splitmix64(master ^ splitmix64(index as u64))
}

fn random_color(rng: &mut ChaCha8Rng, avoid: &[[f64; 3]]) -> [f64; 3] {
    let mut best = [0.0; 3];
    let mut best_gap = -1.0;
    for _ in 0..16 {
        let c = [
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        ];
        let gap = avoid
            .iter()
            .map(|a| {
                a.iter()
                    .zip(&c)
                    .map(|(p, q)| (p - q).abs())
                    .fold(0.0, f64::max)
            })
            .fold(f64::INFINITY, f64::min);
        if gap >= 0.35 {
            return c;
        }
        if gap > best_gap {
            best = c;
            best_gap = gap;
        }
    }
    best
}

fn random_shape(rng: &mut ChaCha8Rng, id: u32, h: usize, w: usize, avoid: &[[f64; 3]]) -> Shape {
    let (h, w) = (h as i64, w as i64);
    let geometry = if rng.random_bool(0.5) {
        let sw = rng.random_range(20..=32);
        let sh = rng.random_range(20..=32);
        ShapeKind::Rect {
            x: rng.random_range(0..=w - sw),
            y: rng.random_range(0..=h - sh),
            w: sw,
            h: sh,
        }
    } else {
        let r = rng.random_range(10.0..16.0);
        ShapeKind::Disc {
            cx: rng.random_range(r..w as f64 - r),
            cy: rng.random_range(r..h as f64 - r),
            r,
        }
    };
    Shape {
        id,
        geometry,
        color: random_color(rng, avoid),
    }
}

fn random_background(rng: &mut ChaCha8Rng) -> Background {
    Background {
        base: [
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
        ],
        ramp: (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)),
        texture_amplitude: rng.random_range(0.0..0.05),
        texture_frequency: (rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)),
        texture_phase: rng.random_range(0.0..std::f64::consts::TAU),
    }
}

fn symmetric(rng: &mut ChaCha8Rng, amplitude: f64) -> f64 {
    if amplitude > 0.0 {
        rng.random_range(-amplitude..=amplitude)
    } else {
        0.0
    }
}

fn sample_item(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Scene, Scene, Provenance) {
    let (h, w) = (cfg.height, cfg.width);
    let background = random_background(rng);
    let n = rng.random_range(cfg.objects.0..=cfg.objects.1);
    let mut palette = vec![background.base];
    let mut shapes = Vec::with_capacity(n + 1);
    for i in 0..n {
        let s = random_shape(rng, i as u32 + 1, h, w, &palette);
        palette.push(s.color);
        shapes.push(s);
    }
    let s0 = Scene { background, shapes };
    let mut s1 = s0.clone();
    let mut edits = Vec::new();
    if rng.random_bool(cfg.p_change) {
        let choice = if s1.shapes.is_empty() {
            0
        } else {
            rng.random_range(0..3)
        };
        match choice {
            0 => {
                let s = random_shape(rng, n as u32 + 1, h, w, &palette);
                s1.shapes.push(s.clone());
                edits.push(SemanticEdit::Add { shape: s });
            }
            1 => {
                let k = rng.random_range(0..s1.shapes.len());
                let s = s1.shapes.remove(k);
                edits.push(SemanticEdit::Remove { shape: s });
            }
            _ => {
                let k = rng.random_range(0..s1.shapes.len());
                let dist = rng.random_range(10.0..20.0);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let from = s1.shapes[k].clone();
                let to = from.translated(
                    (dist * angle.cos()).round() as i64,
                    (dist * angle.sin()).round() as i64,
                );
                s1.shapes[k] = to.clone();
                edits.push(SemanticEdit::Move { from, to });
            }
        }
    }

    let rotation_deg = symmetric(rng, cfg.rotation_deg.abs());
    let zoom = if cfg.zoom.1 > cfg.zoom.0 {
        rng.random_range(cfg.zoom.0..=cfg.zoom.1)
    } else {
        cfg.zoom.0
    };
    let translation = (
        symmetric(rng, cfg.translation),
        symmetric(rng, cfg.translation),
    );
    let brightness = symmetric(rng, cfg.brightness.abs());
    let (shadow_polygon, shadow_opacity) = if cfg.shadow_opacity > 0.0 && rng.random_bool(0.5) {
        let (cx, cy) = (
            rng.random_range(0.0..w as f64),
            rng.random_range(0.0..h as f64),
        );
        let poly = (0..4)
            .map(|k| {
                let a = std::f64::consts::FRAC_PI_2 * k as f64 + rng.random_range(-0.5..0.5);
                let r = rng.random_range(0.2..0.6) * w.min(h) as f64;
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        (
            poly,
            rng.random_range(0.5 * cfg.shadow_opacity..=cfg.shadow_opacity),
        )
    } else {
        (Vec::new(), 0.0)
    };
    let prov = Provenance {
        edits,
        brightness,
        noise_sigma: cfg.noise_sigma,
        shadow_polygon,
        shadow_opacity,
        rotation_deg,
        zoom,
        translation,
        noise_seed: rng.random(),
    };
    (s0, s1, prov)
}

/// Even-odd rule at pixel centres.
fn inside_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len().wrapping_sub(1);
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Renders both scenes and applies the warp and photometric perturbations
/// of `prov` to `t1`. The mask marks the edited objects in the `t1` frame.
pub fn compose_scene_pair<T: Scalar>(
    identifier: &str,
    s0: &Scene,
    s1: &Scene,
    prov: &Provenance,
    h: usize,
    w: usize,
) -> Result<ScenePair<T>> {
    let t0 = Tensor::from_vec(&[3, h, w], s0.render(h, w))?;
    let t1 = Tensor::from_vec(&[3, h, w], s1.render(h, w))?;
    let mask = semantic_change_mask(s0, s1, h, w);
    let identity = prov.rotation_deg == 0.0 && prov.zoom == 1.0 && prov.translation == (0.0, 0.0);
    let (t1, mask) = if identity {
        (t1, mask)
    } else {
        warp_viewpoint(&t1, &mask, prov.rotation_deg, prov.zoom, prov.translation)?
    };

    let mut v = t1.into_data();
    if prov.shadow_opacity > 0.0 && prov.shadow_polygon.len() >= 3 {
        let keep = 1.0 - prov.shadow_opacity;
        for py in 0..h {
            for px in 0..w {
                if inside_polygon(&prov.shadow_polygon, px as f64 + 0.5, py as f64 + 0.5) {
                    for c in 0..3 {
                        v[c * h * w + py * w + px] *= keep;
                    }
                }
            }
        }
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(prov.noise_seed);
    let normal = Normal::new(0.0, prov.noise_sigma.max(0.0))
        .map_err(|e| invalid!("noise sigma {}: {e}", prov.noise_sigma))?;
    for x in &mut v {
        let n = if prov.noise_sigma > 0.0 {
            normal.sample(&mut noise_rng)
        } else {
            0.0
        };
        *x = (*x + prov.brightness + n).clamp(0.0, 1.0);
    }
    let cast =
        |d: Vec<f64>| Tensor::from_vec(&[3, h, w], d.into_iter().map(T::from_f64_lossy).collect());
    let pair = ImagePair::new(cast(t0.into_data())?, cast(v)?, identifier)?;
    Ok(ScenePair {
        pair,
        mask,
        provenance: Some(prov.clone()),
    })
}

/// Deterministic in `cfg`; item `i` depends only on the master seed and `i`.
pub fn generate_synthetic<T: Scalar>(cfg: &SynthConfig) -> Result<Dataset<T>> {
    cfg.validate()?;
    let width = cfg.count.max(1).to_string().len();
    let items = (0..cfg.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, i));
            let (s0, s1, prov) = sample_item(cfg, &mut rng);
            compose_scene_pair(
                &format!("{i:0width$}"),
                &s0,
                &s1,
                &prov,
                cfg.height,
                cfg.width,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(items))
}
