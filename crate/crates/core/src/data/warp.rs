//! Similarity warps about the image centre, by inverse mapping.

use crate::error::{invalid, Result};
use crate::losses::ChangeMask;
use crate::numerics::{Scalar, Tensor};

use super::lerp;

/// Source coordinate `(x, y)` of output pixel `(px, py)`.
struct InverseMap {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    inv_zoom: f64,
    dx: f64,
    dy: f64,
}

impl InverseMap {
    fn new(h: usize, w: usize, rotation_deg: f64, zoom: f64, (dx, dy): (f64, f64)) -> Self {
        let theta = rotation_deg.to_radians();
        Self {
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            cos: theta.cos(),
            sin: theta.sin(),
            inv_zoom: 1.0 / zoom,
            dx,
            dy,
        }
    }

    #[inline]
    fn source(&self, px: usize, py: usize) -> (f64, f64) {
        let u = px as f64 - self.cx - self.dx;
        let v = py as f64 - self.cy - self.dy;
        // rotate by −θ
        let x = (self.cos * u + self.sin * v) * self.inv_zoom;
        let y = (-self.sin * u + self.cos * v) * self.inv_zoom;
        (self.cx + x, self.cy + y)
    }
}

/// Rotates by `rotation_deg` (counter-clockwise in image coordinates),
/// scales by `zoom` and shifts by `translation` pixels. Images are sampled
/// bilinearly and masks by nearest neighbour; samples falling outside the
/// frame take the nearest border value.
pub fn warp_viewpoint<T: Scalar>(
    image: &Tensor<T>,
    mask: &ChangeMask,
    rotation_deg: f64,
    zoom: f64,
    translation: (f64, f64),
) -> Result<(Tensor<T>, ChangeMask)> {
    if !(zoom >= 1.0) || !zoom.is_finite() {
        return Err(invalid!("zoom must be at least 1, got {zoom}"));
    }
    if !rotation_deg.is_finite() || !translation.0.is_finite() || !translation.1.is_finite() {
        return Err(invalid!("warp parameters must be finite"));
    }
    let (c, h, w) = image.dims3()?;
    if mask.resolution() != (h, w) {
        return Err(invalid!(
            "mask {:?} does not match image {h}×{w}",
            mask.resolution()
        ));
    }
    let map = InverseMap::new(h, w, rotation_deg, zoom, translation);
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    let src = image.data();
    let labels = mask.labels();
    let mut out = vec![T::zero(); c * h * w];
    let mut y_out = Vec::with_capacity(h * w);
    for py in 0..h {
        for px in 0..w {
            let (sx, sy) = map.source(px, py);
            let (sx, sy) = (sx.clamp(0.0, xmax), sy.clamp(0.0, ymax));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let fx = T::from_f64_lossy(sx - x0 as f64);
            let fy = T::from_f64_lossy(sy - y0 as f64);
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], fx);
                let bot = lerp(plane[y1 * w + x0], plane[y1 * w + x1], fx);
                out[ch * h * w + py * w + px] = lerp(top, bot, fy);
            }
            let (nx, ny) = (sx.round() as usize, sy.round() as usize);
            y_out.push(labels[ny * w + nx]);
        }
    }
    Ok((
        Tensor::from_vec(&[c, h, w], out)?,
        ChangeMask::new(h, w, y_out)?,
    ))
}
