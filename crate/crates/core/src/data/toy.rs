use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledImage};
use crate::augment::{round_half_up, Image};
use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Where a toy glyph was drawn. The bounding box is in fractions of the
/// image extent, `[x0, y0, x1, y1]`, so it survives resizing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    /// `+1` for an upward-curving (smiling) mouth, `-1` for a frown.
    pub curvature: i8,
    pub bbox: [f64; 4],
}

impl GlyphSpec {
    /// Whether pixel `(y, x)` of a `size × size` grid falls inside the box.
    pub fn contains(&self, y: usize, x: usize, size: usize) -> bool {
        let (fx, fy) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
        fx >= self.bbox[0] && fx <= self.bbox[2] && fy >= self.bbox[1] && fy <= self.bbox[3]
    }
}

/// Draws one toy face: two dot eyes over a parabolic mouth arc, dark ink on a
/// light tinted background with Gaussian pixel noise. `class` 0 smiles,
/// class 1 frowns; everything else is drawn from the same distribution.
pub fn draw_glyph(size: usize, class: usize, rng: &mut Rng) -> (Image, GlyphSpec) {
    let s = size as f64;
    let bg = rng.range(150.0, 235.0);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.range(-15.0, 15.0));
    let ink = bg - rng.range(80.0, 150.0);
    let noise = rng.range(2.0, 12.0);

    let gw = rng.range(0.45, 0.7) * s;
    let gh = 0.75 * gw;
    let thick = (rng.range(0.04, 0.07) * s).max(1.5);
    let margin = thick;
    let cx = rng.range(gw / 2.0 + margin, s - gw / 2.0 - margin);
    let cy = rng.range(gh / 2.0 + margin, s - gh / 2.0 - margin);
    let top = cy - gh / 2.0;

    let eye_r = 0.8 * thick + 0.5;
    let eye_y = top + 0.15 * gh;
    let eyes = [(cx - 0.25 * gw, eye_y), (cx + 0.25 * gw, eye_y)];
    let half = 0.35 * gw;
    let (mouth_top, depth) = (top + 0.5 * gh, 0.4 * gh);
    let curvature: i8 = if class == 0 { 1 } else { -1 };

    let mut cover = vec![false; size * size];
    let mut stamp = |px: f64, py: f64, r: f64| {
        let (x0, x1) = (
            (px - r).floor().max(0.0) as usize,
            ((px + r).ceil() as usize).min(size - 1),
        );
        let (y0, y1) = (
            (py - r).floor().max(0.0) as usize,
            ((py + r).ceil() as usize).min(size - 1),
        );
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - px, y as f64 - py);
                if dx * dx + dy * dy <= r * r {
                    cover[y * size + x] = true;
                }
            }
        }
    };
    for (ex, ey) in eyes {
        stamp(ex, ey, eye_r);
    }
    let steps = (4.0 * half).ceil() as usize + 2;
    for k in 0..=steps {
        let u = 2.0 * k as f64 / steps as f64 - 1.0;
        let bend = if curvature > 0 { 1.0 - u * u } else { u * u };
        stamp(cx + u * half, mouth_top + depth * bend, thick / 2.0);
    }

    let img = Image::from_fn(size, size, |x, y| {
        let base = if cover[y * size + x] { ink } else { bg };
        std::array::from_fn(|c| round_half_up(base + tint[c] + noise * rng.normal()))
    })
    .expect("size >= 1");

    let pad = thick / 2.0 + 1.0;
    let bbox = [
        ((cx - 0.25 * gw - eye_r).min(cx - half) - pad) / s,
        (eye_y - eye_r - pad) / s,
        ((cx + 0.25 * gw + eye_r).max(cx + half) + pad) / s,
        (mouth_top + depth + pad) / s,
    ]
    .map(|v| v.clamp(0.0, 1.0));
    (img, GlyphSpec { curvature, bbox })
}

/// Procedural two-class corpus: `n_per_class` smiles then `n_per_class`
/// frowns. Item `k` draws from `Rng::substream(seed, k)`.
pub fn synth_toy(n_per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Config("synth_toy: n_per_class must be at least 1".into()));
    }
    if image_size < 8 {
        return Err(Error::Config(format!(
            "synth_toy: image size {image_size} is too small"
        )));
    }
    let mut items = Vec::with_capacity(2 * n_per_class);
    for class in 0..2 {
        for k in 0..n_per_class {
            let index = class * n_per_class + k;
            let mut rng = Rng::substream(seed, index as u64);
            let (image, glyph) = draw_glyph(image_size, class, &mut rng);
            items.push(LabeledImage {
                image,
                label: class,
                source_path: format!("{}/{:05}.ppm", crate::model::CLASS_NAMES[class], k),
                glyph: Some(glyph),
            });
        }
    }
    Dataset::new(items)
}
