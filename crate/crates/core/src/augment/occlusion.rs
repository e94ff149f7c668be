use super::image::Image;
use crate::tensor::Rng;

/// Replaces each pixel with probability `density` by salt (255) or pepper
/// (0), chosen uniformly, on all three channels. Returns the count replaced.
pub fn salt_and_pepper(img: &Image, density: f64, rng: &mut Rng) -> (Image, usize) {
    let mut out = img.clone();
    let mut replaced = 0;
    for px in out.data_mut().chunks_exact_mut(3) {
        if rng.chance(density) {
            let v = if rng.chance(0.5) { 255 } else { 0 };
            px.fill(v);
            replaced += 1;
        }
    }
    (out, replaced)
}

/// Axis-aligned rectangle in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Draws an erasing rectangle with area fraction in `area` and aspect ratio
/// (width/height) in `aspect`, always inside a `w × h` image.
pub fn sample_erase_rect(w: usize, h: usize, area: [f64; 2], aspect: [f64; 2], rng: &mut Rng) -> Rect {
    let target = rng.range(area[0], area[1]) * (w * h) as f64;
    let ratio = rng.range(aspect[0], aspect[1]);
    let width = ((target * ratio).sqrt().round() as usize).clamp(1, w);
    let height = ((target / ratio).sqrt().round() as usize).clamp(1, h);
    Rect {
        x: rng.below(w - width + 1),
        y: rng.below(h - height + 1),
        width,
        height,
    }
}

/// Fills `rect` with per-channel uniform noise.
pub fn erase(img: &Image, rect: Rect, rng: &mut Rng) -> Image {
    let mut out = img.clone();
    for y in rect.y..rect.y + rect.height {
        for x in rect.x..rect.x + rect.width {
            let noise = [0u8; 3].map(|_| rng.below(256) as u8);
            out.set_pixel(x, y, noise);
        }
    }
    out
}
