use super::image::{round_half_up, Image};

/// `v' = (b·v − μ)·c + μ` where `μ` is the mean of the brightness-scaled
/// image.
pub fn brightness_contrast(img: &Image, brightness: f64, contrast: f64) -> Image {
    let mean = img.mean() * brightness;
    map_values(img, |v| (v * brightness - mean) * contrast + mean)
}

fn map_values(img: &Image, f: impl Fn(f64) -> f64) -> Image {
    let data = img.data().iter().map(|&v| round_half_up(f(v as f64))).collect();
    Image::from_raw(img.width(), img.height(), data).expect("same dimensions")
}

/// Scales every pixel inside the even-odd region of `polygon` (vertices in
/// pixel units, pixel centres at `+0.5`) by `factor`.
pub fn shadow(img: &Image, polygon: &[(f64, f64)], factor: f64) -> Image {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if inside_polygon(x as f64 + 0.5, y as f64 + 0.5, polygon) {
                let p = img.pixel(x, y);
                out.set_pixel(x, y, p.map(|v| round_half_up(v as f64 * factor)));
            }
        }
    }
    out
}

/// Even-odd rule point-in-polygon test.
pub fn inside_polygon(px: f64, py: f64, polygon: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = polygon.len().wrapping_sub(1);
    for (i, &(xi, yi)) in polygon.iter().enumerate() {
        let (xj, yj) = polygon[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Standard deviation used for a blur kernel of size `k`.
pub fn blur_sigma(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

fn gaussian_kernel(k: usize) -> Vec<f64> {
    let sigma = blur_sigma(k);
    let r = (k / 2) as f64;
    let raw: Vec<f64> = (0..k)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Reflect-101 index (`dcb|abcd|cba`) for any integer offset.
fn reflect101(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Separable Gaussian blur with an odd kernel size `k`, reflect-101 borders.
pub fn gaussian_blur(img: &Image, k: usize) -> Image {
    let kernel = gaussian_kernel(k);
    let r = (k / 2) as isize;
    let (w, h) = (img.width(), img.height());
    let planes = [0, 1, 2].map(|c| {
        let src = img.plane_f64(c);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * src[y * w + reflect101(x as isize + t as isize - r, w)])
                    .sum();
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * tmp[reflect101(y as isize + t as isize - r, h) * w + x])
                    .sum();
            }
        }
        out
    });
    Image::from_planes(w, h, &planes).expect("same dimensions")
}

/// RGB in `[0,1]` → HSV with hue in `[0,1)`.
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize) % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Shifts hue by `dh` (fraction of the hue circle) and scales saturation and
/// value by `1 + ds` and `1 + dv`.
pub fn hsv_jitter(img: &Image, dh: f64, ds: f64, dv: f64) -> Image {
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let rgb = [px[0], px[1], px[2]].map(|v| v as f64 / 255.0);
        let [h, s, v] = rgb_to_hsv(rgb);
        let jittered = [
            (h + dh).rem_euclid(1.0),
            (s * (1.0 + ds)).clamp(0.0, 1.0),
            (v * (1.0 + dv)).clamp(0.0, 1.0),
        ];
        for (dst, c) in px.iter_mut().zip(hsv_to_rgb(jittered)) {
            *dst = round_half_up(c * 255.0);
        }
    }
    out
}

/// Standard JPEG luminance quantisation table (row-major).
pub const LUMINANCE_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance table scaled for `quality` with the IJG rule, entries clamped
/// to `[1, 255]`.
pub fn quant_table(quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    LUMINANCE_TABLE.map(|base| ((base as u32 * scale + 50) / 100).clamp(1, 255) as f64)
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let alpha = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    c
}

/// Orthonormal 2-D DCT-II of an 8×8 block (row-major).
pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let c = dct_basis();
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    acc += c[u][y] * c[v][x] * block[y * 8 + x];
                }
            }
            out[u * 8 + v] = acc;
        }
    }
    out
}

/// Inverse of [`dct8x8`].
pub fn idct8x8(coeffs: &[f64; 64]) -> [f64; 64] {
    let c = dct_basis();
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            let mut acc = 0.0;
            for u in 0..8 {
                for v in 0..8 {
                    acc += c[u][y] * c[v][x] * coeffs[u * 8 + v];
                }
            }
            out[y * 8 + x] = acc;
        }
    }
    out
}

/// Simulated JPEG quality loss: per channel and 8×8 block (edge blocks
/// replicate-padded), level shift, DCT, quantise/dequantise with the scaled
/// luminance table, inverse DCT. No entropy coding.
pub fn jpeg_degrade(img: &Image, quality: u8) -> Image {
    let table = quant_table(quality);
    let (w, h) = (img.width(), img.height());
    let planes = [0, 1, 2].map(|c| {
        let src = img.plane_f64(c);
        let mut out = src.clone();
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        let sy = (by + y).min(h - 1);
                        let sx = (bx + x).min(w - 1);
                        block[y * 8 + x] = src[sy * w + sx] - 128.0;
                    }
                }
                let mut coeffs = dct8x8(&block);
                for (v, q) in coeffs.iter_mut().zip(&table) {
                    *v = (*v / q).round() * q;
                }
                let rec = idct8x8(&coeffs);
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        out[(by + y) * w + bx + x] = rec[y * 8 + x] + 128.0;
                    }
                }
            }
        }
        out
    });
    Image::from_planes(w, h, &planes).expect("same dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = crate::tensor::Rng::new(seed);
        Image::from_fn(w, h, |_, _| [0, 0, 0].map(|_: u8| rng.below(256) as u8)).unwrap()
    }

    #[test]
    fn unit_brightness_and_contrast_is_identity() {
        let img = noise_image(9, 7, 1);
        assert_eq!(brightness_contrast(&img, 1.0, 1.0), img);
    }

    #[test]
    fn shadow_arithmetic() {
        let img = Image::filled(20, 20, [255; 3]).unwrap();
        let quad = [(0.0, 0.0), (20.0, 0.0), (15.0, 10.0), (5.0, 10.0)];
        let out = shadow(&img, &quad, 0.7);
        let mut inside = 0;
        for y in 0..20 {
            for x in 0..20 {
                let v = out.pixel(x, y)[0];
                if inside_polygon(x as f64 + 0.5, y as f64 + 0.5, &quad) {
                    assert!(v == 178 || v == 179, "{v}");
                    inside += 1;
                } else {
                    assert_eq!(v, 255);
                }
            }
        }
        assert!(inside > 50);
    }

    #[test]
    fn even_odd_polygon() {
        let square = [(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)];
        assert!(inside_polygon(2.0, 2.0, &square));
        assert!(!inside_polygon(5.0, 2.0, &square));
        // Self-intersecting bow-tie: both side lobes in, the top wedge out.
        let bowtie = [(0.0, 0.0), (4.0, 4.0), (4.0, 0.0), (0.0, 4.0)];
        assert!(inside_polygon(0.5, 2.0, &bowtie));
        assert!(inside_polygon(3.5, 2.0, &bowtie));
        assert!(!inside_polygon(2.0, 0.5, &bowtie));
    }

    #[test]
    fn blur_sigma_convention() {
        assert!((blur_sigma(5) - 1.1).abs() < 1e-12);
        assert!((blur_sigma(7) - 1.4).abs() < 1e-12);
        assert!((blur_sigma(9) - 1.7).abs() < 1e-12);
        let k = gaussian_kernel(7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k[0], k[6]);
    }

    #[test]
    fn blur_of_constant_is_constant() {
        for k in [5, 7, 9] {
            let img = Image::filled(6, 4, [10, 128, 251]).unwrap();
            assert_eq!(gaussian_blur(&img, k), img);
        }
        let tiny = Image::filled(1, 1, [3, 4, 5]).unwrap();
        assert_eq!(gaussian_blur(&tiny, 9), tiny);
    }

    #[test]
    fn reflect101_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect101(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn hsv_round_trip_and_zero_jitter() {
        for rgb in [[1.0, 0.0, 0.0], [0.2, 0.7, 0.4], [0.5, 0.5, 0.5], [0.1, 0.2, 0.9]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for (a, b) in rgb.iter().zip(back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let img = noise_image(8, 8, 3);
        assert_eq!(hsv_jitter(&img, 0.0, 0.0, 0.0), img);
    }

    #[test]
    fn quality_100_table_is_all_ones() {
        assert!(quant_table(100).iter().all(|&q| q == 1.0));
        // q = 30 → scale 166: 16·166 = 2656 → (2656+50)/100 = 27.
        assert_eq!(quant_table(30)[0], 27.0);
    }

    #[test]
    fn jpeg_quality_100_is_near_lossless() {
        let img = noise_image(13, 11, 4);
        let out = jpeg_degrade(&img, 100);
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn constant_block_survives() {
        // Only the DC term is non-zero: 8·(v − 128), quantised with step 27.
        let img = Image::filled(8, 8, [77, 150, 201]).unwrap();
        let out = jpeg_degrade(&img, 30);
        for (a, b) in img.data().iter().zip(out.data()) {
            let dc = ((8.0 * (*a as f64 - 128.0)) / 27.0).round() * 27.0;
            assert_eq!(*b, round_half_up(128.0 + dc / 8.0));
        }
    }

    #[test]
    fn checkerboard_loses_its_highest_frequency() {
        let img = Image::from_fn(8, 8, |x, y| if (x + y) % 2 == 0 { [136; 3] } else { [120; 3] }).unwrap();
        let block: [f64; 64] = std::array::from_fn(|k| img.data()[k * 3] as f64 - 128.0);
        let coeffs = dct8x8(&block);
        let q = quant_table(30)[63];
        assert!(coeffs[63].abs() > 1.0);
        assert_eq!((coeffs[63] / q).round(), 0.0, "coefficient {} vs step {q}", coeffs[63]);
        let out = jpeg_degrade(&img, 30);
        assert_ne!(out, img);
    }

    #[test]
    fn dct_round_trip() {
        let block: [f64; 64] = std::array::from_fn(|k| ((k * 37) % 23) as f64 - 11.0);
        let back = idct8x8(&dct8x8(&block));
        for (a, b) in block.iter().zip(back) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
