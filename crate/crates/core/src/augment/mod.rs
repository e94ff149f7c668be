//! Seeded image augmentation: appearance, geometric, and occlusion stages.
//!
//! Every random choice for sample `i` comes from `Rng::substream(seed, i)`,
//! so results never depend on worker count or processing order.

mod appearance;
mod geometric;
mod image;
mod occlusion;

pub use appearance::{
    blur_sigma, brightness_contrast, dct8x8, gaussian_blur, hsv_jitter, hsv_to_rgb, idct8x8, inside_polygon,
    jpeg_degrade, quant_table, rgb_to_hsv, shadow, LUMINANCE_TABLE,
};
pub use geometric::{forward_homography, hflip, homography_from_points, vflip, warp, WarpParams};
pub use image::{round_half_up, Image};
pub use occlusion::{erase, salt_and_pepper, sample_erase_rect, Rect};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub brightness_contrast_prob: f64,
    pub brightness_range: [f64; 2],
    pub contrast_range: [f64; 2],
    pub jitter_prob: f64,
    /// Additive hue shift bound, as a fraction of the hue circle.
    pub hue_delta: f64,
    /// Multiplicative saturation bound: `s·(1 ± sat_delta)`.
    pub sat_delta: f64,
    /// Multiplicative value bound: `v·(1 ± bright_delta)`.
    pub bright_delta: f64,
    pub blur_prob: f64,
    pub blur_kernel_choices: Vec<usize>,
    pub shadow_prob: f64,
    pub shadow_factor: f64,
    pub jpeg_prob: f64,
    pub jpeg_quality: u8,
    pub geometric_prob: f64,
    pub rotation_max_deg: f64,
    pub translate_frac: f64,
    pub scale_range: [f64; 2],
    /// Bound on each corner's perspective displacement, as a fraction of the
    /// image extent.
    pub perspective_frac: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub saltpepper_prob: f64,
    pub saltpepper_density: f64,
    pub erase_prob: f64,
    pub erase_area_range: [f64; 2],
    pub erase_aspect_range: [f64; 2],
    pub master_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            brightness_contrast_prob: 0.5,
            brightness_range: [0.8, 1.2],
            contrast_range: [0.8, 1.2],
            jitter_prob: 0.5,
            hue_delta: 0.05,
            sat_delta: 0.2,
            bright_delta: 0.2,
            blur_prob: 0.2,
            blur_kernel_choices: vec![5, 7, 9],
            shadow_prob: 0.5,
            shadow_factor: 0.7,
            jpeg_prob: 0.5,
            jpeg_quality: 30,
            geometric_prob: 0.5,
            rotation_max_deg: 30.0,
            translate_frac: 0.1,
            scale_range: [0.8, 1.2],
            perspective_frac: 0.05,
            hflip_prob: 0.5,
            vflip_prob: 0.1,
            saltpepper_prob: 0.5,
            saltpepper_density: 0.05,
            erase_prob: 0.2,
            erase_area_range: [0.02, 0.2],
            erase_aspect_range: [0.3, 3.3],
            master_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every stage probability set to 0: the pipeline is the identity.
    pub fn disabled() -> Self {
        Self {
            brightness_contrast_prob: 0.0,
            jitter_prob: 0.0,
            blur_prob: 0.0,
            shadow_prob: 0.0,
            jpeg_prob: 0.0,
            geometric_prob: 0.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            saltpepper_prob: 0.0,
            erase_prob: 0.0,
            ..Self::default()
        }
    }

    /// Every stage probability set to 1.
    pub fn always() -> Self {
        Self {
            brightness_contrast_prob: 1.0,
            jitter_prob: 1.0,
            blur_prob: 1.0,
            shadow_prob: 1.0,
            jpeg_prob: 1.0,
            geometric_prob: 1.0,
            hflip_prob: 1.0,
            vflip_prob: 1.0,
            saltpepper_prob: 1.0,
            erase_prob: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("brightness_contrast_prob", self.brightness_contrast_prob),
            ("jitter_prob", self.jitter_prob),
            ("blur_prob", self.blur_prob),
            ("shadow_prob", self.shadow_prob),
            ("jpeg_prob", self.jpeg_prob),
            ("geometric_prob", self.geometric_prob),
            ("hflip_prob", self.hflip_prob),
            ("vflip_prob", self.vflip_prob),
            ("saltpepper_prob", self.saltpepper_prob),
            ("saltpepper_density", self.saltpepper_density),
            ("erase_prob", self.erase_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} = {p} is not a probability")));
            }
        }
        if self.blur_kernel_choices.is_empty() || self.blur_kernel_choices.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(
                "augment.blur_kernel_choices must be non-empty and odd".into(),
            ));
        }
        if !(1..=100).contains(&self.jpeg_quality) {
            return Err(Error::Config("augment.jpeg_quality must be in [1, 100]".into()));
        }
        let ranges = [
            ("brightness_range", self.brightness_range, 0.0),
            ("contrast_range", self.contrast_range, 0.0),
            ("scale_range", self.scale_range, f64::MIN_POSITIVE),
            ("erase_area_range", self.erase_area_range, f64::MIN_POSITIVE),
            ("erase_aspect_range", self.erase_aspect_range, f64::MIN_POSITIVE),
        ];
        for (name, [lo, hi], min) in ranges {
            if !(lo >= min && lo <= hi) {
                return Err(Error::Config(format!("augment.{name} = [{lo}, {hi}] is invalid")));
            }
        }
        if self.erase_area_range[1] > 1.0 {
            return Err(Error::Config("augment.erase_area_range must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

fn symmetric(rng: &mut Rng, bound: f64) -> f64 {
    rng.range(-bound, bound)
}

/// Brightness/contrast, HSV jitter, blur, shadow, JPEG, each with its own
/// probability. Applied operations are appended to `log`.
pub fn appearance_stage(img: &Image, cfg: &AugmentConfig, rng: &mut Rng, log: &mut Vec<String>) -> Image {
    let mut out = img.clone();
    if rng.chance(cfg.brightness_contrast_prob) {
        let b = rng.range(cfg.brightness_range[0], cfg.brightness_range[1]);
        let c = rng.range(cfg.contrast_range[0], cfg.contrast_range[1]);
        out = brightness_contrast(&out, b, c);
        log.push(format!("brightness_contrast({b:.3},{c:.3})"));
    }
    if rng.chance(cfg.jitter_prob) {
        let dh = symmetric(rng, cfg.hue_delta);
        let ds = symmetric(rng, cfg.sat_delta);
        let dv = symmetric(rng, cfg.bright_delta);
        out = hsv_jitter(&out, dh, ds, dv);
        log.push(format!("hsv_jitter({dh:.3},{ds:.3},{dv:.3})"));
    }
    if rng.chance(cfg.blur_prob) {
        let k = cfg.blur_kernel_choices[rng.below(cfg.blur_kernel_choices.len())];
        out = gaussian_blur(&out, k);
        log.push(format!("blur(k={k})"));
    }
    if rng.chance(cfg.shadow_prob) {
        let quad = sample_shadow_quad(out.width(), out.height(), rng);
        out = shadow(&out, &quad, cfg.shadow_factor);
        log.push(format!("shadow({})", cfg.shadow_factor));
    }
    if rng.chance(cfg.jpeg_prob) {
        out = jpeg_degrade(&out, cfg.jpeg_quality);
        log.push(format!("jpeg(q={})", cfg.jpeg_quality));
    }
    out
}

/// Quadrilateral with two vertices on a random image edge and two random
/// interior points.
pub fn sample_shadow_quad(w: usize, h: usize, rng: &mut Rng) -> [(f64, f64); 4] {
    let (wf, hf) = (w as f64, h as f64);
    let (mut a, mut b) = (rng.uniform(), rng.uniform());
    if a > b {
        std::mem::swap(&mut a, &mut b);
    }
    let (p1, p2) = match rng.below(4) {
        0 => ((a * wf, 0.0), (b * wf, 0.0)),
        1 => ((wf, a * hf), (wf, b * hf)),
        2 => ((b * wf, hf), (a * wf, hf)),
        _ => ((0.0, b * hf), (0.0, a * hf)),
    };
    let q2 = (rng.uniform() * wf, rng.uniform() * hf);
    let q1 = (rng.uniform() * wf, rng.uniform() * hf);
    [p1, p2, q2, q1]
}

/// Random warp parameters drawn from the configured bounds.
pub fn sample_warp(cfg: &AugmentConfig, rng: &mut Rng) -> WarpParams {
    let angle_deg = symmetric(rng, cfg.rotation_max_deg);
    let translate = (symmetric(rng, cfg.translate_frac), symmetric(rng, cfg.translate_frac));
    let scale = rng.range(cfg.scale_range[0], cfg.scale_range[1]);
    let corners = std::array::from_fn(|_| {
        (
            symmetric(rng, cfg.perspective_frac),
            symmetric(rng, cfg.perspective_frac),
        )
    });
    WarpParams {
        angle_deg,
        translate,
        scale,
        corners,
    }
}

/// Affine + perspective warp (with `geometric_prob`), then horizontal and
/// vertical flips.
pub fn geometric_stage(img: &Image, cfg: &AugmentConfig, rng: &mut Rng, log: &mut Vec<String>) -> Image {
    let mut out = img.clone();
    if rng.chance(cfg.geometric_prob) {
        let p = sample_warp(cfg, rng);
        out = warp(&out, &forward_homography(out.width(), out.height(), &p));
        log.push(format!(
            "warp(rot={:.2},tx={:.3},ty={:.3},scale={:.3})",
            p.angle_deg, p.translate.0, p.translate.1, p.scale
        ));
    }
    if rng.chance(cfg.hflip_prob) {
        out = hflip(&out);
        log.push("hflip".into());
    }
    if rng.chance(cfg.vflip_prob) {
        out = vflip(&out);
        log.push("vflip".into());
    }
    out
}

/// Salt-and-pepper noise and random erasing.
pub fn occlusion_stage(img: &Image, cfg: &AugmentConfig, rng: &mut Rng, log: &mut Vec<String>) -> Image {
    let mut out = img.clone();
    if rng.chance(cfg.saltpepper_prob) {
        out = salt_and_pepper(&out, cfg.saltpepper_density, rng).0;
        log.push(format!("salt_pepper({})", cfg.saltpepper_density));
    }
    if rng.chance(cfg.erase_prob) {
        let rect = sample_erase_rect(
            out.width(),
            out.height(),
            cfg.erase_area_range,
            cfg.erase_aspect_range,
            rng,
        );
        out = erase(&out, rect, rng);
        log.push(format!("erase({},{},{}x{})", rect.x, rect.y, rect.width, rect.height));
    }
    out
}

/// Full pipeline for sample `index`, returning the image and the list of
/// operations applied.
pub fn apply_pipeline_logged(img: &Image, cfg: &AugmentConfig, index: u64) -> (Image, Vec<String>) {
    let mut rng = Rng::substream(cfg.master_seed, index);
    let mut log = Vec::new();
    let out = appearance_stage(img, cfg, &mut rng, &mut log);
    let out = geometric_stage(&out, cfg, &mut rng, &mut log);
    let out = occlusion_stage(&out, cfg, &mut rng, &mut log);
    (out, log)
}

pub fn apply_pipeline(img: &Image, cfg: &AugmentConfig, index: u64) -> Image {
    apply_pipeline_logged(img, cfg, index).0
}
