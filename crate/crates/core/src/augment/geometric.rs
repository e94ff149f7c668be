use nalgebra::{Matrix3, SMatrix, SVector, Vector3};

use super::image::{round_half_up, Image};

/// Parameters of one geometric warp. Translation and corner displacements
/// are fractions of the image extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpParams {
    pub angle_deg: f64,
    pub translate: (f64, f64),
    pub scale: f64,
    /// Displacement of the corners top-left, top-right, bottom-right,
    /// bottom-left.
    pub corners: [(f64, f64); 4],
}

impl WarpParams {
    pub fn identity() -> Self {
        Self {
            angle_deg: 0.0,
            translate: (0.0, 0.0),
            scale: 1.0,
            corners: [(0.0, 0.0); 4],
        }
    }
}

/// Forward map (source pixel → output pixel) in pixel-index coordinates:
/// rotation and scale about the image centre, then translation, then a
/// perspective warp moving the corners.
pub fn forward_homography(w: usize, h: usize, p: &WarpParams) -> Matrix3<f64> {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = p.angle_deg.to_radians().sin_cos();
    let s = p.scale;
    let affine = Matrix3::new(
        s * cos,
        -s * sin,
        cx - s * cos * cx + s * sin * cy + p.translate.0 * w as f64,
        s * sin,
        s * cos,
        cy - s * sin * cx - s * cos * cy + p.translate.1 * h as f64,
        0.0,
        0.0,
        1.0,
    );
    if p.corners.iter().all(|&(dx, dy)| dx == 0.0 && dy == 0.0) {
        return affine;
    }
    let (xm, ym) = (w as f64 - 1.0, h as f64 - 1.0);
    let src = [(0.0, 0.0), (xm, 0.0), (xm, ym), (0.0, ym)];
    let dst: [(f64, f64); 4] = std::array::from_fn(|k| {
        (
            src[k].0 + p.corners[k].0 * w as f64,
            src[k].1 + p.corners[k].1 * h as f64,
        )
    });
    match homography_from_points(&src, &dst) {
        Some(perspective) => perspective * affine,
        None => affine,
    }
}

/// Homography `H` with `H·src_k ∝ dst_k` for four point pairs (`h33 = 1`).
pub fn homography_from_points(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Option<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for k in 0..4 {
        let (x, y) = src[k];
        let (u, v) = dst[k];
        let r = 2 * k;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let sol = a.lu().solve(&b)?;
    Some(Matrix3::new(
        sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0,
    ))
}

// Sample positions this close outside the image are treated as on the border.
const EDGE_SLACK: f64 = 1e-9;

/// Resamples `img` through the inverse of `forward` with bilinear
/// interpolation; output pixels mapping outside the source are black.
pub fn warp(img: &Image, forward: &Matrix3<f64>) -> Image {
    let (w, h) = (img.width(), img.height());
    let Some(inverse) = forward.try_inverse() else {
        return Image::filled(w, h, [0; 3]).expect("valid dimensions");
    };
    let (xm, ym) = (w as f64 - 1.0, h as f64 - 1.0);
    Image::from_fn(w, h, |x, y| {
        let q = inverse * Vector3::new(x as f64, y as f64, 1.0);
        if q[2].abs() < 1e-12 {
            return [0; 3];
        }
        let (sx, sy) = (q[0] / q[2], q[1] / q[2]);
        if sx < -EDGE_SLACK || sy < -EDGE_SLACK || sx > xm + EDGE_SLACK || sy > ym + EDGE_SLACK {
            return [0; 3];
        }
        let (sx, sy) = (sx.clamp(0.0, xm), sy.clamp(0.0, ym));
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let (p00, p10, p01, p11) = (
            img.pixel(x0, y0),
            img.pixel(x1, y0),
            img.pixel(x0, y1),
            img.pixel(x1, y1),
        );
        std::array::from_fn(|c| {
            let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
            let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
            round_half_up(top * (1.0 - fy) + bottom * fy)
        })
    })
    .expect("valid dimensions")
}

pub fn hflip(img: &Image) -> Image {
    let w = img.width();
    Image::from_fn(w, img.height(), |x, y| img.pixel(w - 1 - x, y)).expect("valid dimensions")
}

pub fn vflip(img: &Image) -> Image {
    let h = img.height();
    Image::from_fn(img.width(), h, |x, y| img.pixel(x, h - 1 - y)).expect("valid dimensions")
}
