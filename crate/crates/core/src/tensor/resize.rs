/// Bilinear resampling of one `h × w` plane to `oh × ow` with half-pixel
/// centres: output pixel `(y, x)` samples the source at
/// `((y + 0.5)·h/oh − 0.5, (x + 0.5)·w/ow − 0.5)`, clamped to the edge.
pub fn resize_bilinear(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    debug_assert_eq!(plane.len(), h * w);
    let ys: Vec<(usize, usize, f64)> = (0..oh).map(|y| taps(y, h, oh)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..ow).map(|x| taps(x, w, ow)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], fx);
            let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    out
}

fn taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let plane: Vec<f64> = (0..35).map(|v| (v * 7 % 11) as f64).collect();
        assert_eq!(resize_bilinear(&plane, 5, 7, 5, 7), plane);
    }

    #[test]
    fn constant_stays_constant() {
        let plane = vec![0.3; 6 * 4];
        assert!(resize_bilinear(&plane, 6, 4, 17, 9).iter().all(|&v| v == 0.3));
    }

    #[test]
    fn upsampling_two_pixels() {
        // Half-pixel centres: outputs sit at source positions -0.25, 0.25, 0.75, 1.25.
        let out = resize_bilinear(&[0.0, 4.0], 1, 2, 1, 4);
        assert_eq!(out, vec![0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn downsampling_by_two_averages_pairs() {
        let out = resize_bilinear(&[1.0, 3.0, 5.0, 7.0], 1, 4, 1, 2);
        assert_eq!(out, vec![2.0, 6.0]);
    }
}
