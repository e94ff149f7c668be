//! Channel and spatial attention blocks: Squeeze-and-Excitation and CBAM.
//!
//! Both blocks preserve their input shape and rescale features by
//! sigmoid-gated weights in `(0, 1)`.

mod cbam;
mod se;

pub use cbam::Cbam;
pub use se::SeBlock;

use crate::tensor::{Scalar, Tensor4};

/// Default bottleneck reduction ratio for both blocks.
pub const DEFAULT_REDUCTION: usize = 2;

/// Hidden width of the excitation MLP: `max(1, c / r)`.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Global average pool to `[n, c, 1, 1]`.
pub(crate) fn global_avg_pool<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.shape();
    let area = (h * w) as f64;
    Tensor4::from_fn([n, c, 1, 1], |[i, j, _, _]| {
        T::from_f64(x.plane(i, j).iter().map(|v| v.as_f64()).sum::<f64>() / area)
    })
}

/// Global max pool to `[n, c, 1, 1]` plus the flat in-plane index of each
/// maximum (first occurrence wins).
pub(crate) fn global_max_pool<T: Scalar>(x: &Tensor4<T>) -> (Tensor4<T>, Vec<usize>) {
    let [n, c, _, _] = x.shape();
    let mut arg = Vec::with_capacity(n * c);
    let pooled = Tensor4::from_fn([n, c, 1, 1], |[i, j, _, _]| {
        let plane = x.plane(i, j);
        let mut best = 0;
        for (k, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = k;
            }
        }
        arg.push(best);
        plane[best]
    });
    (pooled, arg)
}
