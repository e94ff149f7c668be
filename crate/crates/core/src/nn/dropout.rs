use super::{missing_cache, Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Shape4, Tensor4};

/// Inverted dropout: in training each element survives with probability
/// `1 − p` and is scaled by `1/(1 − p)`; evaluation is the identity.
#[derive(Clone, Debug)]
pub struct Dropout<T> {
    rate: f64,
    rng: Rng,
    mask: Option<Vec<T>>,
    freeze_mask: bool,
    // `Some(true)` after a masked forward, `Some(false)` after an identity forward.
    pending: Option<bool>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64, rng: Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        Ok(Self {
            rate,
            rng,
            mask: None,
            freeze_mask: false,
            pending: None,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: Rng) {
        self.rng = rng;
    }

    /// While frozen, train-mode forwards reuse the last mask instead of
    /// drawing a new one (used for finite-difference checks).
    pub fn set_freeze_mask(&mut self, freeze: bool) {
        self.freeze_mask = freeze;
    }

    pub fn mask(&self) -> Option<&[T]> {
        self.mask.as_deref()
    }

    fn draw_mask(&mut self, len: usize) -> Vec<T> {
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        (0..len)
            .map(|_| {
                if self.rng.uniform() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect()
    }
}

impl<T: Scalar> Layer<T> for Dropout<T> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        if mode == Mode::Eval || self.rate == 0.0 {
            self.pending = Some(false);
            return Ok(x.clone());
        }
        let reuse = self.freeze_mask && self.mask.as_ref().is_some_and(|m| m.len() == x.len());
        if !reuse {
            self.mask = Some(self.draw_mask(x.len()));
        }
        let mask = self.mask.as_ref().expect("mask drawn above");
        let mut y = x.clone();
        for (v, &m) in y.data_mut().iter_mut().zip(mask) {
            *v = *v * m;
        }
        self.pending = Some(true);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let masked = self.pending.take().ok_or_else(|| missing_cache("dropout"))?;
        if !masked {
            return Ok(dy.clone());
        }
        let mask = self.mask.as_ref().ok_or_else(|| missing_cache("dropout"))?;
        if mask.len() != dy.len() {
            return Err(Error::contract(format!(
                "dropout: upstream gradient {:?} does not match cached mask of {} elements",
                dy.shape(),
                mask.len()
            )));
        }
        let mut dx = dy.clone();
        for (v, &m) in dx.data_mut().iter_mut().zip(mask) {
            *v = *v * m;
        }
        Ok(dx)
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        Ok(input)
    }
}
