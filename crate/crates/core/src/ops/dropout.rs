use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Keep-mask scaled by `1 / (1 - p)`; zero entries are dropped.
pub(crate) fn dropout_mask<T: Scalar>(shape: &[usize], p: f64, seed: u64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    let mut rng = Rng::new(seed);
    let keep = T::of(1.0 / (1.0 - p));
    Ok(Tensor::from_fn(shape.to_vec(), |_| {
        if rng.uniform() < p {
            T::zero()
        } else {
            keep
        }
    }))
}

/// Inverted dropout. `train = false` returns the input unchanged.
pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, seed: u64, train: bool) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    if !train || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.shape(), p, seed)?;
    x.zip_map(&mask, |a, m| a * m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_cases() {
        let x = Tensor::<f32>::from_fn([100], |i| i as f32 * 0.1 - 3.0);
        assert_eq!(dropout(&x, 0.05, 1, false).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, 1, true).unwrap(), x);
        assert!(dropout(&x, 1.0, 1, true).is_err());
        assert!(dropout(&x, -0.1, 1, false).is_err());
    }

    #[test]
    fn kept_fraction_concentrates() {
        // sd of the kept fraction is sqrt(0.05 * 0.95 / 1e6) ≈ 2.2e-4; ±0.002 is ~9 sd
        let x = Tensor::<f32>::ones([1_000_000]);
        let y = dropout(&x, 0.05, 42, true).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        assert!((kept - 0.95).abs() < 0.002, "{kept}");
        assert_eq!(y, dropout(&x, 0.05, 42, true).unwrap());
    }
}
