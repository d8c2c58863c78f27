use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel mean over all spatial positions: `(C, ...) -> (C)`.
pub fn global_avg_pool3d<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = T::of(x.inner_len() as f64);
    Tensor::from_fn([x.channels()], |c| x.channel(c).iter().copied().sum::<T>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_one_hot_channels() {
        let x = Tensor::<f64>::full([2, 2, 2, 2], 4.2);
        assert!(global_avg_pool3d(&x).data().iter().all(|&v| (v - 4.2).abs() < 1e-15));
        let y = Tensor::<f64>::from_fn([1, 2, 2, 2], |i| if i == 7 { 1.0 } else { 0.0 });
        assert_eq!(global_avg_pool3d(&y).data(), &[0.125]);
    }
}
