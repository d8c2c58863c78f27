use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Per-channel statistics of the current input; running statistics are updated.
    Train,
    /// Stored running statistics.
    Eval,
}

/// Per-channel running mean and (unbiased) variance of a batch norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Scalar = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros([channels]),
            var: Tensor::ones([channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.numel()
    }

    /// Exponential update with [`BN_MOMENTUM`] from batch mean and unbiased variance.
    pub fn update(&mut self, batch_mean: &[f64], batch_var_unbiased: &[f64]) {
        for (m, &b) in self.mean.data_mut().iter_mut().zip(batch_mean) {
            *m = T::of((1.0 - BN_MOMENTUM) * m.as_f64() + BN_MOMENTUM * b);
        }
        for (v, &b) in self.var.data_mut().iter_mut().zip(batch_var_unbiased) {
            *v = T::of((1.0 - BN_MOMENTUM) * v.as_f64() + BN_MOMENTUM * b);
        }
    }
}

/// Intermediates of a batch-norm forward pass, kept for the backward pass.
pub(crate) struct BnForward<T: Scalar> {
    pub y: Tensor<T>,
    /// Normalized input before the affine map.
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased batch variance (train mode only).
    pub var: Vec<f64>,
    pub count: usize,
}

fn check_affine<T: Scalar>(op: &'static str, c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            op,
            format!(
                "gamma {:?} / beta {:?} must both be [{c}]",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok(())
}

pub(crate) fn batch_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<&RunningStats<T>>,
    mode: NormMode,
) -> Result<BnForward<T>> {
    if x.rank() < 2 {
        return Err(Error::shape("batch_norm3d", format!("input shape {:?}", x.shape())));
    }
    let c = x.channels();
    check_affine("batch_norm3d", c, gamma, beta)?;
    let n = x.inner_len();
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        NormMode::Train => (0..c)
            .map(|ch| {
                let v = x.channel(ch);
                let m = v.iter().map(|a| a.as_f64()).sum::<f64>() / n as f64;
                let var = v.iter().map(|a| (a.as_f64() - m).powi(2)).sum::<f64>() / n as f64;
                (m, var)
            })
            .unzip(),
        NormMode::Eval => {
            let rs = running.ok_or_else(|| Error::State {
                op: "batch_norm3d",
                detail: "eval mode requires initialized running statistics".into(),
            })?;
            if rs.channels() != c {
                return Err(Error::shape(
                    "batch_norm3d",
                    format!("running stats have {} channels, input {c}", rs.channels()),
                ));
            }
            (
                rs.mean.data().iter().map(|v| v.as_f64()).collect(),
                rs.var.data().iter().map(|v| v.as_f64()).collect(),
            )
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for ch in 0..c {
        let (m, s) = (mean[ch], inv_std[ch]);
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        let src = x.channel(ch);
        let xh = &mut xhat.data_mut()[ch * n..(ch + 1) * n];
        for (o, &v) in xh.iter_mut().zip(src) {
            *o = T::of((v.as_f64() - m) * s);
        }
        let yy = &mut y.data_mut()[ch * n..(ch + 1) * n];
        for (o, &h) in yy.iter_mut().zip(xhat.channel(ch)) {
            *o = g * h + b;
        }
    }
    Ok(BnForward {
        y,
        xhat,
        inv_std,
        mean,
        var,
        count: n,
    })
}

/// Batch normalization over the spatial positions of each channel.
///
/// In train mode the output is normalized with the input's own statistics and
/// `running` (when given) is updated with momentum 0.1. Eval mode requires
/// running statistics.
pub fn batch_norm3d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<&mut RunningStats<T>>,
    mode: NormMode,
) -> Result<Tensor<T>> {
    let fwd = batch_norm_forward(x, gamma, beta, running.as_deref(), mode)?;
    if let (NormMode::Train, Some(rs)) = (mode, running) {
        rs.update(&fwd.mean, &unbiased(&fwd.var, fwd.count));
    }
    Ok(fwd.y)
}

pub(crate) fn unbiased(var: &[f64], n: usize) -> Vec<f64> {
    let f = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
    var.iter().map(|v| v * f).collect()
}

pub(crate) struct LnForward<T: Scalar> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    extent: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<LnForward<T>> {
    if x.shape().last() != Some(&extent) {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "trailing extent of {:?} does not match normalized extent {extent}",
                x.shape()
            ),
        ));
    }
    check_affine("layer_norm", extent, gamma, beta)?;
    let rows = x.numel() / extent;
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let src = &x.data()[r * extent..(r + 1) * extent];
        let m = src.iter().map(|a| a.as_f64()).sum::<f64>() / extent as f64;
        let var = src.iter().map(|a| (a.as_f64() - m).powi(2)).sum::<f64>() / extent as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(s);
        for j in 0..extent {
            let h = T::of((src[j].as_f64() - m) * s);
            xhat.data_mut()[r * extent + j] = h;
            y.data_mut()[r * extent + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    Ok(LnForward { y, xhat, inv_std })
}

/// Layer normalization over the trailing `extent` of every position.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    extent: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(layer_norm_forward(x, extent, gamma, beta)?.y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn affine(c: usize, g: f64, b: f64) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full([c], g), Tensor::full([c], b))
    }

    #[test]
    fn constant_channels_normalize_to_zero() {
        let x = Tensor::<f64>::from_fn([3, 2, 2, 2], |i| (i / 8) as f64 * 3.5 + 1.0);
        let (g, b) = affine(3, 1.0, 0.0);
        let y = batch_norm3d(&x, &g, &b, None, NormMode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gamma_collapses_to_beta() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::from_fn([2, 3, 3, 3], |_| rng.normal());
        let (g, b) = affine(2, 0.0, 5.0);
        let y = batch_norm3d(&x, &g, &b, None, NormMode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::from_fn([4, 3, 4, 5], |i| rng.normal() * 3.0 + (i % 7) as f64);
        let (g, b) = affine(4, 1.0, 0.0);
        let mut rs = RunningStats::new(4);
        let y = batch_norm3d(&x, &g, &b, Some(&mut rs), NormMode::Train).unwrap();
        for c in 0..4 {
            let v = y.channel(c);
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
            assert!(m.abs() < 1e-6);
            // eps = 1e-5 shrinks the variance by a factor var / (var + eps)
            assert!((var - 1.0).abs() < 1e-5, "channel {c}: var {var}");
        }
        // momentum 0.1 from (0, 1)
        let m0 = x.channel(0).iter().sum::<f64>() / 60.0;
        assert!((rs.mean.data()[0] - 0.1 * m0).abs() < 1e-12);
    }

    #[test]
    fn eval_without_running_stats_fails() {
        let x = Tensor::<f64>::zeros([1, 1, 1, 1]);
        let (g, b) = affine(1, 1.0, 0.0);
        assert!(matches!(
            batch_norm3d(&x, &g, &b, None, NormMode::Eval),
            Err(Error::State { .. })
        ));
    }

    #[test]
    fn layer_norm_two_point() {
        let x = Tensor::<f64>::new([1, 2], vec![1.0, 3.0]).unwrap();
        let (g, b) = affine(2, 1.0, 0.0);
        let y = layer_norm(&x, 2, &g, &b).unwrap();
        // eps perturbs the unit scale at the 1e-6 level
        assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);
        let c = Tensor::<f64>::full([1, 5], 2.5);
        let (g, b) = affine(5, 1.0, 0.0);
        assert!(layer_norm(&c, 5, &g, &b).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(layer_norm(&c, 4, &g, &b).is_err());
    }

    #[test]
    fn layer_norm_random_rows() {
        let mut rng = Rng::new(5);
        let x = Tensor::<f64>::from_fn([7, 9], |_| rng.normal() * 4.0 - 1.0);
        let (g, b) = affine(9, 1.0, 0.0);
        let y = layer_norm(&x, 9, &g, &b).unwrap();
        for r in 0..7 {
            let row = &y.data()[r * 9..(r + 1) * 9];
            let m = row.iter().sum::<f64>() / 9.0;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 9.0;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-5);
        }
    }
}
