use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source taps `(i0, i1, frac)` of linear interpolation with half-pixel centres.
fn taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Interpolate along `axis` of a rank-4 tensor.
fn along_axis<T: Scalar>(x: &Tensor<T>, axis: usize, out_len: usize) -> Tensor<T> {
    let shape = x.shape();
    let in_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = out_len;
    let tp = taps(in_len, out_len);
    let mut y = Tensor::zeros(out_shape);
    let (src, dst) = (x.data(), y.data_mut());
    for o in 0..outer {
        for (k, &(i0, i1, f)) in tp.iter().enumerate() {
            let (w0, w1) = (T::of(1.0 - f), T::of(f));
            let d = &mut dst[(o * out_len + k) * inner..][..inner];
            let a = &src[(o * in_len + i0) * inner..][..inner];
            let b = &src[(o * in_len + i1) * inner..][..inner];
            for j in 0..inner {
                d[j] = w0 * a[j] + w1 * b[j];
            }
        }
    }
    y
}

/// Adjoint of [`along_axis`].
fn along_axis_adjoint<T: Scalar>(g: &Tensor<T>, axis: usize, in_len: usize) -> Tensor<T> {
    let shape = g.shape();
    let out_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut in_shape = shape.to_vec();
    in_shape[axis] = in_len;
    let tp = taps(in_len, out_len);
    let mut gx = Tensor::zeros(in_shape);
    let (src, dst) = (g.data(), gx.data_mut());
    for o in 0..outer {
        for (k, &(i0, i1, f)) in tp.iter().enumerate() {
            let (w0, w1) = (T::of(1.0 - f), T::of(f));
            let s = &src[(o * out_len + k) * inner..][..inner];
            for j in 0..inner {
                dst[(o * in_len + i0) * inner + j] += w0 * s[j];
                dst[(o * in_len + i1) * inner + j] += w1 * s[j];
            }
        }
    }
    gx
}

/// Trilinear resampling of a `(C, D, H, W)` tensor (half-pixel centres,
/// edge clamping).
pub fn upsample_trilinear<T: Scalar>(x: &Tensor<T>, out: [usize; 3]) -> Result<Tensor<T>> {
    x.dims3("upsample_trilinear")?;
    if out.contains(&0) {
        return Err(Error::invalid("trilinear output extents must be positive"));
    }
    let mut y = x.clone();
    for (a, &n) in out.iter().enumerate() {
        y = along_axis(&y, a + 1, n);
    }
    Ok(y)
}

pub(crate) fn upsample_trilinear_backward<T: Scalar>(g: &Tensor<T>, input: [usize; 3]) -> Tensor<T> {
    let mut gx = g.clone();
    for a in (0..3).rev() {
        gx = along_axis_adjoint(&gx, a + 1, input[a]);
    }
    gx
}
