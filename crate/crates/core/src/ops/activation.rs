use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Silu,
    Softplus,
    Exp,
}

impl Pointwise {
    pub fn name(self) -> &'static str {
        match self {
            Pointwise::Relu => "relu",
            Pointwise::Sigmoid => "sigmoid",
            Pointwise::Silu => "silu",
            Pointwise::Softplus => "softplus",
            Pointwise::Exp => "exp",
        }
    }

    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Pointwise::Relu => v.max(T::zero()),
            Pointwise::Sigmoid => sigmoid(v),
            Pointwise::Silu => v * sigmoid(v),
            Pointwise::Softplus => softplus(v),
            Pointwise::Exp => v.exp(),
        }
    }

    /// Derivative given the input `x` and output `y`.
    pub(crate) fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Pointwise::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Pointwise::Sigmoid => y * (T::one() - y),
            Pointwise::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Pointwise::Softplus => sigmoid(x),
            Pointwise::Exp => y,
        }
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^v)` without overflow.
pub fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// `ln σ(v)` without underflow.
pub fn log_sigmoid<T: Scalar>(v: T) -> T {
    -softplus(-v)
}

pub fn pointwise<T: Scalar>(x: &Tensor<T>, kind: Pointwise) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_layout(x.shape(), axis)?;
    let mut y = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = y.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let m = (0..n).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..n {
                let e = (src[at(k)] - m).exp();
                dst[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                dst[at(k)] /= total;
            }
        }
    }
    Ok(y)
}
