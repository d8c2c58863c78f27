use std::sync::Arc;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec, NormMode, Pointwise, RunningStats};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Batch mean and unbiased variance observed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    a.value().expect_same_shape(b.value(), op)
}

impl<T: Scalar> Tape<T> {
    // ---- elementwise -----------------------------------------------------

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a, b)?;
        let y = a.value().zip_map(b.value(), |p, q| p + q)?;
        Ok(self.custom("add", y, &[a, b], |g, need| {
            Ok(vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())])
        }))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", a, b)?;
        let y = a.value().zip_map(b.value(), |p, q| p - q)?;
        Ok(self.custom("sub", y, &[a, b], |g, need| {
            Ok(vec![need[0].then(|| g.clone()), need[1].then(|| g.scale(-T::one()))])
        }))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a, b)?;
        let y = a.value().zip_map(b.value(), |p, q| p * q)?;
        let (av, bv) = (a.shared(), b.shared());
        Ok(self.custom("mul", y, &[a, b], move |g, need| {
            Ok(vec![
                need[0].then(|| g.zip_map(&bv, |x, y| x * y)).transpose()?,
                need[1].then(|| g.zip_map(&av, |x, y| x * y)).transpose()?,
            ])
        }))
    }

    pub fn scale(&self, a: &Var<T>, c: f64) -> Var<T> {
        let c = T::of(c);
        self.custom("scale", a.value().scale(c), &[a], move |g, _| Ok(vec![Some(g.scale(c))]))
    }

    pub fn pointwise(&self, a: &Var<T>, kind: Pointwise) -> Var<T> {
        let y = ops::pointwise(a.value(), kind);
        let (x, out) = (a.shared(), Arc::new(y.clone()));
        self.custom(kind.name(), y, &[a], move |g, _| {
            let d = Tensor::from_fn(x.shape(), |i| {
                kind.derivative(x.data()[i], out.data()[i]) * g.data()[i]
            });
            Ok(vec![Some(d)])
        })
    }

    pub fn relu(&self, a: &Var<T>) -> Var<T> {
        self.pointwise(a, Pointwise::Relu)
    }

    pub fn sigmoid(&self, a: &Var<T>) -> Var<T> {
        self.pointwise(a, Pointwise::Sigmoid)
    }

    pub fn silu(&self, a: &Var<T>) -> Var<T> {
        self.pointwise(a, Pointwise::Silu)
    }

    pub fn softplus(&self, a: &Var<T>) -> Var<T> {
        self.pointwise(a, Pointwise::Softplus)
    }

    pub fn exp(&self, a: &Var<T>) -> Var<T> {
        self.pointwise(a, Pointwise::Exp)
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&self, a: &Var<T>) -> Var<T> {
        let shape = a.shape().to_vec();
        self.custom("sum", Tensor::scalar(a.value().sum()), &[a], move |g, _| {
            Ok(vec![Some(Tensor::full(shape, g.item()))])
        })
    }

    pub fn mean(&self, a: &Var<T>) -> Var<T> {
        let n = a.value().numel() as f64;
        self.scale(&self.sum(a), 1.0 / n)
    }

    /// `(C, ...) -> (C)` spatial mean.
    pub fn global_avg_pool3d(&self, a: &Var<T>) -> Var<T> {
        let y = ops::global_avg_pool3d(a.value());
        let shape = a.shape().to_vec();
        let n = a.value().inner_len();
        self.custom("global_avg_pool3d", y, &[a], move |g, _| {
            let inv = T::of(1.0 / n as f64);
            Ok(vec![Some(Tensor::from_fn(shape, |i| g.data()[i / n] * inv))])
        })
    }

    // ---- shape -----------------------------------------------------------

    pub fn reshape(&self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let y = a.value().clone().reshape(shape)?;
        let orig = a.shape().to_vec();
        Ok(self.custom("reshape", y, &[a], move |g, _| Ok(vec![Some(g.clone().reshape(orig)?)])))
    }

    /// Rows `[start, start + len)` along the leading axis.
    pub fn slice_rows(&self, a: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let c = a.shape()[0];
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of leading extent {c}", start + len),
            ));
        }
        let inner = a.value().inner_len();
        let mut shape = a.shape().to_vec();
        shape[0] = len;
        let y = Tensor::new(shape, a.value().data()[start * inner..(start + len) * inner].to_vec())?;
        let full = a.shape().to_vec();
        Ok(self.custom("slice_rows", y, &[a], move |g, _| {
            let mut gx = Tensor::zeros(full);
            gx.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
            Ok(vec![Some(gx)])
        }))
    }

    /// Concatenate along the leading axis; all other extents must agree.
    pub fn concat_rows(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tail = &first.shape()[1..];
        let mut rows = Vec::with_capacity(parts.len());
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{:?} vs {:?}", p.shape(), first.shape()),
                ));
            }
            rows.push(p.shape()[0]);
        }
        let mut shape = first.shape().to_vec();
        shape[0] = rows.iter().sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(p.value().data());
        }
        let y = Tensor::new(shape, data)?;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Ok(self.custom("concat_rows", y, parts, move |g, need| {
            let mut off = 0;
            let mut out = Vec::with_capacity(shapes.len());
            for (s, &n) in shapes.iter().zip(need) {
                let len: usize = s.iter().product();
                out.push(
                    n.then(|| Tensor::new(s.clone(), g.data()[off..off + len].to_vec()))
                        .transpose()?,
                );
                off += len;
            }
            Ok(out)
        }))
    }

    pub fn transpose2d(&self, a: &Var<T>) -> Result<Var<T>> {
        if a.value().rank() != 2 {
            return Err(Error::shape("transpose2d", format!("rank-2 input required, got {:?}", a.shape())));
        }
        let y = transpose(a.value());
        Ok(self.custom("transpose2d", y, &[a], |g, _| Ok(vec![Some(transpose(g))])))
    }

    /// `out[c, j] = a[c, index[j]]` for `a` viewed as `(C, N)`; `index` must be
    /// a permutation of `0..N`.
    pub fn permute_inner(&self, a: &Var<T>, index: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Var<T>> {
        let c = a.shape()[0];
        let n = a.value().inner_len();
        if index.len() != n || out_shape.iter().product::<usize>() != c * n || out_shape[0] != c {
            return Err(Error::shape(
                "permute_inner",
                format!("index of length {} for input {:?} -> {out_shape:?}", index.len(), a.shape()),
            ));
        }
        let src = a.value().data();
        let mut data = Vec::with_capacity(c * n);
        for ch in 0..c {
            let row = &src[ch * n..(ch + 1) * n];
            data.extend(index.iter().map(|&j| row[j]));
        }
        let y = Tensor::new(out_shape.to_vec(), data)?;
        let in_shape = a.shape().to_vec();
        Ok(self.custom("permute_inner", y, &[a], move |g, _| {
            let mut gx = Tensor::zeros(in_shape);
            let d = gx.data_mut();
            for ch in 0..c {
                for (k, &j) in index.iter().enumerate() {
                    d[ch * n + j] += g.data()[ch * n + k];
                }
            }
            Ok(vec![Some(gx)])
        }))
    }

    // ---- linear maps -----------------------------------------------------

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (m, k, n) = match (a.shape(), b.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ))
            }
        };
        let mut y = Tensor::zeros([m, n]);
        gemm(
            T::one(),
            MatRef::row_major(a.value().data(), m, k),
            MatRef::row_major(b.value().data(), k, n),
            T::zero(),
            y.data_mut(),
            0,
            n,
        );
        let (av, bv) = (a.shared(), b.shared());
        Ok(self.custom("matmul", y, &[a, b], move |g, need| {
            let gm = MatRef::row_major(g.data(), m, n);
            let ga = need[0].then(|| {
                let mut t = Tensor::zeros([m, k]);
                gemm(T::one(), gm, MatRef::row_major(bv.data(), k, n).t(), T::zero(), t.data_mut(), 0, k);
                t
            });
            let gb = need[1].then(|| {
                let mut t = Tensor::zeros([k, n]);
                gemm(T::one(), MatRef::row_major(av.data(), m, k).t(), gm, T::zero(), t.data_mut(), 0, n);
                t
            });
            Ok(vec![ga, gb])
        }))
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn add_channel_bias(&self, x: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let c = x.shape()[0];
        if bias.shape() != [c] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} for input {:?}", bias.shape(), x.shape()),
            ));
        }
        let n = x.value().inner_len();
        let b = bias.value().data();
        let y = Tensor::from_fn(x.shape(), |i| x.value().data()[i] + b[i / n]);
        Ok(self.custom("add_channel_bias", y, &[x, bias], |g, need| {
            Ok(vec![need[0].then(|| g.clone()), need[1].then(|| ops::channel_sums(g))])
        }))
    }

    /// Multiplies channel `c` of `x` by `s[c]`.
    pub fn scale_channels(&self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        let c = x.shape()[0];
        if s.shape() != [c] {
            return Err(Error::shape(
                "scale_channels",
                format!("scales {:?} for input {:?}", s.shape(), x.shape()),
            ));
        }
        let n = x.value().inner_len();
        let y = Tensor::from_fn(x.shape(), |i| x.value().data()[i] * s.value().data()[i / n]);
        let (xv, sv) = (x.shared(), s.shared());
        Ok(self.custom("scale_channels", y, &[x, s], move |g, need| {
            let gx = need[0].then(|| Tensor::from_fn(xv.shape(), |i| g.data()[i] * sv.data()[i / n]));
            let gs = need[1].then(|| {
                Tensor::from_fn([c], |ch| {
                    g.channel(ch).iter().zip(xv.channel(ch)).map(|(&a, &b)| a * b).sum()
                })
            });
            Ok(vec![gx, gs])
        }))
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar(&self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        if s.value().numel() != 1 {
            return Err(Error::shape("mul_scalar", format!("scalar expected, got {:?}", s.shape())));
        }
        let sv = s.value().item();
        let y = x.value().scale(sv);
        let xv = x.shared();
        let s_shape = s.shape().to_vec();
        Ok(self.custom("mul_scalar", y, &[x, s], move |g, need| {
            Ok(vec![
                need[0].then(|| g.scale(sv)),
                need[1].then(|| Tensor::full(s_shape, g.dot(&xv))),
            ])
        }))
    }

    pub fn conv3d(&self, x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>, spec: &ConvSpec) -> Result<Var<T>> {
        let y = ops::conv3d(x.value(), spec, weight.value(), bias.map(|b| b.value()))?;
        let (xv, wv, spec) = (x.shared(), weight.shared(), *spec);
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.custom("conv3d", y, &inputs, move |g, need| {
            let (gx, gw, gb) = ops::conv3d_backward(
                &xv,
                &spec,
                &wv,
                g,
                [need[0], need[1], need.get(2).copied().unwrap_or(false)],
            )?;
            let mut out = vec![gx, gw];
            if need.len() == 3 {
                out.push(gb);
            }
            Ok(out)
        }))
    }

    pub fn conv_transpose3d(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        spec: &ConvSpec,
    ) -> Result<Var<T>> {
        let y = ops::conv_transpose3d(x.value(), spec, weight.value(), bias.map(|b| b.value()))?;
        let (xv, wv, spec) = (x.shared(), weight.shared(), *spec);
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.custom("conv_transpose3d", y, &inputs, move |g, need| {
            let (gx, gw, gb) = ops::conv_transpose3d_backward(
                &xv,
                &spec,
                &wv,
                g,
                [need[0], need[1], need.get(2).copied().unwrap_or(false)],
            )?;
            let mut out = vec![gx, gw];
            if need.len() == 3 {
                out.push(gb);
            }
            Ok(out)
        }))
    }

    // ---- normalization ---------------------------------------------------

    /// Batch norm; in train mode also returns the batch statistics so the
    /// caller can update its running estimates.
    pub fn batch_norm3d(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        running: Option<&RunningStats<T>>,
        mode: NormMode,
    ) -> Result<(Var<T>, Option<BatchStats>)> {
        let fwd = ops::batch_norm_forward(x.value(), gamma.value(), beta.value(), running, mode)?;
        let stats = (mode == NormMode::Train).then(|| BatchStats {
            mean: fwd.mean.clone(),
            var_unbiased: ops::unbiased(&fwd.var, fwd.count),
        });
        let xhat = Arc::new(fwd.xhat);
        let inv_std = fwd.inv_std;
        let gv = gamma.shared();
        let n = fwd.count;
        let y = self.custom("batch_norm3d", fwd.y, &[x, gamma, beta], move |g, need| {
            let c = g.channels();
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for ch in 0..c {
                for (&gi, &hi) in g.channel(ch).iter().zip(xhat.channel(ch)) {
                    sum_g[ch] += gi.as_f64();
                    sum_gx[ch] += gi.as_f64() * hi.as_f64();
                }
            }
            let gx = need[0].then(|| {
                let mut gx = Tensor::zeros(g.shape());
                let d = gx.data_mut();
                for ch in 0..c {
                    let k = gv.data()[ch].as_f64() * inv_std[ch];
                    for (j, (&gi, &hi)) in g.channel(ch).iter().zip(xhat.channel(ch)).enumerate() {
                        let v = match mode {
                            NormMode::Train => {
                                k * (gi.as_f64() - sum_g[ch] / n as f64 - hi.as_f64() * sum_gx[ch] / n as f64)
                            }
                            NormMode::Eval => k * gi.as_f64(),
                        };
                        d[ch * n + j] = T::of(v);
                    }
                }
                gx
            });
            let gg = need[1].then(|| Tensor::from_fn([c], |ch| T::of(sum_gx[ch])));
            let gb = need[2].then(|| Tensor::from_fn([c], |ch| T::of(sum_g[ch])));
            Ok(vec![gx, gg, gb])
        });
        Ok((y, stats))
    }

    /// Layer norm over the trailing `extent`.
    pub fn layer_norm(&self, x: &Var<T>, extent: usize, gamma: &Var<T>, beta: &Var<T>) -> Result<Var<T>> {
        let fwd = ops::layer_norm_forward(x.value(), extent, gamma.value(), beta.value())?;
        let xhat = Arc::new(fwd.xhat);
        let inv_std = fwd.inv_std;
        let gv = gamma.shared();
        Ok(self.custom("layer_norm", fwd.y, &[x, gamma, beta], move |g, need| {
            let rows = g.numel() / extent;
            let mut gg = vec![0.0; extent];
            let mut gb = vec![0.0; extent];
            let mut gx = Tensor::zeros(g.shape());
            for r in 0..rows {
                let gr = &g.data()[r * extent..(r + 1) * extent];
                let hr = &xhat.data()[r * extent..(r + 1) * extent];
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for j in 0..extent {
                    let (gi, hi) = (gr[j].as_f64(), hr[j].as_f64());
                    gg[j] += gi * hi;
                    gb[j] += gi;
                    let gh = gi * gv.data()[j].as_f64();
                    s1 += gh;
                    s2 += gh * hi;
                }
                if need[0] {
                    let n = extent as f64;
                    for j in 0..extent {
                        let gh = gr[j].as_f64() * gv.data()[j].as_f64();
                        let v = inv_std[r] * (gh - s1 / n - hr[j].as_f64() * s2 / n);
                        gx.data_mut()[r * extent + j] = T::of(v);
                    }
                }
            }
            Ok(vec![
                need[0].then_some(gx),
                need[1].then(|| Tensor::from_fn([extent], |j| T::of(gg[j]))),
                need[2].then(|| Tensor::from_fn([extent], |j| T::of(gb[j]))),
            ])
        }))
    }

    pub fn softmax(&self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        let y = ops::softmax(x.value(), axis)?;
        let (outer, n, inner) = ops::axis_layout(x.shape(), axis)?;
        let yv = Arc::new(y.clone());
        Ok(self.custom("softmax", y, &[x], move |g, _| {
            let mut gx = Tensor::zeros(g.shape());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: T = (0..n).map(|k| g.data()[at(k)] * yv.data()[at(k)]).sum();
                    for k in 0..n {
                        gx.data_mut()[at(k)] = yv.data()[at(k)] * (g.data()[at(k)] - dot);
                    }
                }
            }
            Ok(vec![Some(gx)])
        }))
    }

    /// Train-mode inverted dropout with a deterministic mask.
    pub fn dropout(&self, x: &Var<T>, p: f64, seed: u64) -> Result<Var<T>> {
        if p == 0.0 {
            ops::dropout(x.value(), p, seed, true)?;
            return Ok(x.clone());
        }
        let mask = Arc::new(ops::dropout_mask::<T>(x.shape(), p, seed)?);
        let y = x.value().zip_map(&mask, |a, m| a * m)?;
        Ok(self.custom("dropout", y, &[x], move |g, _| Ok(vec![Some(g.zip_map(&mask, |a, m| a * m)?)])))
    }

    pub fn upsample_trilinear(&self, x: &Var<T>, out: [usize; 3]) -> Result<Var<T>> {
        let y = ops::upsample_trilinear(x.value(), out)?;
        let input = x.value().dims3("upsample_trilinear")?;
        Ok(self.custom("upsample_trilinear", y, &[x], move |g, _| {
            Ok(vec![Some(ops::upsample_trilinear_backward(g, input))])
        }))
    }
}

fn transpose<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut t = Tensor::zeros([n, m]);
    let d = t.data_mut();
    for i in 0..m {
        for j in 0..n {
            d[j * m + i] = a.data()[i * n + j];
        }
    }
    t
}
