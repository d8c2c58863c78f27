//! 3D convolution and transposed convolution on `(C, D, H, W)` tensors.
//!
//! Both directions share one im2col/GEMM engine. A transposed convolution is
//! evaluated as the input-gradient of the convolution that maps its output
//! shape back to its input shape, so the two are exact adjoints.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Upper bound on elements held by one im2col chunk.
const COL_BUDGET: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Cubic kernel, unit stride and dilation, no padding, one group, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [kernel; 3],
            stride: [1; 3],
            padding: [0; 3],
            dilation: [1; 3],
            groups: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = [s; 3];
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = [p; 3];
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = [d; 3];
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn bias(mut self, b: bool) -> Self {
        self.bias = b;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.in_channels > 0
            && self.out_channels > 0
            && self.groups > 0
            && self.kernel.iter().all(|&k| k > 0)
            && self.stride.iter().all(|&s| s > 0)
            && self.dilation.iter().all(|&d| d > 0);
        if !positive {
            return Err(Error::invalid(format!(
                "conv spec has a non-positive field: {self:?}"
            )));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::invalid(format!(
                "groups = {} must divide in_channels = {} and out_channels = {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// `(out, in / groups, kd, kh, kw)`
    pub fn weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [self.out_channels, self.in_channels / self.groups, kd, kh, kw]
    }

    /// `(in, out / groups, kd, kh, kw)`, the layout used by transposed convolution.
    pub fn transposed_weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [self.in_channels, self.out_channels / self.groups, kd, kh, kw]
    }

    pub fn param_count(&self, transposed: bool) -> usize {
        let w: usize = if transposed {
            self.transposed_weight_shape().iter().product()
        } else {
            self.weight_shape().iter().product()
        };
        w + if self.bias { self.out_channels } else { 0 }
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = self.dilation[a] * (self.kernel[a] - 1) + 1;
            let padded = input[a] + 2 * self.padding[a];
            if padded < span {
                return Err(Error::shape(
                    "conv3d",
                    format!(
                        "axis {}: input extent {} with padding {} is smaller than the dilated kernel span {}",
                        AXES[a], input[a], self.padding[a], span
                    ),
                ));
            }
            out[a] = (padded - span) / self.stride[a] + 1;
        }
        Ok(out)
    }

    pub fn transposed_output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a] - 1) * self.stride[a] + self.dilation[a] * (self.kernel[a] - 1) + 1;
            if full <= 2 * self.padding[a] {
                return Err(Error::shape(
                    "conv_transpose3d",
                    format!(
                        "axis {}: non-positive output extent ({} - 2·{})",
                        AXES[a], full, self.padding[a]
                    ),
                ));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }
}

const AXES: [&str; 3] = ["D", "H", "W"];

/// Geometry of a convolution in the forward ("gather") direction.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
}

impl Geom {
    fn for_conv(spec: &ConvSpec, input: [usize; 3]) -> Result<Self> {
        Ok(Self {
            cin: spec.in_channels,
            cout: spec.out_channels,
            groups: spec.groups,
            input,
            output: spec.output_dims(input)?,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
        })
    }

    /// The convolution whose input-gradient is the given transposed convolution.
    fn for_transposed(spec: &ConvSpec, input: [usize; 3]) -> Result<Self> {
        Ok(Self {
            cin: spec.out_channels,
            cout: spec.in_channels,
            groups: spec.groups,
            input: spec.transposed_output_dims(input)?,
            output: input,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the im2col matrix for one group.
    fn krows(&self) -> usize {
        self.cin_g() * self.kvol()
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }

    /// Output rows `(od, oh)` partitioned into chunks that respect [`COL_BUDGET`].
    /// The partition depends only on the geometry, never on the thread count.
    fn chunks(&self) -> Vec<(usize, usize)> {
        let rows = self.output[0] * self.output[1];
        let wo = self.output[2];
        let per = (COL_BUDGET / (self.krows() * wo).max(1)).max(1);
        (0..rows)
            .step_by(per)
            .map(|start| (start, per.min(rows - start)))
            .collect()
    }

    fn im2col<T: Scalar>(&self, x: &[T], group: usize, chunk: (usize, usize), col: &mut [T]) {
        let [_, hi, wi] = self.input;
        let [_, ho, wo] = self.output;
        let [kd_n, kh_n, kw_n] = self.kernel;
        let (row0, nrows) = chunk;
        let n = nrows * wo;
        let in_len = self.in_len();
        let mut r = 0;
        for ci in 0..self.cin_g() {
            let xc = &x[(group * self.cin_g() + ci) * in_len..][..in_len];
            for kd in 0..kd_n {
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let dst = &mut col[r * n..(r + 1) * n];
                        for lr in 0..nrows {
                            let (od, oh) = ((row0 + lr) / ho, (row0 + lr) % ho);
                            let seg = &mut dst[lr * wo..(lr + 1) * wo];
                            let id = (od * self.stride[0] + kd * self.dilation[0]) as isize
                                - self.padding[0] as isize;
                            let ih = (oh * self.stride[1] + kh * self.dilation[1]) as isize
                                - self.padding[1] as isize;
                            if id < 0 || id >= self.input[0] as isize || ih < 0 || ih >= hi as isize
                            {
                                seg.fill(T::zero());
                                continue;
                            }
                            let base = (id as usize * hi + ih as usize) * wi;
                            for (ow, v) in seg.iter_mut().enumerate() {
                                let iw = (ow * self.stride[2] + kw * self.dilation[2]) as isize
                                    - self.padding[2] as isize;
                                *v = if iw >= 0 && iw < wi as isize {
                                    xc[base + iw as usize]
                                } else {
                                    T::zero()
                                };
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, col: &[T], group: usize, chunk: (usize, usize), gx: &mut [T]) {
        let [_, hi, wi] = self.input;
        let [_, ho, wo] = self.output;
        let [kd_n, kh_n, kw_n] = self.kernel;
        let (row0, nrows) = chunk;
        let n = nrows * wo;
        let in_len = self.in_len();
        let mut r = 0;
        for ci in 0..self.cin_g() {
            let gxc = &mut gx[(group * self.cin_g() + ci) * in_len..][..in_len];
            for kd in 0..kd_n {
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let src = &col[r * n..(r + 1) * n];
                        for lr in 0..nrows {
                            let (od, oh) = ((row0 + lr) / ho, (row0 + lr) % ho);
                            let id = (od * self.stride[0] + kd * self.dilation[0]) as isize
                                - self.padding[0] as isize;
                            let ih = (oh * self.stride[1] + kh * self.dilation[1]) as isize
                                - self.padding[1] as isize;
                            if id < 0 || id >= self.input[0] as isize || ih < 0 || ih >= hi as isize
                            {
                                continue;
                            }
                            let base = (id as usize * hi + ih as usize) * wi;
                            for (ow, &v) in src[lr * wo..(lr + 1) * wo].iter().enumerate() {
                                let iw = (ow * self.stride[2] + kw * self.dilation[2]) as isize
                                    - self.padding[2] as isize;
                                if iw >= 0 && iw < wi as isize {
                                    gxc[base + iw as usize] += v;
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }

    /// `y[cout, S_out] = W * x`, without bias.
    pub fn forward<T: Scalar>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let (s_out, s_in) = (self.out_len(), self.in_len());
        let (cin_g, cout_g, krows) = (self.cin_g(), self.cout_g(), self.krows());
        let mut y = vec![T::zero(); self.cout * s_out];
        let wo = self.output[2];
        let chunks = self.chunks();
        for g in 0..self.groups {
            let wg = MatRef {
                data: w,
                offset: g * cout_g * krows,
                rows: cout_g,
                cols: krows,
                row_stride: krows,
                col_stride: 1,
            };
            if self.is_pointwise() {
                let xg = MatRef {
                    data: x,
                    offset: g * cin_g * s_in,
                    rows: cin_g,
                    cols: s_in,
                    row_stride: s_in,
                    col_stride: 1,
                };
                gemm(T::one(), wg, xg, T::zero(), &mut y, g * cout_g * s_out, s_out);
                continue;
            }
            let blocks: Vec<Vec<T>> = chunks
                .par_iter()
                .map(|&chunk| {
                    let n = chunk.1 * wo;
                    let mut col = vec![T::zero(); krows * n];
                    self.im2col(x, g, chunk, &mut col);
                    let mut out = vec![T::zero(); cout_g * n];
                    gemm(T::one(), wg, MatRef::row_major(&col, krows, n), T::zero(), &mut out, 0, n);
                    out
                })
                .collect();
            for (&(row0, nrows), block) in chunks.iter().zip(&blocks) {
                let n = nrows * wo;
                for co in 0..cout_g {
                    let dst = (g * cout_g + co) * s_out + row0 * wo;
                    y[dst..dst + n].copy_from_slice(&block[co * n..(co + 1) * n]);
                }
            }
        }
        y
    }

    /// `gx[cin, S_in] = Wᵀ * gy` scattered back through the im2col map.
    pub fn backward_input<T: Scalar>(&self, gy: &[T], w: &[T]) -> Vec<T> {
        let (s_out, s_in) = (self.out_len(), self.in_len());
        let (cin_g, cout_g, krows) = (self.cin_g(), self.cout_g(), self.krows());
        let mut gx = vec![T::zero(); self.cin * s_in];
        let wo = self.output[2];
        let chunks = self.chunks();
        let batch = rayon::current_num_threads().max(1) * 2;
        for g in 0..self.groups {
            let wgt = MatRef {
                data: w,
                offset: g * cout_g * krows,
                rows: cout_g,
                cols: krows,
                row_stride: krows,
                col_stride: 1,
            }
            .t();
            if self.is_pointwise() {
                let gyg = MatRef {
                    data: gy,
                    offset: g * cout_g * s_out,
                    rows: cout_g,
                    cols: s_out,
                    row_stride: s_out,
                    col_stride: 1,
                };
                gemm(T::one(), wgt, gyg, T::zero(), &mut gx, g * cin_g * s_in, s_in);
                continue;
            }
            for group_of_chunks in chunks.chunks(batch) {
                let cols: Vec<Vec<T>> = group_of_chunks
                    .par_iter()
                    .map(|&(row0, nrows)| {
                        let n = nrows * wo;
                        let gyc = MatRef {
                            data: gy,
                            offset: g * cout_g * s_out + row0 * wo,
                            rows: cout_g,
                            cols: n,
                            row_stride: s_out,
                            col_stride: 1,
                        };
                        let mut col = vec![T::zero(); krows * n];
                        gemm(T::one(), wgt, gyc, T::zero(), &mut col, 0, n);
                        col
                    })
                    .collect();
                for (&chunk, col) in group_of_chunks.iter().zip(&cols) {
                    self.col2im_add(col, g, chunk, &mut gx);
                }
            }
        }
        gx
    }

    /// `gw[cout, cin/g, k] = gy * colᵀ`, summed over chunks in a fixed order.
    pub fn backward_weight<T: Scalar>(&self, x: &[T], gy: &[T]) -> Vec<T> {
        let (s_out, s_in) = (self.out_len(), self.in_len());
        let (cin_g, cout_g, krows) = (self.cin_g(), self.cout_g(), self.krows());
        let mut gw = vec![T::zero(); self.cout * krows];
        let wo = self.output[2];
        let chunks = self.chunks();
        for g in 0..self.groups {
            let off = g * cout_g * krows;
            if self.is_pointwise() {
                let gyg = MatRef {
                    data: gy,
                    offset: g * cout_g * s_out,
                    rows: cout_g,
                    cols: s_out,
                    row_stride: s_out,
                    col_stride: 1,
                };
                let xgt = MatRef {
                    data: x,
                    offset: g * cin_g * s_in,
                    rows: cin_g,
                    cols: s_in,
                    row_stride: s_in,
                    col_stride: 1,
                }
                .t();
                gemm(T::one(), gyg, xgt, T::zero(), &mut gw, off, krows);
                continue;
            }
            let partials: Vec<Vec<T>> = chunks
                .par_iter()
                .map(|&(row0, nrows)| {
                    let n = nrows * wo;
                    let mut col = vec![T::zero(); krows * n];
                    self.im2col(x, g, (row0, nrows), &mut col);
                    let gyc = MatRef {
                        data: gy,
                        offset: g * cout_g * s_out + row0 * wo,
                        rows: cout_g,
                        cols: n,
                        row_stride: s_out,
                        col_stride: 1,
                    };
                    let mut part = vec![T::zero(); cout_g * krows];
                    gemm(
                        T::one(),
                        gyc,
                        MatRef::row_major(&col, krows, n).t(),
                        T::zero(),
                        &mut part,
                        0,
                        krows,
                    );
                    part
                })
                .collect();
            let dst = &mut gw[off..off + cout_g * krows];
            for part in &partials {
                for (d, &p) in dst.iter_mut().zip(part) {
                    *d += p;
                }
            }
        }
        gw
    }
}

fn check_input<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    channels: usize,
    weight: &Tensor<T>,
    weight_shape: [usize; 5],
    bias: Option<&Tensor<T>>,
    bias_len: usize,
) -> Result<[usize; 3]> {
    let dims = x.dims3(op)?;
    if x.channels() != channels {
        return Err(Error::shape(
            op,
            format!(
                "axis C: input has {} channels, spec expects {channels}",
                x.channels()
            ),
        ));
    }
    if weight.shape() != weight_shape {
        return Err(Error::shape(
            op,
            format!(
                "weight shape {:?} does not match expected {weight_shape:?}",
                weight.shape()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [bias_len] {
            return Err(Error::shape(
                op,
                format!("bias shape {:?}, expected [{bias_len}]", b.shape()),
            ));
        }
    }
    Ok(dims)
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &Tensor<T>) {
    let per = y.len() / bias.numel();
    for (chunk, &b) in y.chunks_mut(per).zip(bias.data()) {
        for v in chunk {
            *v += b;
        }
    }
}

/// Cross-correlation of a `(C_in, D, H, W)` input with a
/// `(C_out, C_in / groups, kd, kh, kw)` weight.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let dims = check_input(
        "conv3d",
        x,
        spec.in_channels,
        weight,
        spec.weight_shape(),
        bias,
        spec.out_channels,
    )?;
    let geom = Geom::for_conv(spec, dims)?;
    let mut y = geom.forward(x.data(), weight.data());
    if let Some(b) = bias {
        add_bias(&mut y, b);
    }
    let [d, h, w] = geom.output;
    Tensor::new([spec.out_channels, d, h, w], y)
}

/// Transposed convolution; the adjoint of [`conv3d`] for the same weight.
/// `weight` has shape `(C_in, C_out / groups, kd, kh, kw)`.
pub fn conv_transpose3d<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let dims = check_input(
        "conv_transpose3d",
        x,
        spec.in_channels,
        weight,
        spec.transposed_weight_shape(),
        bias,
        spec.out_channels,
    )?;
    let geom = Geom::for_transposed(spec, dims)?;
    let mut y = geom.backward_input(x.data(), weight.data());
    if let Some(b) = bias {
        add_bias(&mut y, b);
    }
    let [d, h, w] = geom.input;
    Tensor::new([spec.out_channels, d, h, w], y)
}

/// Gradients of a [`conv3d`] call: `(d input, d weight, d bias)`.
pub(crate) fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
    need: [bool; 3],
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let geom = Geom::for_conv(spec, x.dims3("conv3d")?)?;
    let gx = need[0]
        .then(|| Tensor::new(x.shape(), geom.backward_input(gy.data(), weight.data())))
        .transpose()?;
    let gw = need[1]
        .then(|| Tensor::new(weight.shape(), geom.backward_weight(x.data(), gy.data())))
        .transpose()?;
    Ok((gx, gw, need[2].then(|| channel_sums(gy))))
}

/// Gradients of a [`conv_transpose3d`] call.
pub(crate) fn conv_transpose3d_backward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
    need: [bool; 3],
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let geom = Geom::for_transposed(spec, x.dims3("conv_transpose3d")?)?;
    let gx = need[0]
        .then(|| Tensor::new(x.shape(), geom.forward(gy.data(), weight.data())))
        .transpose()?;
    let gw = need[1]
        .then(|| Tensor::new(weight.shape(), geom.backward_weight(gy.data(), x.data())))
        .transpose()?;
    Ok((gx, gw, need[2].then(|| channel_sums(gy))))
}

pub(crate) fn channel_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let c = t.channels();
    Tensor::from_fn([c], |i| t.channel(i).iter().copied().sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_product() {
        let x = Tensor::<f64>::full([1, 1, 1, 1], 3.0);
        let w = Tensor::<f64>::full([1, 1, 1, 1, 1], 2.0);
        let y = conv3d(&x, &ConvSpec::new(1, 1, 1).bias(false), &w, None).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn depthwise_identity_kernel() {
        let x = Tensor::<f64>::from_fn([3, 4, 5, 6], |i| (i as f64 * 0.37).sin());
        let spec = ConvSpec::new(3, 3, 3).padding(1).groups(3).bias(false);
        let w = Tensor::from_fn(spec.weight_shape(), |i| if i % 27 == 13 { 1.0 } else { 0.0 });
        let y = conv3d(&x, &spec, &w, None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn transposed_broadcasts_single_voxel() {
        let x = Tensor::<f64>::full([1, 1, 1, 1], 1.0);
        let spec = ConvSpec::new(1, 1, 2).stride(2).bias(false);
        let w = Tensor::ones(spec.transposed_weight_shape());
        let y = conv_transpose3d(&x, &spec, &w, None).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn transposed_upsample_shape() {
        let x = Tensor::<f32>::zeros([16, 4, 4, 4]);
        let spec = ConvSpec::new(16, 8, 2).stride(2);
        let w = Tensor::zeros(spec.transposed_weight_shape());
        let b = Tensor::zeros([8]);
        let y = conv_transpose3d(&x, &spec, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[8, 8, 8, 8]);
    }

    #[test]
    fn errors_name_the_axis() {
        let x = Tensor::<f32>::zeros([2, 4, 4, 4]);
        let spec = ConvSpec::new(3, 1, 3);
        let w = Tensor::zeros(spec.weight_shape());
        let err = conv3d(&x, &spec, &w, None).unwrap_err().to_string();
        assert!(err.contains("axis C"), "{err}");

        let x = Tensor::<f32>::zeros([1, 4, 1, 4]);
        let spec = ConvSpec::new(1, 1, 3);
        let w = Tensor::zeros(spec.weight_shape());
        let err = conv3d(&x, &spec, &w, None).unwrap_err().to_string();
        assert!(err.contains("axis H"), "{err}");
    }

    #[test]
    fn output_extent_formula() {
        let spec = ConvSpec::new(1, 1, 3).stride(2).padding(2).dilation(2);
        // floor((9 + 4 - 4 - 1) / 2) + 1 = 5
        assert_eq!(spec.output_dims([9, 9, 9]).unwrap(), [5, 5, 5]);
        let t = ConvSpec::new(1, 1, 2).stride(2);
        assert_eq!(t.transposed_output_dims([4, 3, 1]).unwrap(), [8, 6, 2]);
    }
}
