use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Extents of a selective-scan problem: `d` channels, `n` state size, `l` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub d: usize,
    pub n: usize,
    pub l: usize,
}

fn expect(op: &'static str, what: &str, t: &Tensor<impl Scalar>, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::shape(op, format!("{what} has shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(())
}

/// Validate operand shapes: `x, delta: (d, L)`, `a: (d, N)`, `b, c: (N, L)`,
/// `d_skip: (d)`.
pub fn scan_dims<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<ScanDims> {
    const OP: &str = "selective_scan";
    if x.rank() != 2 || x.shape()[1] == 0 {
        return Err(Error::shape(OP, format!("x must be (d, L) with L >= 1, got {:?}", x.shape())));
    }
    let (d, l) = (x.shape()[0], x.shape()[1]);
    if a.rank() != 2 || a.shape()[0] != d {
        return Err(Error::shape(OP, format!("A has shape {:?}, expected ({d}, N)", a.shape())));
    }
    let n = a.shape()[1];
    expect(OP, "delta", delta, &[d, l])?;
    expect(OP, "B", b, &[n, l])?;
    expect(OP, "C", c, &[n, l])?;
    expect(OP, "D", d_skip, &[d])?;
    Ok(ScanDims { d, n, l })
}

fn transpose<T: Scalar>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for r in 0..rows {
        for (k, &v) in m[r * cols..(r + 1) * cols].iter().enumerate() {
            out[k * rows + r] = v;
        }
    }
    out
}

/// One channel of the recurrence. `bt`, `ct` are `(L, N)`; `states`, when
/// given, receives `h_1..h_L` as `(L, N)`.
#[allow(clippy::too_many_arguments)]
fn scan_channel<T: Scalar>(
    x: &[T],
    delta: &[T],
    a: &[T],
    bt: &[T],
    ct: &[T],
    skip: T,
    y: &mut [T],
    mut states: Option<&mut [T]>,
) {
    let n = a.len();
    let mut h = vec![T::zero(); n];
    for t in 0..x.len() {
        let (dt, xv) = (delta[t], x[t]);
        let b_t = &bt[t * n..(t + 1) * n];
        let c_t = &ct[t * n..(t + 1) * n];
        let mut acc = T::zero();
        for k in 0..n {
            h[k] = (dt * a[k]).exp() * h[k] + dt * b_t[k] * xv;
            acc += c_t[k] * h[k];
        }
        y[t] = acc + skip * xv;
        if let Some(s) = states.as_deref_mut() {
            s[t * n..(t + 1) * n].copy_from_slice(&h);
        }
    }
}

fn scan_impl<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
    keep_states: bool,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    let ScanDims { d, n, l } = scan_dims(x, delta, a, b, c, d_skip)?;
    let bt = transpose(b.data(), n, l);
    let ct = transpose(c.data(), n, l);
    let mut y = vec![T::zero(); d * l];
    let mut states = keep_states.then(|| vec![T::zero(); d * l * n]);
    let run = |i: usize, yi: &mut [T], si: Option<&mut [T]>| {
        scan_channel(
            &x.data()[i * l..(i + 1) * l],
            &delta.data()[i * l..(i + 1) * l],
            &a.data()[i * n..(i + 1) * n],
            &bt,
            &ct,
            d_skip.data()[i],
            yi,
            si,
        )
    };
    match states.as_mut() {
        Some(s) => y
            .par_chunks_mut(l)
            .zip(s.par_chunks_mut(l * n))
            .enumerate()
            .for_each(|(i, (yi, si))| run(i, yi, Some(si))),
        None => y.par_chunks_mut(l).enumerate().for_each(|(i, yi)| run(i, yi, None)),
    }
    Ok((Tensor::new([d, l], y)?, states))
}

/// Selective state-space scan with zero initial state:
///
/// `h_t = exp(delta_t * A) h_{t-1} + delta_t B_t x_t`, `y_t = C_t . h_t + D x_t`,
/// evaluated independently for each of the `d` channels.
///
/// ```
/// use mmrinet::{ssm::selective_scan, Tensor};
///
/// let x = Tensor::new([1, 1], vec![2.0])?;
/// let delta = Tensor::new([1, 1], vec![0.5])?;
/// let a = Tensor::new([1, 1], vec![-1.0])?;
/// let b = Tensor::new([1, 1], vec![3.0])?;
/// let c = Tensor::new([1, 1], vec![4.0])?;
/// let d = Tensor::new([1], vec![0.25])?;
/// let y = selective_scan(&x, &delta, &a, &b, &c, &d)?;
/// assert_eq!(y.data(), &[4.0 * 0.5 * 3.0 * 2.0 + 0.25 * 2.0]);
/// # Ok::<(), mmrinet::Error>(())
/// ```
pub fn selective_scan<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(scan_impl(x, delta, a, b, c, d_skip, false)?.0)
}

/// Gradients of a selective scan with respect to `(x, delta, a, b, c, d_skip)`.
#[allow(clippy::too_many_arguments)]
fn scan_backward<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
    states: &[T],
) -> [Tensor<T>; 6] {
    let (d, l) = (x.shape()[0], x.shape()[1]);
    let n = a.shape()[1];
    let bt = transpose(b.data(), n, l);
    let ct = transpose(c.data(), n, l);
    let zero = T::zero();
    let mut gx = vec![zero; d * l];
    let mut gdelta = vec![zero; d * l];
    let mut ga = vec![zero; d * n];
    let mut gbt = vec![zero; l * n];
    let mut gct = vec![zero; l * n];
    let mut gskip = vec![zero; d];
    let mut gh = vec![zero; n];
    for i in 0..d {
        let xi = &x.data()[i * l..(i + 1) * l];
        let di = &delta.data()[i * l..(i + 1) * l];
        let ai = &a.data()[i * n..(i + 1) * n];
        let gi = &g.data()[i * l..(i + 1) * l];
        let hs = &states[i * l * n..(i + 1) * l * n];
        let skip = d_skip.data()[i];
        gh.fill(zero);
        for t in (0..l).rev() {
            let (gy, xv, dt) = (gi[t], xi[t], di[t]);
            let h_t = &hs[t * n..(t + 1) * n];
            let b_t = &bt[t * n..(t + 1) * n];
            let c_t = &ct[t * n..(t + 1) * n];
            gskip[i] += gy * xv;
            let mut gxv = gy * skip;
            let mut gdt = zero;
            for k in 0..n {
                gct[t * n + k] += gy * h_t[k];
                let ghk = gh[k] + gy * c_t[k];
                let da = (dt * ai[k]).exp();
                let prev = if t > 0 { hs[(t - 1) * n + k] } else { zero };
                gdt += ghk * (prev * da * ai[k] + b_t[k] * xv);
                ga[i * n + k] += ghk * prev * da * dt;
                gbt[t * n + k] += ghk * dt * xv;
                gxv += ghk * dt * b_t[k];
                gh[k] = ghk * da;
            }
            gx[i * l + t] = gxv;
            gdelta[i * l + t] = gdt;
        }
    }
    let t2 = |v: Vec<T>| Tensor::new([n, l], transpose(&v, l, n)).expect("shape");
    [
        Tensor::new([d, l], gx).expect("shape"),
        Tensor::new([d, l], gdelta).expect("shape"),
        Tensor::new([d, n], ga).expect("shape"),
        t2(gbt),
        t2(gct),
        Tensor::new([d], gskip).expect("shape"),
    ]
}

impl<T: Scalar> Tape<T> {
    /// Differentiable [`selective_scan`].
    pub fn selective_scan(
        &self,
        x: &Var<T>,
        delta: &Var<T>,
        a: &Var<T>,
        b: &Var<T>,
        c: &Var<T>,
        d_skip: &Var<T>,
    ) -> Result<Var<T>> {
        let inputs = [x, delta, a, b, c, d_skip];
        let track = self.is_recording() && inputs.iter().any(|v| v.requires_grad());
        let (y, states) = scan_impl(x.value(), delta.value(), a.value(), b.value(), c.value(), d_skip.value(), track)?;
        let Some(states) = states else {
            return Ok(self.constant(y));
        };
        let vals: Vec<_> = inputs.iter().map(|v| v.shared()).collect();
        Ok(self.custom("selective_scan", y, &inputs, move |g, need| {
            let grads = scan_backward(g, &vals[0], &vals[1], &vals[2], &vals[3], &vals[4], &vals[5], &states);
            Ok(grads
                .into_iter()
                .zip(need)
                .map(|(gr, &nd)| nd.then_some(gr))
                .collect())
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    struct Case {
        x: Tensor<f64>,
        delta: Tensor<f64>,
        a: Tensor<f64>,
        b: Tensor<f64>,
        c: Tensor<f64>,
        skip: Tensor<f64>,
    }

    fn case(seed: u64, d: usize, n: usize, l: usize) -> Case {
        let mut rng = Rng::new(seed);
        let mut t = |shape: &[usize], lo: f64, hi: f64| Tensor::from_fn(shape.to_vec(), |_| rng.uniform_in(lo, hi));
        Case {
            x: t(&[d, l], -1.0, 1.0),
            delta: t(&[d, l], 0.05, 1.0),
            a: t(&[d, n], -2.0, -0.1),
            b: t(&[n, l], -1.0, 1.0),
            c: t(&[n, l], -1.0, 1.0),
            skip: t(&[d], -1.0, 1.0),
        }
    }

    fn naive(k: &Case) -> Tensor<f64> {
        let (d, l) = (k.x.shape()[0], k.x.shape()[1]);
        let n = k.a.shape()[1];
        let at = |m: &Tensor<f64>, r: usize, col: usize| m.data()[r * m.shape()[1] + col];
        Tensor::from_fn([d, l], |idx| {
            let (i, t_end) = (idx / l, idx % l);
            let mut h = vec![0.0; n];
            for t in 0..=t_end {
                for s in 0..n {
                    let dt = at(&k.delta, i, t);
                    h[s] = (dt * at(&k.a, i, s)).exp() * h[s] + dt * at(&k.b, s, t) * at(&k.x, i, t);
                }
            }
            (0..n).map(|s| at(&k.c, s, t_end) * h[s]).sum::<f64>() + k.skip.data()[i] * at(&k.x, i, t_end)
        })
    }

    #[test]
    fn matches_naive_loop() {
        for seed in 0..8 {
            let k = case(seed, 3, 4, 16);
            let y = selective_scan(&k.x, &k.delta, &k.a, &k.b, &k.c, &k.skip).unwrap();
            let r = naive(&k);
            for (p, q) in y.data().iter().zip(r.data()) {
                assert!((p - q).abs() <= 1e-12 * q.abs().max(1.0));
            }
        }
    }

    #[test]
    fn single_step_has_no_history() {
        let k = case(3, 2, 3, 1);
        let y = selective_scan(&k.x, &k.delta, &k.a, &k.b, &k.c, &k.skip).unwrap();
        for i in 0..2 {
            let xv = k.x.data()[i];
            let dt = k.delta.data()[i];
            let want: f64 =
                (0..3).map(|s| k.c.data()[s] * dt * k.b.data()[s] * xv).sum::<f64>() + k.skip.data()[i] * xv;
            assert!((y.data()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut k = case(4, 2, 3, 9);
        k.x = Tensor::zeros([2, 9]);
        let y = selective_scan(&k.x, &k.delta, &k.a, &k.b, &k.c, &k.skip).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let k = case(5, 2, 3, 4);
        let bad = Tensor::zeros([3, 5]);
        assert!(selective_scan(&k.x, &k.delta, &k.a, &bad, &k.c, &k.skip).is_err());
        assert!(selective_scan(&k.x, &k.delta, &k.a, &k.b, &k.c, &Tensor::zeros([3])).is_err());
    }

    #[test]
    fn recorded_and_untracked_forward_agree() {
        let k = case(6, 3, 2, 7);
        let tape = Tape::new();
        let v: Vec<_> = [&k.x, &k.delta, &k.a, &k.b, &k.c, &k.skip].iter().map(|t| tape.leaf((*t).clone())).collect();
        let y = tape.selective_scan(&v[0], &v[1], &v[2], &v[3], &v[4], &v[5]).unwrap();
        assert_eq!(y.value(), &selective_scan(&k.x, &k.delta, &k.a, &k.b, &k.c, &k.skip).unwrap());
    }
}
