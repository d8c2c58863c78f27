use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which spatial index varies fastest along a scan.
///
/// With extents `(D, H, W)` the visiting orders, outermost first, are
/// `H: (d, w, h)`, `W: (h, d, w)`, `D: (h, w, d)` and `HW: (d, h, w)`, the
/// last one rasterizing each depth slice in turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanAxis {
    H,
    W,
    D,
    HW,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScanOrder {
    pub axis: ScanAxis,
    pub direction: Direction,
}

impl ScanOrder {
    pub const fn forward(axis: ScanAxis) -> Self {
        Self {
            axis,
            direction: Direction::Forward,
        }
    }

    pub const fn reverse(axis: ScanAxis) -> Self {
        Self {
            axis,
            direction: Direction::Reverse,
        }
    }

    pub fn all() -> [ScanOrder; 8] {
        let mut out = [Self::forward(ScanAxis::H); 8];
        let axes = [ScanAxis::H, ScanAxis::W, ScanAxis::D, ScanAxis::HW];
        for (i, &axis) in axes.iter().enumerate() {
            out[2 * i] = Self::forward(axis);
            out[2 * i + 1] = Self::reverse(axis);
        }
        out
    }

    /// `map[j]` is the row-major spatial offset visited at sequence position `j`.
    pub fn index_map(&self, dims: [usize; 3]) -> Vec<usize> {
        let [d, h, w] = dims;
        let offset = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
        let mut map = Vec::with_capacity(d * h * w);
        match self.axis {
            ScanAxis::H => {
                for z in 0..d {
                    for x in 0..w {
                        for y in 0..h {
                            map.push(offset(z, y, x));
                        }
                    }
                }
            }
            ScanAxis::W => {
                for y in 0..h {
                    for z in 0..d {
                        for x in 0..w {
                            map.push(offset(z, y, x));
                        }
                    }
                }
            }
            ScanAxis::D => {
                for y in 0..h {
                    for x in 0..w {
                        for z in 0..d {
                            map.push(offset(z, y, x));
                        }
                    }
                }
            }
            ScanAxis::HW => map.extend(0..d * h * w),
        }
        if self.direction == Direction::Reverse {
            map.reverse();
        }
        map
    }
}

fn invert(map: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; map.len()];
    for (j, &s) in map.iter().enumerate() {
        inv[s] = j;
    }
    inv
}

/// `(C, D, H, W)` volume to a `(C, L)` sequence in scan order.
pub fn flatten_volume<T: Scalar>(x: &Tensor<T>, order: ScanOrder) -> Result<Tensor<T>> {
    let dims = x.dims3("flatten_volume")?;
    let map = order.index_map(dims);
    let c = x.channels();
    let l = map.len();
    let mut out = Vec::with_capacity(c * l);
    for ch in 0..c {
        let src = x.channel(ch);
        out.extend(map.iter().map(|&s| src[s]));
    }
    Tensor::new([c, l], out)
}

/// Inverse of [`flatten_volume`].
pub fn unflatten_volume<T: Scalar>(seq: &Tensor<T>, order: ScanOrder, dims: [usize; 3]) -> Result<Tensor<T>> {
    let l = dims.iter().product::<usize>();
    if seq.rank() != 2 || seq.shape()[1] != l {
        return Err(Error::shape(
            "unflatten_volume",
            format!("sequence {:?} for volume {dims:?}", seq.shape()),
        ));
    }
    let map = order.index_map(dims);
    let c = seq.shape()[0];
    let mut out = vec![T::zero(); c * l];
    for ch in 0..c {
        let src = &seq.data()[ch * l..(ch + 1) * l];
        let dst = &mut out[ch * l..(ch + 1) * l];
        for (j, &s) in map.iter().enumerate() {
            dst[s] = src[j];
        }
    }
    Tensor::new([c, dims[0], dims[1], dims[2]], out)
}

impl<T: Scalar> Tape<T> {
    pub fn flatten_volume(&self, x: &Var<T>, order: ScanOrder) -> Result<Var<T>> {
        let dims = x.value().dims3("flatten_volume")?;
        let map = Arc::new(order.index_map(dims));
        let c = x.shape()[0];
        let l = map.len();
        self.permute_inner(x, map, &[c, l])
    }

    pub fn unflatten_volume(&self, seq: &Var<T>, order: ScanOrder, dims: [usize; 3]) -> Result<Var<T>> {
        let l = dims.iter().product::<usize>();
        if seq.shape().len() != 2 || seq.shape()[1] != l {
            return Err(Error::shape(
                "unflatten_volume",
                format!("sequence {:?} for volume {dims:?}", seq.shape()),
            ));
        }
        let inv = Arc::new(invert(&order.index_map(dims)));
        self.permute_inner(seq, inv, &[seq.shape()[0], dims[0], dims[1], dims[2]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_slice() {
        let dims = [1, 2, 2];
        assert_eq!(ScanOrder::forward(ScanAxis::W).index_map(dims), vec![0, 1, 2, 3]);
        assert_eq!(ScanOrder::forward(ScanAxis::H).index_map(dims), vec![0, 2, 1, 3]);
        assert_eq!(ScanOrder::reverse(ScanAxis::W).index_map(dims), vec![3, 2, 1, 0]);
        assert_eq!(
            ScanOrder::forward(ScanAxis::HW).index_map(dims),
            ScanOrder::forward(ScanAxis::W).index_map(dims)
        );
    }

    #[test]
    fn maps_are_permutations_and_distinct() {
        let dims = [2, 3, 4];
        let maps: Vec<_> = ScanOrder::all().iter().map(|o| o.index_map(dims)).collect();
        for m in &maps {
            let mut s = m.clone();
            s.sort_unstable();
            assert_eq!(s, (0..24).collect::<Vec<_>>());
        }
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(maps[i], maps[j], "{:?} vs {:?}", ScanOrder::all()[i], ScanOrder::all()[j]);
            }
        }
    }

    #[test]
    fn depth_axis_is_innermost() {
        let map = ScanOrder::forward(ScanAxis::D).index_map([3, 2, 2]);
        assert_eq!(&map[..3], &[0, 4, 8]);
    }

    #[test]
    fn round_trip_every_order() {
        let x = Tensor::<f64>::from_fn([2, 3, 4, 5], |i| i as f64);
        for order in ScanOrder::all() {
            let seq = flatten_volume(&x, order).unwrap();
            assert_eq!(seq.shape(), &[2, 60]);
            assert_eq!(unflatten_volume(&seq, order, [3, 4, 5]).unwrap(), x);
        }
    }

    #[test]
    fn tape_ops_match_kernels() {
        let x = Tensor::<f64>::from_fn([2, 2, 3, 2], |i| (i * 7 % 5) as f64);
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        for order in ScanOrder::all() {
            let s = tape.flatten_volume(&v, order).unwrap();
            assert_eq!(s.value(), &flatten_volume(&x, order).unwrap());
            let back = tape.unflatten_volume(&s, order, [2, 3, 2]).unwrap();
            assert_eq!(back.value(), &x);
        }
    }
}
