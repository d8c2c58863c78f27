use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::volume::Volume;

/// Standardize each channel over its non-zero voxels; zeros stay zero.
/// Channels with fewer than two non-zero voxels or zero spread pass through.
pub fn normalize_nonzero(v: &Volume) -> Volume {
    let mut out = v.clone();
    let inner = v.data.inner_len();
    let data = out.data.data_mut();
    for c in 0..v.channels() {
        let ch = &mut data[c * inner..(c + 1) * inner];
        let (n, sum) = ch
            .iter()
            .filter(|&&x| x != 0.0)
            .fold((0usize, 0.0f64), |(n, s), &x| (n + 1, s + f64::from(x)));
        if n < 2 {
            continue;
        }
        let mean = sum / n as f64;
        let var = ch
            .iter()
            .filter(|&&x| x != 0.0)
            .map(|&x| (f64::from(x) - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        if std == 0.0 {
            continue;
        }
        for x in ch.iter_mut().filter(|x| **x != 0.0) {
            *x = ((f64::from(*x) - mean) / std) as f32;
        }
    }
    out
}

/// Sub-volume offsets and extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub offset: [usize; 3],
    pub size: [usize; 3],
}

impl CropWindow {
    /// Offsets uniform over all valid positions, drawn in D, H, W order.
    pub fn sample(dims: [usize; 3], size: [usize; 3], rng: &mut Rng) -> Result<Self> {
        for (a, (&n, &s)) in ["D", "H", "W"].iter().zip(dims.iter().zip(&size)) {
            if s == 0 || s > n {
                return Err(Error::invalid(format!(
                    "crop extent {s} along axis {a} does not fit the volume extent {n}"
                )));
            }
        }
        let offset = std::array::from_fn(|a| rng.below(dims[a] - size[a] + 1));
        Ok(Self { offset, size })
    }

    pub fn apply(&self, v: &Volume) -> Result<Volume> {
        let [d, h, w] = v.dims();
        let [oz, oy, ox] = self.offset;
        let [sd, sh, sw] = self.size;
        if oz + sd > d || oy + sh > h || ox + sw > w {
            return Err(Error::invalid(format!("crop {self:?} outside extents {:?}", v.dims())));
        }
        let c = v.channels();
        let mut out = Vec::with_capacity(c * sd * sh * sw);
        for ch in v.data.data().chunks(d * h * w) {
            for z in oz..oz + sd {
                for y in oy..oy + sh {
                    let row = (z * h + y) * w + ox;
                    out.extend_from_slice(&ch[row..row + sw]);
                }
            }
        }
        Volume::new(Tensor::new([c, sd, sh, sw], out)?, v.spacing)
    }
}

/// Crop image and label with one window drawn from `rng`.
pub fn random_crop(image: &Volume, label: &Volume, size: [usize; 3], rng: &mut Rng) -> Result<(Volume, Volume)> {
    if image.dims() != label.dims() {
        return Err(Error::shape(
            "random_crop",
            format!("image extents {:?} vs label extents {:?}", image.dims(), label.dims()),
        ));
    }
    let win = CropWindow::sample(image.dims(), size, rng)?;
    Ok((win.apply(image)?, win.apply(label)?))
}

/// One draw of the augmentation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    /// Flip along D, H, W.
    pub flips: [bool; 3],
    /// Per-channel intensity factor in `[0.9, 1.1)`.
    pub scale: Vec<f64>,
    /// Per-channel intensity offset in `[-0.1, 0.1)`.
    pub shift: Vec<f64>,
}

impl AugmentParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            flips: [false; 3],
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
        }
    }

    /// Draw order: three flips, then `(scale, shift)` for each channel.
    pub fn sample(channels: usize, rng: &mut Rng) -> Self {
        let flips = std::array::from_fn(|_| rng.bernoulli(0.5));
        let mut scale = Vec::with_capacity(channels);
        let mut shift = Vec::with_capacity(channels);
        for _ in 0..channels {
            scale.push(rng.uniform_in(0.9, 1.1));
            shift.push(rng.uniform_in(-0.1, 0.1));
        }
        Self { flips, scale, shift }
    }
}

fn flip(v: &Volume, flips: [bool; 3]) -> Volume {
    if !flips.iter().any(|&f| f) {
        return v.clone();
    }
    let [d, h, w] = v.dims();
    let src = v.data.data();
    let mut out = v.clone();
    let dst = out.data.data_mut();
    let m = |i: usize, n: usize, f: bool| if f { n - 1 - i } else { i };
    for c in 0..v.channels() {
        let base = c * d * h * w;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let from = ((m(z, d, flips[0]) * h + m(y, h, flips[1])) * w) + m(x, w, flips[2]);
                    dst[base + (z * h + y) * w + x] = src[base + from];
                }
            }
        }
    }
    out
}

/// Flip image and label jointly, then map each image channel to `x * s + t`.
pub fn augment(image: &Volume, label: &Volume, p: &AugmentParams) -> Result<(Volume, Volume)> {
    if image.dims() != label.dims() {
        return Err(Error::shape(
            "augment",
            format!("image extents {:?} vs label extents {:?}", image.dims(), label.dims()),
        ));
    }
    if p.scale.len() != image.channels() || p.shift.len() != image.channels() {
        return Err(Error::invalid(format!(
            "augment parameters for {} channels applied to {}",
            p.scale.len(),
            image.channels()
        )));
    }
    let mut img = flip(image, p.flips);
    let inner = img.data.inner_len();
    for (c, ch) in img.data.data_mut().chunks_mut(inner).enumerate() {
        let (s, t) = (p.scale[c], p.shift[c]);
        if s == 1.0 && t == 0.0 {
            continue;
        }
        for x in ch {
            *x = (f64::from(*x) * s + t) as f32;
        }
    }
    Ok((img, flip(label, p.flips)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(c: usize, dims: [usize; 3], f: impl Fn(usize) -> f32) -> Volume {
        Volume::new(Tensor::from_fn([c, dims[0], dims[1], dims[2]], f), [1.0; 3]).unwrap()
    }

    #[test]
    fn two_point_standardization() {
        let v = vol(2, [1, 1, 4], |i| [0.0, 2.0, 0.0, 4.0, 0.0, 0.0, 0.0, 0.0][i]);
        let n = normalize_nonzero(&v);
        assert_eq!(n.data.data(), &[0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_nonzero_voxel_passes_through() {
        let v = vol(1, [1, 1, 3], |i| [0.0, 5.0, 0.0][i]);
        assert_eq!(normalize_nonzero(&v), v);
    }

    #[test]
    fn full_crop_is_identity() {
        let v = vol(2, [3, 4, 5], |i| i as f32);
        let mut rng = Rng::new(1);
        let (a, b) = random_crop(&v, &v, [3, 4, 5], &mut rng).unwrap();
        assert_eq!(a, v);
        assert_eq!(b, v);
    }

    #[test]
    fn oversized_crop_is_an_error() {
        let v = vol(1, [4, 4, 4], |_| 0.0);
        let e = random_crop(&v, &v, [4, 5, 4], &mut Rng::new(0)).unwrap_err();
        assert!(e.to_string().contains("axis H"));
    }

    #[test]
    fn crop_copies_the_window() {
        let v = vol(1, [4, 4, 4], |i| i as f32);
        let w = CropWindow {
            offset: [1, 2, 3],
            size: [2, 1, 1],
        };
        assert_eq!(w.apply(&v).unwrap().data.data(), &[27.0, 43.0]);
    }

    #[test]
    fn identity_augment() {
        let img = vol(4, [2, 3, 4], |i| i as f32 * 0.5);
        let lab = vol(3, [2, 3, 4], |i| (i % 2) as f32);
        let (a, b) = augment(&img, &lab, &AugmentParams::identity(4)).unwrap();
        assert_eq!((a, b), (img, lab));
    }

    #[test]
    fn flips_are_involutions_and_move_labels_with_images() {
        let img = vol(1, [2, 3, 4], |i| i as f32);
        let p = AugmentParams {
            flips: [true, false, true],
            ..AugmentParams::identity(1)
        };
        let (a, b) = augment(&img, &img, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.data.data()[0], 3.0 * 4.0 + 3.0);
        let (c, _) = augment(&a, &b, &p).unwrap();
        assert_eq!(c, img);
    }

    #[test]
    fn intensity_is_scale_then_shift() {
        let img = vol(1, [1, 1, 2], |i| [1.0, -2.0][i]);
        let p = AugmentParams {
            flips: [false; 3],
            scale: vec![1.1],
            shift: vec![-0.1],
        };
        let (a, _) = augment(&img, &img, &p).unwrap();
        assert_eq!(a.data.data(), &[(1.1f64 - 0.1) as f32, (-2.2f64 - 0.1) as f32]);
    }
}
