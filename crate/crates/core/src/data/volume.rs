use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MVOL_MAGIC: [u8; 4] = *b"MVOL";
pub const MVOL_VERSION: u32 = 1;
/// Bytes before the voxel payload.
pub const MVOL_HEADER_LEN: usize = 4 + 4 * 5 + 4 * 3;

/// A multi-channel `(C, D, H, W)` volume with voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Tensor<f32>,
    pub spacing: [f32; 3],
}

impl Volume {
    pub fn new(data: Tensor<f32>, spacing: [f32; 3]) -> Result<Self> {
        data.dims3("volume")?;
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { data, spacing })
    }

    pub fn channels(&self) -> usize {
        self.data.channels()
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn spacing_f64(&self) -> [f64; 3] {
        self.spacing.map(f64::from)
    }

    pub fn expect_channels(&self, c: usize, what: &str) -> Result<()> {
        if self.channels() != c {
            return Err(Error::shape(
                "volume",
                format!("{what} must have {c} channels, got {}", self.channels()),
            ));
        }
        Ok(())
    }
}

/// Serialize to the MVOL layout: magic, version, `C, D, H, W` as `u32`, three
/// `f32` spacings, then the voxels as little-endian `f32`.
pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.reserve(MVOL_HEADER_LEN + 4 * v.data.numel());
    w.bytes(&MVOL_MAGIC);
    w.u32(MVOL_VERSION);
    for &e in v.data.shape() {
        w.u32(e as u32);
    }
    for &s in &v.spacing {
        w.f32(s);
    }
    w.f32_slice(v.data.data());
    w.buf
}

pub fn decode_volume(path: &Path, bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader::new(path, bytes);
    r.magic(MVOL_MAGIC)?;
    r.version(MVOL_VERSION)?;
    let shape = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|e| e as usize);
    if shape.contains(&0) {
        return Err(r.malformed(format!("zero extent in {shape:?}")));
    }
    let spacing = [r.f32()?, r.f32()?, r.f32()?];
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| r.malformed("extents overflow"))?;
    let data = r.f32_vec(numel)?;
    if !r.is_at_end() {
        return Err(r.malformed("trailing bytes after the payload"));
    }
    Volume::new(Tensor::new(shape, data)?, spacing).map_err(|e| r.malformed(e.to_string()))
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_volume(v))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    decode_volume(path, &read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn random_volume(seed: u64) -> Volume {
        let mut rng = Rng::new(seed);
        let t = Tensor::from_fn([4, 8, 8, 8], |_| rng.normal() as f32);
        Volume::new(t, [1.0, 0.9, 1.2]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mvol");
        let v = random_volume(1);
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        let bits = |v: &Volume| v.data.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&v), bits(&back));
        assert_eq!(v.spacing, back.spacing);
        assert_eq!(v.data.shape(), back.data.shape());
    }

    #[test]
    fn error_categories_are_distinct() {
        let p = Path::new("mem.mvol");
        let bytes = encode_volume(&random_volume(2));
        assert!(matches!(decode_volume(p, &bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(decode_volume(p, &bytes[..10]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NIFT");
        assert!(matches!(decode_volume(p, &bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes;
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_volume(p, &bad), Err(Error::UnsupportedVersion { found: 2, .. })));
    }

    #[test]
    fn header_declares_payload() {
        let v = Volume::new(Tensor::zeros([4, 16, 16, 8]), [1.0; 3]).unwrap();
        let bytes = encode_volume(&v);
        assert_eq!(bytes.len(), MVOL_HEADER_LEN + 4 * 4 * 16 * 16 * 8);
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        assert_eq!([word(2), word(3), word(4), word(5)], [4, 16, 16, 8]);
    }
}
