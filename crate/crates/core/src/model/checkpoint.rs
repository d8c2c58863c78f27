use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::Result;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::net::MmriNet;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MMRI";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A network together with its trained state.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub net: MmriNet,
    pub store: ParamStore<f32>,
}

fn write_config(w: &mut Writer, c: &ModelConfig) {
    w.u32(c.in_channels as u32);
    for &s in &c.stage_channels {
        w.u32(s as u32);
    }
    w.u32(c.num_classes as u32);
    w.f64(c.dropout);
    w.u32(c.groups as u32);
    w.u32(c.d_state as u32);
    w.u32(c.se_ratio as u32);
    w.u32(c.dpfr_dilation as u32);
    for &x in &c.ds_weights {
        w.f64(x);
    }
    w.u8(c.dpfr as u8);
    w.u8(c.pfa as u8);
    w.u8(c.deep_supervision as u8);
}

fn read_config(r: &mut Reader<'_>) -> Result<ModelConfig> {
    let mut u = || r.u32().map(|v| v as usize);
    let in_channels = u()?;
    let stage_channels = [u()?, u()?, u()?, u()?];
    let num_classes = u()?;
    let dropout = r.f64()?;
    let mut u = || r.u32().map(|v| v as usize);
    let groups = u()?;
    let d_state = u()?;
    let se_ratio = u()?;
    let dpfr_dilation = u()?;
    let ds_weights = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
    let mut flag = || -> Result<bool> {
        match r.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(r.malformed(format!("flag byte {v}"))),
        }
    };
    Ok(ModelConfig {
        in_channels,
        stage_channels,
        num_classes,
        dropout,
        groups,
        d_state,
        se_ratio,
        dpfr_dilation,
        ds_weights,
        dpfr: flag()?,
        pfa: flag()?,
        deep_supervision: flag()?,
    })
}

fn write_record(w: &mut Writer, name: &str, t: &Tensor<f32>) {
    w.u32(name.len() as u32);
    w.bytes(name.as_bytes());
    w.u32(t.rank() as u32);
    for &e in t.shape() {
        w.u32(e as u32);
    }
    w.f32_slice(t.data());
}

/// Write `config` and every parameter and running statistic of `store`.
pub fn save_checkpoint(path: impl AsRef<Path>, config: &ModelConfig, store: &ParamStore<f32>) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    write_config(&mut w, config);
    w.u32((store.params().len() + 2 * store.buffers().len()) as u32);
    for p in store.params() {
        write_record(&mut w, &p.name, &p.value);
    }
    for b in store.buffers() {
        write_record(&mut w, &format!("{}.mean", b.name), &b.stats.mean);
        write_record(&mut w, &format!("{}.var", b.name), &b.stats.var);
    }
    write_file(path.as_ref(), &w.buf)
}

/// Rebuild the network described by the file and restore its state.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let config = read_config(&mut r)?;
    config
        .validate()
        .map_err(|e| r.malformed(format!("config block: {e}")))?;
    let (net, mut store) = MmriNet::new::<f32>(config.clone(), 0)?;
    let count = r.u32()? as usize;
    let expected = store.params().len() + 2 * store.buffers().len();
    if count != expected {
        return Err(r.malformed(format!("{count} records, the configuration has {expected}")));
    }
    let mut seen = vec![false; expected];
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.malformed("record name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product::<usize>();
        let data = r.f32_vec(numel)?;
        let (slot, target) = locate(&mut store, &name).ok_or_else(|| r.malformed(format!("unknown record {name:?}")))?;
        if seen[slot] {
            return Err(r.malformed(format!("duplicate record {name:?}")));
        }
        seen[slot] = true;
        if target.shape() != shape.as_slice() {
            return Err(r.malformed(format!(
                "record {name:?} has shape {shape:?}, expected {:?}",
                target.shape()
            )));
        }
        target.data_mut().copy_from_slice(&data);
    }
    if !r.is_at_end() {
        return Err(r.malformed("trailing bytes after the last record"));
    }
    Ok(Checkpoint { config, net, store })
}

fn locate<'s>(store: &'s mut ParamStore<f32>, name: &str) -> Option<(usize, &'s mut Tensor<f32>)> {
    let np = store.params().len();
    if let Some(i) = store.params().iter().position(|p| p.name == name) {
        return Some((i, store.param_by_index_mut(i)));
    }
    let (base, field) = name.rsplit_once('.')?;
    let j = store.buffers().iter().position(|b| b.name == base)?;
    let stats = store.buffer_mut(j);
    match field {
        "mean" => Some((np + 2 * j, &mut stats.mean)),
        "var" => Some((np + 2 * j + 1, &mut stats.var)),
        _ => None,
    }
}

impl From<Checkpoint> for (MmriNet, ParamStore<f32>) {
    fn from(c: Checkpoint) -> Self {
        (c.net, c.store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn small() -> ModelConfig {
        ModelConfig {
            stage_channels: [4, 8, 16, 32],
            d_state: 4,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (_, mut store) = MmriNet::new::<f32>(small(), 5).unwrap();
        store.buffer_mut(0).mean.data_mut()[0] = 0.125;
        save_checkpoint(&path, &small(), &store).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, small());
        for (a, b) in store.params().iter().zip(back.store.params()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        for (a, b) in store.buffers().iter().zip(back.store.buffers()) {
            assert_eq!(a.stats, b.stats);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (_, store) = MmriNet::new::<f32>(small(), 5).unwrap();
        save_checkpoint(&path, &small(), &store).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Truncated { .. })));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic { .. })));

        let mut bad = bytes;
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::UnsupportedVersion { found: 9, .. })));
    }
}
