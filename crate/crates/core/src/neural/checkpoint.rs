//! Little-endian binary container for a [`DriftModel`].
//!
//! Layout: magic, version, geometry hash, the eight model sizes, the
//! normalization statistics, then every tensor as name, shape, trainable
//! flag and values.

use std::path::Path;

use super::model::{DriftModel, ModelConfig, ModelParams, PARAM_NAMES};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::preprocess::NormStats;

const MAGIC: &[u8; 8] = b"DRIFTCKP";
const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.path, 0, format!("byte {}: {}", self.pos, msg.into()))
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail("unexpected end of checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.fail(format!("size {v} out of range")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.fail("invalid utf-8 string"))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(self.fail(format!("array of {n} values exceeds file size")));
        }
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn config_fields(c: &ModelConfig) -> [usize; 8] {
    [
        c.channels,
        c.nodes,
        c.branch_width1,
        c.branch_width2,
        c.fused_width,
        c.feature_side,
        c.grid_px,
        c.decoder_width,
    ]
}

pub fn to_bytes(model: &DriftModel) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&model.geometry_hash);
    for v in config_fields(&model.config) {
        w.u64(v as u64);
    }
    w.f64s(&model.norm.mean);
    w.f64s(&model.norm.std);
    w.u32(model.params.tensors.len() as u32);
    for ((t, name), trainable) in model.params.tensors.iter().zip(PARAM_NAMES).zip(&model.params.trainable) {
        w.str(name);
        w.u32(t.shape().len() as u32);
        for d in t.shape() {
            w.u64(*d as u64);
        }
        w.0.push(*trainable as u8);
        w.f64s(t.data());
    }
    w.0
}

pub fn from_bytes(buf: &[u8], path: &Path) -> Result<DriftModel> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(r.fail("not a model checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let geometry_hash = r.str()?;
    let mut f = [0usize; 8];
    for v in f.iter_mut() {
        *v = r.usize()?;
    }
    let config = ModelConfig {
        channels: f[0],
        nodes: f[1],
        branch_width1: f[2],
        branch_width2: f[3],
        fused_width: f[4],
        feature_side: f[5],
        grid_px: f[6],
        decoder_width: f[7],
    };
    config.validate()?;
    let norm = NormStats {
        mean: r.f64s()?,
        std: r.f64s()?,
    };
    Error::check_dim("normalization channels", config.channels, norm.mean.len())?;
    Error::check_dim("normalization channels", config.channels, norm.std.len())?;
    let count = r.u32()? as usize;
    Error::check_dim("checkpoint tensor count", PARAM_NAMES.len(), count)?;
    let mut tensors = Vec::with_capacity(count);
    let mut trainable = Vec::with_capacity(count);
    for expected in PARAM_NAMES {
        let name = r.str()?;
        if name != expected {
            return Err(r.fail(format!("expected tensor `{expected}`, found `{name}`")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let flag = r.take(1)?[0];
        if flag > 1 {
            return Err(r.fail(format!("invalid trainable flag {flag}")));
        }
        trainable.push(flag == 1);
        tensors.push(Tensor::new(shape, r.f64s()?)?);
    }
    if r.pos != buf.len() {
        return Err(r.fail("trailing bytes"));
    }
    let params = ModelParams { tensors, trainable };
    params.check(&config)?;
    Ok(DriftModel {
        config,
        params,
        norm,
        geometry_hash,
    })
}

pub fn save_checkpoint(model: &DriftModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DriftModel> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::model::tests::tiny_config;
    use crate::neural::model::ANC_LINEAR;

    #[test]
    fn round_trip_is_exact() {
        let mut m = DriftModel::with_config(tiny_config(), "abc".into(), 9).unwrap();
        m.params.set_trainable_only(&ANC_LINEAR);
        m.norm = NormStats {
            mean: vec![-55.5, 1.0 / 3.0],
            std: vec![2.0, 0.1],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = DriftModel::with_config(tiny_config(), "abc".into(), 9).unwrap();
        let bytes = to_bytes(&m);
        let p = Path::new("x");
        assert!(from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        assert!(from_bytes(b"NOTACKPT", p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra, p).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(from_bytes(&v2, p).is_err());
    }
}
