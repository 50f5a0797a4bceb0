//! Binary weight files.
//!
//! Little-endian layout: magic `CSIW`, `u16` version, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u8` trainable flag,
//! `u8` dtype (0 = f32, 1 = f64), `u32` rank, `u32` dims and raw values.
//! Tensors are written in name order as f64; f32 files are accepted on load.

use std::fs;
use std::path::Path;

use super::refiner::RefinerModel;
use crate::error::{Error, Result};
use crate::tensor_core::{ParamStore, Tensor};

pub const WEIGHT_MAGIC: &[u8; 4] = b"CSIW";
pub const WEIGHT_VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

pub fn encode_store(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.trainable as u8);
        out.push(DTYPE_F64);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "weight file truncated reading {what} at byte {} ({} bytes total)",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_store(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.bytes(4, "magic")?;
    if magic != WEIGHT_MAGIC {
        return Err(Error::Format(format!(
            "bad weight-file magic {:?}, expected \"CSIW\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u16("version")?;
    if version != WEIGHT_VERSION {
        return Err(Error::Format(format!("unsupported weight-file version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.bytes(len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let trainable = match r.u8("trainable flag")? {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("{name}: bad trainable flag {f}"))),
        };
        let dtype = r.u8("dtype")?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("{name}: shape {shape:?} overflows")))?;
        let data = match dtype {
            DTYPE_F32 => r
                .bytes(n.saturating_mul(4), &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DTYPE_F64 => r
                .bytes(n.saturating_mul(8), &name)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            d => return Err(Error::Format(format!("{name}: unknown dtype {d}"))),
        };
        store
            .insert(name.clone(), Tensor::new(&shape, data)?, trainable)
            .map_err(|_| Error::Format(format!("duplicate tensor name {name:?}")))?;
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            buf.len() - r.pos
        )));
    }
    Ok(store)
}

pub fn write_weight_file(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_store(store)).map_err(|e| Error::io(path, e))
}

pub fn read_weight_file(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_store(&bytes)
}

impl RefinerModel {
    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        write_weight_file(self.params(), path)
    }

    /// Overwrites every parameter from `store`, which must hold exactly the
    /// model's names with matching shapes. Trainable flags stay as the
    /// freeze policy sets them.
    pub fn assign_weights(&mut self, store: &ParamStore) -> Result<()> {
        let extra: Vec<&str> = store.names().filter(|n| !self.params().contains(n)).collect();
        if !extra.is_empty() {
            return Err(Error::Format(format!("unknown tensor names: {}", extra.join(", "))));
        }
        let missing: Vec<&str> = self.params().names().filter(|n| !store.contains(n)).collect();
        if !missing.is_empty() {
            return Err(Error::Format(format!("missing tensors: {}", missing.join(", "))));
        }
        self.assign_subset(store)
    }

    fn assign_subset(&mut self, store: &ParamStore) -> Result<()> {
        for (name, p) in store.iter() {
            let want = self
                .params()
                .get(name)
                .map(|q| q.value.shape().to_vec())
                .unwrap_or_default();
            if p.value.shape() != want.as_slice() {
                return Err(Error::Format(format!(
                    "{name}: file shape {:?} does not match model shape {want:?}",
                    p.value.shape()
                )));
            }
        }
        for (name, p) in store.iter() {
            self.set_param(name, p.value.clone())?;
        }
        Ok(())
    }

    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let store = read_weight_file(path)?;
        self.assign_weights(&store)
    }

    /// Loads externally exported backbone weights. Only `backbone.*` and
    /// `pos_encoding` tensors are accepted; any subset of them may be given.
    pub fn import_backbone(&mut self, path: impl AsRef<Path>) -> Result<usize> {
        let store = read_weight_file(path)?;
        let bad: Vec<&str> = store
            .names()
            .filter(|n| !(n.starts_with("backbone.") || *n == "pos_encoding") || !self.params().contains(n))
            .collect();
        if !bad.is_empty() {
            return Err(Error::Format(format!(
                "not backbone tensors of this model: {}",
                bad.join(", ")
            )));
        }
        self.assign_subset(&store)?;
        Ok(store.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BackboneConfig, Variant};

    fn model(seed: u64) -> RefinerModel {
        let mut c = BackboneConfig::new(Variant::Llm, 4);
        c.d_em = 8;
        c.n_heads = 2;
        c.d_ff = 16;
        c.n_layers = 1;
        RefinerModel::new(c, 2, 4, 1, seed).unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.csiw"), dir.path().join("b.csiw"));
        let m = model(1);
        m.save_weights(&a).unwrap();
        let mut other = model(2);
        other.load_weights(&a).unwrap();
        other.save_weights(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        for (name, p) in m.params().iter() {
            assert!(p.value.bit_eq(&other.params().get(name).unwrap().value));
        }
    }

    #[test]
    fn rejects_corruption() {
        let m = model(1);
        let bytes = encode_store(m.params());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_store(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_store(&bad).unwrap_err().to_string().contains("version"));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_store(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_store(&long).is_err());
    }

    #[test]
    fn rejects_extra_and_mismatched_tensors() {
        let mut m = model(1);
        let mut store = m.params().clone();
        store.insert("rogue.tensor", Tensor::zeros(&[2]), true).unwrap();
        let err = m.assign_weights(&store).unwrap_err().to_string();
        assert!(err.contains("rogue.tensor"), "{err}");

        let mut c = m.config().clone();
        c.d_ff = 12;
        let wider = RefinerModel::new(c, 2, 4, 1, 0).unwrap();
        let err = m.assign_weights(wider.params()).unwrap_err().to_string();
        assert!(err.contains("mlp"), "{err}");
    }

    #[test]
    fn f32_payload_is_promoted() {
        let mut buf = Vec::new();
        buf.extend_from_slice(WEIGHT_MAGIC);
        buf.extend_from_slice(&1u16.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(b"x");
        buf.extend_from_slice(&[0, DTYPE_F32]);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&1.5f32.to_le_bytes());
        buf.extend_from_slice(&(-2.0f32).to_le_bytes());
        let s = decode_store(&buf).unwrap();
        let p = s.get("x").unwrap();
        assert!(!p.trainable);
        assert_eq!(p.value.data(), &[1.5, -2.0]);
    }

    #[test]
    fn backbone_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.csiw");
        let src = model(5);
        let mut bb = ParamStore::new();
        for (name, p) in src.params().iter().filter(|(n, _)| n.starts_with("backbone.")) {
            bb.insert(name, p.value.clone(), false).unwrap();
        }
        write_weight_file(&bb, &path).unwrap();
        let mut dst = model(6);
        assert_eq!(dst.import_backbone(&path).unwrap(), bb.len());
        for (name, p) in dst.params().iter() {
            let same = p.value.bit_eq(&src.params().get(name).unwrap().value);
            if name.starts_with("backbone.") {
                assert!(same, "{name}");
            }
        }
        assert!(!dst
            .params()
            .get("embed.w")
            .unwrap()
            .value
            .bit_eq(&src.params().get("embed.w").unwrap().value));
        bb.insert("embed.w", Tensor::zeros(&[4, 8]), true).unwrap();
        write_weight_file(&bb, &path).unwrap();
        assert!(dst.import_backbone(&path).unwrap_err().to_string().contains("embed.w"));
    }
}
