//! Binary model snapshots.
//!
//! Layout (all integers little-endian):
//!
//! | field | bytes |
//! |---|---|
//! | magic `HLSNAP01` | 8 |
//! | precision tag (4 or 8) | 1 |
//! | metadata length `m` | 4 |
//! | metadata, UTF-8 TOML | m |
//! | tensor count `n` | 4 |
//! | per tensor: name length, name, rank, dims (u64 each), raw data | … |

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{SmallBackbone, SmallBackboneSpec};
use crate::data::Preprocess;
use crate::error::{Error, Result};
use crate::heads::{HeadParams, HeadSpec};
use crate::model::Model;
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"HLSNAP01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub head: HeadSpec,
    pub backbone: SmallBackboneSpec,
    pub class_names: Vec<String>,
    pub preprocess: Preprocess,
    /// Pixel scale applied after decoding.
    pub scale: f32,
}

/// A loaded model at whichever precision it was saved in.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    pub fn precision(&self) -> Precision {
        match self {
            AnyModel::F32(_) => Precision::F32,
            AnyModel::F64(_) => Precision::F64,
        }
    }
}

pub fn encode<T: Scalar>(model: &Model<T>, meta: &SnapshotMeta) -> Result<Vec<u8>> {
    let meta_text = toml::to_string(meta).map_err(|e| Error::contract(format!("snapshot meta: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(T::PRECISION.bytes());
    out.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_text.as_bytes());
    let tensors = model.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>, meta: &SnapshotMeta) -> Result<()> {
    let bytes = encode(model, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| Error::data("snapshot is truncated"))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::data("snapshot string is not UTF-8"))
    }
}

fn decode_as<T: Scalar>(r: &mut Reader<'_>, meta: &SnapshotMeta) -> Result<Model<T>> {
    let count = r.u32()? as usize;
    let mut named: Vec<(String, Tensor<T>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = r.string(len)?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.bytes(numel * T::PRECISION.bytes() as usize)?;
        let data = raw.chunks(T::PRECISION.bytes() as usize).map(T::read_le).collect();
        named.push((name, Tensor::new(dims, data)?));
    }
    let mut take = |name: &str| -> Result<Tensor<T>> {
        let pos = named
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::data(format!("snapshot has no tensor `{name}`")))?;
        Ok(named.swap_remove(pos).1)
    };
    let backbone = SmallBackbone::from_named(&meta.backbone, &mut take)?;
    let head = HeadParams::from_named(&meta.head, &mut take)?;
    let model = Model {
        backbone,
        head,
        head_spec: meta.head.clone(),
    };
    let expected: Vec<(String, Vec<usize>)> = Model::<T>::build(&meta.backbone, &meta.head, 0)?
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.dims().to_vec()))
        .collect();
    let got: Vec<(String, Vec<usize>)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.dims().to_vec()))
        .collect();
    if expected != got {
        return Err(Error::data("snapshot tensors do not match its recorded architecture"));
    }
    Ok(model)
}

pub fn decode(bytes: &[u8]) -> Result<(AnyModel, SnapshotMeta)> {
    let mut r = Reader(Cursor::new(bytes));
    if r.bytes(MAGIC.len())? != MAGIC {
        return Err(Error::data("not a model snapshot (bad magic)"));
    }
    let tag = r.bytes(1)?[0];
    let precision = Precision::from_bytes(tag).ok_or_else(|| Error::data(format!("unknown precision tag {tag}")))?;
    let meta_len = r.u32()? as usize;
    let meta: SnapshotMeta =
        toml::from_str(&r.string(meta_len)?).map_err(|e| Error::data(format!("snapshot metadata: {e}")))?;
    let model = match precision {
        Precision::F32 => AnyModel::F32(decode_as(&mut r, &meta)?),
        Precision::F64 => AnyModel::F64(decode_as(&mut r, &meta)?),
    };
    Ok((model, meta))
}

pub fn load(path: &Path) -> Result<(AnyModel, SnapshotMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
