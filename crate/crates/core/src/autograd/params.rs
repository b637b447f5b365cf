use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CMMDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors, iterated in lexicographic path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces the tensor at `path`, returning the old value.
    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.params.insert(path.into(), value)
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor> {
        self.params.remove(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// Writes a checkpoint: magic, version, a length-prefixed UTF-8 header
/// (empty for bare parameter stores), then every tensor in path order.
pub fn write_checkpoint<W: Write>(mut w: W, header: &str, store: &ParameterStore) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::format("checkpoint header too long"))?;
    w.write_all(&header_len.to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (path, t) in store.iter() {
        let plen = u16::try_from(path.len()).map_err(|_| Error::format(format!("path too long: {path}")))?;
        w.write_all(&plen.to_le_bytes())?;
        w.write_all(path.as_bytes())?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::format(format!("rank too large: {path}")))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(format!("checkpoint truncated while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(String, ParameterStore)> {
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    read_exact(&mut r, &mut b4, "header length")?;
    let mut header = vec![0u8; u32::from_le_bytes(b4) as usize];
    read_exact(&mut r, &mut header, "header")?;
    let header = String::from_utf8(header).map_err(|_| Error::format("header is not UTF-8"))?;

    let count = read_u64(&mut r, "parameter count")?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        read_exact(&mut r, &mut b2, "path length")?;
        let mut path = vec![0u8; u16::from_le_bytes(b2) as usize];
        read_exact(&mut r, &mut path, "path")?;
        let path = String::from_utf8(path).map_err(|_| Error::format("parameter path is not UTF-8"))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u64(&mut r, "extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        read_exact(&mut r, &mut raw, &path)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if store.insert(path.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::format(format!("duplicate parameter path {path}")));
        }
    }
    Ok((header, store))
}
