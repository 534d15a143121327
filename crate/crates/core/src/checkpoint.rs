//! Named parameter collections and the DTRC checkpoint format.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

/// Ordered collection of named tensors. Iteration order is insertion order,
/// which the checkpoint writer relies on for byte-identical round trips.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::config(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::config(format!("missing parameter {name:?}"))),
        }
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            out.add(n, t.cast()).expect("names unique by construction");
        }
        out
    }
}

/// Weight blob plus embedded configuration, as stored in a DTRC file.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub tensors: ParamSet<f32>,
    pub config: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn config_get(&self, key: &str) -> Result<&str> {
        self.config
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::config(format!("checkpoint config missing key {key:?}")))
    }

    pub fn config_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        self.config_get(key)?
            .parse()
            .map_err(|_| Error::config(format!("checkpoint config key {key:?} unparsable")))
    }
}

const DTRC_MAGIC: &[u8; 4] = b"DTRC";
const DTRC_VERSION: u16 = 1;

/// DTRC: magic `DTRC`, u16 version, u32 tensor count; per tensor u16 name
/// length, UTF-8 name, u8 rank, u32 extents, f32 LE row-major data; then a
/// u32-length-prefixed UTF-8 config block of `key=value` lines.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(DTRC_MAGIC);
    bytes.extend_from_slice(&DTRC_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in ckpt.tensors.iter() {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::config(format!("tensor name too long: {name:?}")));
        }
        bytes.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        bytes.extend_from_slice(nb);
        if tensor.rank() > u8::MAX as usize {
            return Err(Error::config("tensor rank exceeds format limit"));
        }
        bytes.push(tensor.rank() as u8);
        for &e in tensor.shape() {
            bytes.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut cfg = String::new();
    for (k, v) in &ckpt.config {
        cfg.push_str(k);
        cfg.push('=');
        cfg.push_str(v);
        cfg.push('\n');
    }
    bytes.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    bytes.extend_from_slice(cfg.as_bytes());
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path.as_ref())
        .map_err(|e| Error::data(format!("{}: {e}", path.as_ref().display())))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::data("truncated checkpoint"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != DTRC_MAGIC {
        return Err(Error::data("not a DTRC checkpoint"));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != DTRC_VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = ParamSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::data("tensor name is not UTF-8"))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.add(name, Tensor::new(shape, data)?)?;
    }
    let cfg_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let cfg_str = String::from_utf8(take(&mut pos, cfg_len)?.to_vec())
        .map_err(|_| Error::data("config block is not UTF-8"))?;
    if pos != bytes.len() {
        return Err(Error::data("trailing bytes after checkpoint payload"));
    }
    let mut config = BTreeMap::new();
    for line in cfg_str.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::data(format!("malformed config line {line:?}")))?;
        config.insert(k.to_string(), v.to_string());
    }
    Ok(Checkpoint { tensors, config })
}
