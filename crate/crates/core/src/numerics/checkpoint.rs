//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SPLATMAE"
//! version    u32
//! config     u32 byte length + UTF-8 TOML (the resolved run config)
//! count      u32
//! per tensor u32 name length + UTF-8 name, u32 rank, rank x u64 dims,
//!            product(dims) x f32 values in row-major order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::IxDyn;

use super::nn::ParamStore;
use super::tensor::Array;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SPLATMAE";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Array> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array) {
        self.tensors.push((name.into(), value));
    }

    /// Adds every parameter of a store under `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for e in store.entries() {
            self.push(format!("{prefix}{}", e.name), e.value.clone());
        }
    }

    /// Fills a store from tensors named `prefix` + parameter name. Every
    /// parameter must be present with the right shape.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        for i in 0..store.len() {
            let id = super::nn::ParamId(i);
            let name = format!("{prefix}{}", store.entry(id).name);
            let value = self
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
            if value.shape() != store.value(id).shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    value.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = value.clone();
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.config.len() as u32)?;
        w.write_all(self.config.as_bytes())?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, value) in &self.tensors {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(value.ndim() as u32)?;
            for &d in value.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in value.iter() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let fmt = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let io = |e: std::io::Error| fmt(format!("truncated checkpoint: {e}"));

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(fmt("not a checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}")));
        }
        let config = read_string(&mut r).map_err(io)?;
        let count = r.read_u32::<LittleEndian>().map_err(io)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = read_string(&mut r).map_err(io)?;
            let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let dims = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(io)?;
            let n: usize = dims.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
            let value = Array::from_shape_vec(IxDyn(&dims), data.into_iter().map(f64::from).collect())
                .expect("dims match data length");
            tensors.push((name, value));
        }
        Ok(Checkpoint { config, tensors })
    }
}

fn read_string(r: &mut impl Read) -> std::io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
