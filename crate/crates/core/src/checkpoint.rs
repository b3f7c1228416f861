//! Versioned binary container for named tensors plus string metadata.
//!
//! Layout (little endian):
//! ```text
//! magic "LSICCKPT" | u32 version
//! u32 meta_count  { str key, str value }*
//! u32 tensor_count { str name, u32 ndim, u64 dim*, f64 value* }*
//! ```
//! where `str` is a u32 byte length followed by UTF-8 bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamTensor;

pub const MAGIC: &[u8; 8] = b"LSICCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<ParamTensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("cannot parse metadata {key} = {raw:?}")))
    }

    /// Stores copies of `tensors` under `prefix/<name>`.
    pub fn push_all<'a>(&mut self, prefix: &str, tensors: impl IntoIterator<Item = &'a ParamTensor>) {
        for t in tensors {
            let mut c = t.clone();
            c.name = format!("{prefix}/{}", t.name);
            c.grad = vec![0.0; c.values.len()];
            self.tensors.push(c);
        }
    }

    pub fn get(&self, name: &str) -> Result<&ParamTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    /// Copies `prefix/<name>` values into each destination tensor, checking shapes.
    pub fn restore_into<'a>(
        &self,
        prefix: &str,
        dest: impl IntoIterator<Item = &'a mut ParamTensor>,
    ) -> Result<()> {
        for t in dest {
            let src = self.get(&format!("{prefix}/{}", t.name))?;
            if src.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {prefix}/{} has shape {:?}, expected {:?}",
                    t.name, src.shape, t.shape
                )));
            }
            t.values.copy_from_slice(&src.values);
            t.zero_grad();
        }
        Ok(())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.iter().any(|t| t.name.starts_with(&p))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            write_str(&mut w, &t.name)?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &t.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..read_u32(&mut r)? {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            ck.meta.insert(k, v);
        }
        for _ in 0..read_u32(&mut r)? {
            let name = read_str(&mut r)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(truncated)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b).map_err(truncated)?;
                values.push(f64::from_le_bytes(b));
            }
            ck.tensors.push(ParamTensor::from_values(name, &shape, values)?);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

fn truncated(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated checkpoint: {e}"))
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("non-utf8 string".into()))
}
