//! Binary weight file.
//!
//! Layout (little endian):
//! ```text
//! magic      8 bytes  "SLADETCK"
//! version    u8
//! meta_len   u32, followed by meta_len bytes of UTF-8 JSON (model config)
//! n_tensors  u32
//! table      n_tensors × { name_len u16, name, dtype u8, ndim u8, dims u32 × ndim }
//! data       tensors back to back, in table order
//! ```

use std::fs;
use std::path::Path;

use super::param::{Module, Param};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"SLADETCK";
pub const CHECKPOINT_VERSION: u8 = 1;
/// Byte offset of the version field.
pub const VERSION_OFFSET: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_module<T: Scalar, M: Module<T> + ?Sized>(meta: String, module: &M) -> Self {
        let mut tensors = Vec::new();
        module.visit_params(&mut |p: &Param<T>| {
            let mut bytes = Vec::with_capacity(p.len() * T::DTYPE.size());
            for &v in &p.value {
                v.write_le(&mut bytes);
            }
            tensors.push(TensorEntry {
                name: p.name.clone(),
                dtype: T::DTYPE,
                shape: p.shape.clone(),
                bytes,
            });
        });
        Self { meta, tensors }
    }

    /// Copies tensor values into `module`, matching by name and shape.
    pub fn load_into<T: Scalar, M: Module<T> + ?Sized>(&self, module: &mut M) -> Result<()> {
        let mut err = None;
        let mut idx = 0usize;
        module.visit_params_mut(&mut |p: &mut Param<T>| {
            if err.is_some() {
                return;
            }
            let Some(entry) = self.tensors.get(idx) else {
                err = Some(format!("missing tensor {}", p.name));
                return;
            };
            idx += 1;
            if entry.name != p.name || entry.shape != p.shape {
                err = Some(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    entry.name, entry.shape, p.name, p.shape
                ));
                return;
            }
            let size = entry.dtype.size();
            for (v, chunk) in p.value.iter_mut().zip(entry.bytes.chunks(size)) {
                *v = match entry.dtype {
                    DType::F32 => T::lit(f32::read_le(chunk) as f64),
                    DType::F64 => T::lit(f64::read_le(chunk)),
                };
            }
        });
        if let Some(e) = err {
            return Err(Error::argument(e));
        }
        if idx != self.tensors.len() {
            return Err(Error::argument(format!(
                "checkpoint has {} tensors, model has {idx}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.code());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for t in &self.tensors {
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(Error::VersionMismatch {
                path: origin.to_path_buf(),
                message: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                path: origin.to_path_buf(),
                message: format!("version {version}, expected {CHECKPOINT_VERSION}"),
            });
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| r.corrupt("meta is not UTF-8"))?;
        let n = r.u32()? as usize;
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.corrupt("tensor name"))?;
            let dtype = DType::from_code(r.take(1)?[0]).ok_or_else(|| r.corrupt("unknown dtype"))?;
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            table.push((name, dtype, shape));
        }
        let mut tensors = Vec::with_capacity(n);
        for (name, dtype, shape) in table {
            let len = shape.iter().product::<usize>() * dtype.size();
            tensors.push(TensorEntry {
                name,
                dtype,
                shape,
                bytes: r.take(len)?.to_vec(),
            });
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt("trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, what: &str) -> Error {
        Error::Parse {
            path: self.origin.to_path_buf(),
            message: format!("corrupt checkpoint: {what} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.corrupt("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
