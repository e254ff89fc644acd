//! Named-tensor snapshot format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"DGNT"
//! u32    version (1)
//! u32    tensor count
//! per tensor:
//!   u32 + bytes   name (UTF-8)
//!   i64           layer index, -1 when the tensor belongs to no layer
//!   u32 + bytes   role (name without the layer prefix)
//!   u32           number of dims (always 2)
//!   u64 × dims    dims
//!   f64 × Π dims  row-major values
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernel::DenseMatrix;
use crate::params::Params;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"DGNT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub layer: Option<usize>,
    pub role: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Splits `"3.attn.wq"` into `(Some(3), "attn.wq")`.
pub fn split_layer(name: &str) -> (Option<usize>, &str) {
    match name.split_once('.') {
        Some((head, rest)) => match head.parse::<usize>() {
            Ok(l) => (Some(l), rest),
            Err(_) => (None, name),
        },
        None => (None, name),
    }
}

impl NamedTensor {
    pub fn from_matrix<S: Scalar>(name: &str, m: &DenseMatrix<S>) -> Self {
        let (layer, role) = split_layer(name);
        Self {
            name: name.to_string(),
            layer,
            role: role.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            values: m.data().iter().map(|v| v.as_f64()).collect(),
        }
    }
}

pub fn snapshot<S: Scalar, P: Params<S>>(params: &P) -> Vec<NamedTensor> {
    params
        .named()
        .into_iter()
        .map(|(n, t)| NamedTensor::from_matrix(&n, t))
        .collect()
}

/// Writes `tensors` back into `params`; names and shapes must match exactly.
pub fn restore<S: Scalar, P: Params<S>>(params: &mut P, tensors: &[NamedTensor]) -> Result<()> {
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    if names.len() != tensors.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, found {}",
            names.len(),
            tensors.len()
        )));
    }
    for ((name, dst), src) in names.iter().zip(params.tensors_mut()).zip(tensors) {
        if *name != src.name {
            return Err(Error::Format(format!("expected tensor {name}, found {}", src.name)));
        }
        dst.ensure_shape("restore", src.rows, src.cols)?;
        for (d, &v) in dst.data_mut().iter_mut().zip(&src.values) {
            *d = S::lit(v);
        }
    }
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        put_str(&mut out, &t.name);
        let layer = t.layer.map_or(-1i64, |l| l as i64);
        out.extend_from_slice(&layer.to_le_bytes());
        put_str(&mut out, &t.role);
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.rows as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols as u64).to_le_bytes());
        for v in &t.values {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let layer = r.u64()? as i64;
        let role = r.string()?;
        let ndims = r.u32()?;
        if ndims != 2 {
            return Err(Error::Format(format!("{name}: expected 2 dims, found {ndims}")));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(NamedTensor {
            name,
            layer: usize::try_from(layer).ok(),
            role,
            rows,
            cols,
            values,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes".into()));
    }
    Ok(out)
}

/// Hex SHA-256 of the encoded snapshot.
pub fn hash_tensors(tensors: &[NamedTensor]) -> String {
    hex::encode(Sha256::digest(encode(tensors)))
}

pub fn hash_params<S: Scalar, P: Params<S>>(params: &P) -> String {
    hash_tensors(&snapshot(params))
}

pub fn write_file(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<NamedTensor>> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
