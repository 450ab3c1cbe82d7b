//! Weight files: `DLSPW001`, a little-endian u32 tensor count, then for each
//! tensor a u16 name length, the UTF-8 name, a u8 rank, rank × u32 dims and
//! the f32 payload in row-major order.

use std::path::Path;

use super::arch::ArchSpec;
use super::model::{CnnModel, Tensor};
use super::scalar::Scalar;
use super::NnError;

pub const WEIGHT_MAGIC: &[u8; 8] = b"DLSPW001";

pub fn encode_weights<T: Scalar>(model: &CnnModel<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + model.parameter_count() * 4);
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for t in &model.params {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(NnError::Truncated(format!("{what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a weight file and checks every tensor against `arch`.
pub fn decode_weights(bytes: &[u8], arch: &ArchSpec) -> Result<CnnModel<f32>, NnError> {
    if bytes.len() < 8 {
        return Err(NnError::Truncated("magic".into()));
    }
    if &bytes[..8] != WEIGHT_MAGIC {
        return Err(NnError::BadMagic(bytes[..8].try_into().expect("8 bytes")));
    }
    let template = CnnModel::<f32>::zeros(arch)?;
    let mut r = Reader { bytes, pos: 8 };
    let count = r.u32("tensor count")? as usize;
    if count != template.params.len() {
        return Err(NnError::ShapeMismatchWithArch(format!(
            "{count} tensors, architecture has {}",
            template.params.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for expected in &template.params {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8_lossy(r.take(len, "tensor name")?).into_owned();
        let ndim = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dims")? as usize);
        }
        if name != expected.name || dims != expected.dims {
            return Err(NnError::ShapeMismatchWithArch(format!(
                "found {name} {dims:?}, expected {} {:?}",
                expected.name, expected.dims
            )));
        }
        let n = expected.data.len();
        let payload = r.take(n * 4, &format!("payload of {name}"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push(Tensor { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(NnError::ShapeMismatchWithArch(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    CnnModel::from_parts(arch.clone(), params, 0)
}

pub fn save_weights<T: Scalar>(model: &CnnModel<T>, path: &Path) -> Result<(), NnError> {
    std::fs::write(path, encode_weights(model)).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_weights(path: &Path, arch: &ArchSpec) -> Result<CnnModel<f32>, NnError> {
    let bytes = std::fs::read(path).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_weights(&bytes, arch)
}
