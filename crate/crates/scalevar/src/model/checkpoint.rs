//! Versioned binary checkpoint: structural spec digest plus named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"SVCP"
//! u32    format version (1)
//! u32    spec JSON length, followed by the JSON bytes
//! [u8;32] SHA-256 of the spec JSON
//! u64    tensor count
//! per tensor:
//!   u32  name length + UTF-8 name
//!   u32  ndim, then ndim x u64 dims
//!   f64  data (raw bits)
//! ```
//!
//! Tensor values round-trip bit-exactly; momentum buffers are not part of a
//! checkpoint.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::net::Model;
use crate::model::spec::ModelSpec;
use crate::model::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SVCP";
const VERSION: u32 = 1;

pub fn save(path: &Path, model: &Model) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let spec_json = serde_json::to_string(&model.spec)?;
    w.write_all(&(spec_json.len() as u32).to_le_bytes())?;
    w.write_all(spec_json.as_bytes())?;
    w.write_all(&Sha256::digest(spec_json.as_bytes()))?;

    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    model.visit_params(&mut |name, p| tensors.push((name.to_string(), p.value.clone())));
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in &tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
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

pub fn load(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    if read_u32(&mut r)? != VERSION {
        return Err(bad("unsupported version"));
    }
    let spec_len = read_u32(&mut r)? as usize;
    let mut spec_bytes = vec![0u8; spec_len];
    r.read_exact(&mut spec_bytes)?;
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)?;
    if Sha256::digest(&spec_bytes)[..] != digest {
        return Err(bad("spec digest mismatch"));
    }
    let spec: ModelSpec = serde_json::from_slice(&spec_bytes)?;
    let mut model = Model::new(&spec, 0)?;

    let n_tensors = read_u64(&mut r)? as usize;
    let mut loaded: std::collections::BTreeMap<String, Tensor> = std::collections::BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0.0f64; len];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        loaded.insert(name, Tensor::from_vec(&shape, data)?);
    }

    let mut err: Option<Error> = None;
    let mut filled = 0usize;
    model.visit_params_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        match loaded.get(name) {
            Some(t) if t.shape() == p.value.shape() => {
                p.value = t.clone();
                filled += 1;
            }
            Some(_) => err = Some(Error::Checkpoint(format!("shape mismatch for tensor `{name}`"))),
            None => err = Some(Error::Checkpoint(format!("missing tensor `{name}`"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if filled != loaded.len() {
        return Err(bad("checkpoint contains extra tensors"));
    }
    Ok(model)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
