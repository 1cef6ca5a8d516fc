//! Little-endian weight file.
//!
//! ```text
//! "CMDW" | version u32 | config JSON (u32 length, UTF-8)
//!        | per parameter: name (u16 length, UTF-8) | rank u8 | dims u32[rank] | f32 data
//! ```
//!
//! Parameters are written in canonical order. Loading accepts any order but
//! requires every parameter of the configuration exactly once.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::layout::param_layout;
use super::network::Camd;
use super::ModelError;
use crate::diffcore::{ParamStore, Real, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CMDW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Real>(model: &Camd<T>) -> Result<Vec<u8>, ModelError> {
    let json = serde_json::to_vec(model.config()).map_err(|e| ModelError::Json(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for spec in param_layout(model.config()) {
        let id = model
            .params()
            .id(&spec.name)
            .expect("model matches its layout");
        let tensor = model.params().tensor(id);
        out.extend_from_slice(&(spec.name.len() as u16).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Truncated(format!(
                "{what} at byte {} needs {n} bytes, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_checkpoint<T: Real>(buf: &[u8]) -> Result<Camd<T>, ModelError> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| ModelError::BadMagic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let json_len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(json_len, "config")?)
        .map_err(|e| ModelError::Json(e.to_string()))?;
    config.validate()?;

    let layout = param_layout(&config);
    let expected: HashMap<&str, &[usize]> = layout
        .iter()
        .map(|s| (s.name.as_str(), s.shape.as_slice()))
        .collect();
    let mut loaded: HashMap<String, Tensor<T>> = HashMap::new();
    while !r.done() {
        let n = r.u16("parameter name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "parameter name")?)
            .map_err(|_| ModelError::Truncated("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let want = *expected
            .get(name.as_str())
            .ok_or_else(|| ModelError::UnknownParam(name.clone()))?;
        if dims != want {
            return Err(ModelError::ShapeMismatch {
                name,
                expected: want.to_vec(),
                found: dims,
            });
        }
        let count: usize = dims.iter().product();
        let data: Vec<f64> = r
            .take(count * 4, &name)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        if loaded.contains_key(&name) {
            return Err(ModelError::DuplicateParam(name));
        }
        loaded.insert(name, Tensor::from_f64(&dims, &data)?);
    }

    let mut store = ParamStore::new();
    for spec in &layout {
        let t = loaded
            .remove(&spec.name)
            .ok_or_else(|| ModelError::MissingParam(spec.name.clone()))?;
        store.add(spec.name.clone(), t);
    }
    Camd::from_parts(config, store)
}

pub fn save_checkpoint<T: Real>(model: &Camd<T>, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let bytes = encode_checkpoint(model)?;
    fs::write(path.as_ref(), bytes).map_err(|e| ModelError::io(path.as_ref(), e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Camd<T>, ModelError> {
    let bytes = fs::read(path.as_ref()).map_err(|e| ModelError::io(path.as_ref(), e))?;
    decode_checkpoint(&bytes)
}

/// Total scalars stored in an encoded checkpoint, read from its table.
pub fn checkpoint_scalar_count(buf: &[u8]) -> Result<usize, ModelError> {
    let mut r = Reader { buf, pos: 0 };
    r.take(8, "header")?;
    let json_len = r.u32("config length")? as usize;
    r.take(json_len, "config")?;
    let mut total = 0;
    while !r.done() {
        let n = r.u16("parameter name length")? as usize;
        r.take(n, "parameter name")?;
        let rank = r.take(1, "rank")?[0] as usize;
        let mut count = 1;
        for _ in 0..rank {
            count *= r.u32("dimension")? as usize;
        }
        r.take(count * 4, "parameter data")?;
        total += count;
    }
    Ok(total)
}
