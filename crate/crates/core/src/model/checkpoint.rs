//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "TFRN"  u32 version  u32 config_len  config (key=value lines, UTF-8)
//! repeated until EOF:
//!     u16 name_len  name (UTF-8)  u8 rank  u64 dims[rank]  f32 data[prod(dims)]
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{param_specs, LanguageModel, ModelConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TFRN";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &LanguageModel<f32>, mut w: W) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = model.config().to_kv();
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg.as_bytes())?;
    let mut res = Ok(());
    model.params().visit(|name, t| {
        if res.is_ok() {
            res = write_tensor(&mut w, &name, t);
        }
    });
    res?;
    w.flush()?;
    Ok(())
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> Result<()> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_checkpoint(model: &LanguageModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let f = File::create(path)?;
    write_checkpoint(model, BufWriter::new(f))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LanguageModel<f32>> {
    let f = File::open(path)?;
    read_checkpoint(BufReader::new(f))
}

/// Reads a whole checkpoint. Nothing is returned unless every tensor the
/// config implies is present with the right shape.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<LanguageModel<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { buf: &bytes, pos: 0 };

    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let cfg_len = cur.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(cur.take(cfg_len, "config")?)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let config = ModelConfig::from_kv(cfg_text).map_err(|e| match e {
        Error::Checkpoint(c) => c,
        other => CheckpointError::Config(other.to_string()),
    })?;

    let specs = param_specs(&config)?;
    let mut expected = BTreeMap::new();
    specs.visit(|n, s| {
        expected.insert(n, s.shape.clone());
    });

    let mut loaded: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    while !cur.done() {
        let name_len = cur.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|e| CheckpointError::Config(e.to_string()))?
            .to_string();
        let rank = cur.take(1, "tensor rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u64("tensor dims")? as usize);
        }
        let Some(shape) = expected.get(&name) else {
            return Err(CheckpointError::UnknownTensor(name).into());
        };
        if *shape != dims {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: shape.clone(),
                found: dims,
            }
            .into());
        }
        let n: usize = dims.iter().product();
        let raw = cur.take(n * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&dims, data)?.with_requires_grad(true);
        if loaded.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::DuplicateTensor(name).into());
        }
    }

    let mut missing = None;
    let params = specs.map(|_| ());
    let mut names = Vec::new();
    params.visit(|n, _| names.push(n));
    for n in &names {
        if !loaded.contains_key(n) {
            missing = Some(n.clone());
            break;
        }
    }
    if let Some(n) = missing {
        return Err(CheckpointError::MissingTensor(n).into());
    }
    let mut it = names.into_iter();
    let params = params.map(|_| {
        let n = it.next().expect("one name per leaf");
        loaded.remove(&n).expect("checked above")
    });
    LanguageModel::from_params(config, params)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what).into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8")))
    }
}
