//! Binary model checkpoints.
//!
//! Layout, all integers little-endian u32 unless noted:
//!
//! ```text
//! "TT2R"                      4 bytes magic
//! version                     currently 1
//! field count, fields...      TowerConfig in declaration order
//! group count
//!   per group: name length, name bytes (utf-8), parameter count
//!     per parameter: name length, name bytes, ndim, dims..., values as f32 LE, row-major
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::ParamGroup;

use super::{ConfigError, Model, TowerConfig};

pub const MAGIC: &[u8; 4] = b"TT2R";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error("parameter {name}: {detail}")]
    Param { name: String, detail: String },
}

fn put_u32(w: &mut impl Write, v: usize) -> io::Result<()> {
    let v = u32::try_from(v).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())
}

fn get_u32(r: &mut impl Read) -> Result<usize, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_str(r: &mut impl Read) -> Result<String, CheckpointError> {
    let n = get_u32(r)?;
    if n > 4096 {
        return Err(CheckpointError::Malformed(format!("name length {n}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| CheckpointError::Malformed("name is not utf-8".into()))
}

pub fn write_checkpoint(model: &Model, mut w: impl Write) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION as usize)?;
    let fields = model.config.to_fields();
    put_u32(&mut w, fields.len())?;
    for f in fields {
        put_u32(&mut w, f)?;
    }
    put_u32(&mut w, ParamGroup::ALL.len())?;
    for group in ParamGroup::ALL {
        put_str(&mut w, group.name())?;
        let members: Vec<_> = model.store.iter().filter(|(_, p)| p.group == group).collect();
        put_u32(&mut w, members.len())?;
        for (_, p) in members {
            put_str(&mut w, &p.name)?;
            put_u32(&mut w, p.value.shape().len())?;
            for d in p.value.shape() {
                put_u32(&mut w, *d)?;
            }
            let mut buf = Vec::with_capacity(p.value.len() * 4);
            for v in p.value.data() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Model, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = get_u32(&mut r)? as u32;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let nf = get_u32(&mut r)?;
    if nf != 11 {
        return Err(CheckpointError::Malformed(format!("{nf} config fields, expected 11")));
    }
    let mut fields = [0usize; 11];
    for f in fields.iter_mut() {
        *f = get_u32(&mut r)?;
    }
    let mut model = Model::new(TowerConfig::from_fields(fields), 0)?;
    let mut seen = vec![false; model.store.len()];
    let ngroups = get_u32(&mut r)?;
    for _ in 0..ngroups {
        let gname = get_str(&mut r)?;
        let group = ParamGroup::from_name(&gname)
            .ok_or_else(|| CheckpointError::Malformed(format!("unknown group {gname}")))?;
        let np = get_u32(&mut r)?;
        for _ in 0..np {
            let name = get_str(&mut r)?;
            let perr = |detail: String| CheckpointError::Param {
                name: name.clone(),
                detail,
            };
            let id = model
                .store
                .lookup(&name)
                .ok_or_else(|| perr("not part of this model".into()))?;
            if model.store.get(id).group != group {
                return Err(perr(format!("stored under group {group}")));
            }
            let ndim = get_u32(&mut r)?;
            let dims = (0..ndim).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>, _>>()?;
            if dims != model.store.value(id).shape() {
                return Err(perr(format!(
                    "shape {dims:?}, expected {:?}",
                    model.store.value(id).shape()
                )));
            }
            let mut buf = vec![0u8; model.store.value(id).len() * 4];
            r.read_exact(&mut buf)?;
            for (dst, src) in model.store.value_mut(id).data_mut().iter_mut().zip(buf.chunks_exact(4)) {
                *dst = f32::from_le_bytes(src.try_into().expect("4-byte chunk")) as f64;
            }
            seen[id.index()] = true;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = model.store.iter().nth(i).map(|(_, p)| p.name.clone()).unwrap_or_default();
        return Err(CheckpointError::Param {
            name,
            detail: "missing from checkpoint".into(),
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", rest.len())));
    }
    Ok(model)
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    write_atomic(path, &buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    let f = fs::File::open(path)?;
    read_checkpoint(io::BufReader::new(f))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
