//! Flat little-endian parameter checkpoints.
//!
//! Layout: magic `SLGCKPT\0`, `u32` version, `u32` metadata length and UTF-8
//! metadata (the run configuration as JSON), `u32` parameter count, then per
//! parameter its name, shape, owning module, role and stage depth, and
//! finally every parameter's values as row-major `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::partition::{ParamPartition, Role, TrainMode};
use crate::model::SlgNet;
use crate::params::ModuleKind;

pub const MAGIC: &[u8; 8] = b"SLGCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub module: ModuleKind,
    pub role: Role,
    pub stage_depth: usize,
}

/// Metadata stored by [`save_run`]: enough to rebuild the model and its
/// validation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub mode: TrainMode,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub entries: Vec<Entry>,
    pub values: Vec<Vec<f64>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Load(format!("{v} does not fit the checkpoint header")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn save(path: &Path, model: &SlgNet, part: &ParamPartition, meta: &str) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, meta.len())?;
    out.extend_from_slice(meta.as_bytes());
    put_u32(&mut out, model.store.len())?;
    for (id, p) in model.store.iter() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.tensor.rank())?;
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(p.module.code());
        out.push(match part.get(id).role {
            Role::Frozen => 0,
            Role::Adapter => 1,
        });
        put_u32(&mut out, part.get(id).stage_depth)?;
    }
    for (_, p) in model.store.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn save_run(path: &Path, model: &SlgNet, part: &ParamPartition, meta: &RunMeta) -> Result<()> {
    save(path, model, part, &serde_json::to_string(meta)?)
}

/// Reads a checkpoint written by [`save_run`] and rebuilds its model.
pub fn load_run(path: &Path) -> Result<(SlgNet, ParamPartition, RunMeta)> {
    let ckpt = read(path)?;
    let meta: RunMeta = serde_json::from_str(&ckpt.meta).map_err(|e| Error::Load(format!("checkpoint metadata: {e}")))?;
    let mut model = meta.config.build_model()?;
    let part = ckpt.restore(&mut model)?;
    Ok((model, part, meta))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Load("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Load(e.to_string()))
    }
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    parse(&buf)
}

pub fn parse(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Load("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Load(format!("unsupported checkpoint version {version}")));
    }
    let meta = r.string()?;
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let module = ModuleKind::from_code(r.u8()?).ok_or_else(|| Error::Load(format!("{name}: unknown module code")))?;
        let role = match r.u8()? {
            0 => Role::Frozen,
            1 => Role::Adapter,
            other => return Err(Error::Load(format!("{name}: unknown role {other}"))),
        };
        let stage_depth = r.u32()?;
        entries.push(Entry { name, shape, module, role, stage_depth });
    }
    let mut values = Vec::with_capacity(count);
    for e in &entries {
        let n: usize = e.shape.iter().product();
        values.push((0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
    }
    if r.pos != buf.len() {
        return Err(Error::Load(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint { meta, entries, values })
}

impl Checkpoint {
    /// Copies the stored values into `model`, whose layout must match, and
    /// returns the stored partition.
    pub fn restore(&self, model: &mut SlgNet) -> Result<ParamPartition> {
        if self.entries.len() != model.store.len() {
            return Err(Error::Load(format!("checkpoint has {} parameters, model {}", self.entries.len(), model.store.len())));
        }
        for ((e, vals), (_, p)) in self.entries.iter().zip(&self.values).zip(model.store.iter_mut()) {
            if e.name != p.name || e.shape != p.tensor.shape() || e.module != p.module {
                return Err(Error::Load(format!("checkpoint entry {} {:?} does not match {} {:?}", e.name, e.shape, p.name, p.tensor.shape())));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Load(format!("{}: non-finite value", e.name)));
            }
            p.tensor.data_mut().copy_from_slice(vals);
        }
        let roles = self.entries.iter().map(|e| Some(e.role)).collect();
        ParamPartition::from_roles(&model.store, roles, model.config.max_depth())
    }
}
