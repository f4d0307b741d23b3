//! Binary weight checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "FED2CKPT"
//! version     u32      1
//! spec_len    u64      length of the JSON-encoded ModelSpec that follows
//! spec        bytes
//! records     u32      record count
//! per record:
//!   layer_index u32
//!   kind        u8     0 dense, 1 grouped_dense, 2 conv, 3 group_conv, 4 group_norm, 5 batch_norm
//!   role        u8     0 weight, 1 bias, 2 running mean, 3 running variance
//!   ndim        u32,   then ndim × u64 dims
//!   ngroups     u32,   then ngroups × (u64 start, u64 end) structural group boundaries
//!   len         u64,   then len × f64 data
//! ```

use std::collections::HashSet;
use std::io::{Read, Write};

use super::model::{LayerKind, Model};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::spec::ModelSpec;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FED2CKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let spec = serde_json::to_vec(&model.spec)?;
    w.write_all(&(spec.len() as u64).to_le_bytes())?;
    w.write_all(&spec)?;

    let mut records = Vec::new();
    for p in model.param_layers() {
        records.push((p, 0u8, &p.weight));
        records.push((p, 1u8, &p.bias));
        if let Some(r) = &p.running {
            records.push((p, 2u8, &r.mean));
            records.push((p, 3u8, &r.var));
        }
    }
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (p, role, t) in records {
        w.write_all(&(p.layer_index as u32).to_le_bytes())?;
        w.write_all(&[p.kind.code(), role])?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let groups = p.group_boundaries();
        w.write_all(&(groups.len() as u32).to_le_bytes())?;
        for r in groups {
            w.write_all(&(r.start as u64).to_le_bytes())?;
            w.write_all(&(r.end as u64).to_le_bytes())?;
        }
        w.write_all(&(t.len() as u64).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes::<1>(what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Model> {
    let mut c = Cursor { inner: r };
    if &c.bytes::<8>("magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let spec_len = c.u64("spec length")? as usize;
    if spec_len > 1 << 24 {
        return Err(Error::Checkpoint(format!("implausible spec length {spec_len}")));
    }
    let mut spec_bytes = vec![0u8; spec_len];
    c.inner
        .read_exact(&mut spec_bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated spec: {e}")))?;
    let spec: ModelSpec = serde_json::from_slice(&spec_bytes)?;
    let mut model = Model::instantiate(&spec, &mut RngStream::new(0, 0))?;

    let count = c.u32("record count")?;
    let mut seen = HashSet::new();
    for _ in 0..count {
        let layer_index = c.u32("layer index")? as usize;
        let kind = LayerKind::from_code(c.u8("kind")?)
            .ok_or_else(|| Error::Checkpoint("unknown layer kind".into()))?;
        let role = c.u8("role")?;
        let ndim = c.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64("dim")? as usize);
        }
        let ngroups = c.u32("group count")? as usize;
        let mut groups = Vec::with_capacity(ngroups);
        for _ in 0..ngroups {
            let s = c.u64("group start")? as usize;
            let e = c.u64("group end")? as usize;
            groups.push(s..e);
        }
        let len = c.u64("data length")? as usize;
        if !seen.insert((layer_index, role)) {
            return Err(Error::Checkpoint(format!("duplicate record for layer {layer_index} role {role}")));
        }
        let p = model
            .layers
            .get_mut(layer_index)
            .and_then(|l| l.params_mut())
            .ok_or_else(|| Error::Checkpoint(format!("record for non-parameter layer {layer_index}")))?;
        if p.kind != kind || p.group_boundaries() != groups.as_slice() {
            return Err(Error::Checkpoint(format!(
                "layer {layer_index} does not match the embedded spec"
            )));
        }
        let target = match (role, p.running.as_mut()) {
            (0, _) => &mut p.weight,
            (1, _) => &mut p.bias,
            (2, Some(r)) => &mut r.mean,
            (3, Some(r)) => &mut r.var,
            _ => return Err(Error::Checkpoint(format!("bad role {role} for layer {layer_index}"))),
        };
        if target.shape() != shape.as_slice() || target.len() != len {
            return Err(Error::Checkpoint(format!(
                "layer {layer_index} role {role}: shape {shape:?} does not match {:?}",
                target.shape()
            )));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(c.f64("data")?);
        }
        *target = Tensor::new(shape, data)?;
    }
    let expected: usize = model
        .param_layers()
        .map(|p| 2 + if p.running.is_some() { 2 } else { 0 })
        .sum();
    if seen.len() != expected {
        return Err(Error::Checkpoint(format!("expected {expected} records, found {}", seen.len())));
    }
    Ok(model)
}
