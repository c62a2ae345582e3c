//! Weight snapshot format, all integers and floats little-endian:
//!
//! ```text
//! "CGPW" | u32 version | u32 entry count
//! per entry: u32 name length | name (UTF-8) | u32 rank | u64 dims[rank]
//! per entry, in the same order: f32 values
//! ```
//!
//! Entries follow layer order: learnable parameters first, then the
//! running mean and variance of every batch-norm layer.

use std::io::{Read, Write};

use super::network::Network;
use super::tensor::Scalar;
use super::NnError;

pub const SNAPSHOT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CGPW";

struct Entry {
    name: String,
    dims: Vec<usize>,
    values: Vec<f32>,
}

fn entries<T: Scalar>(net: &Network<T>) -> Vec<Entry> {
    let to_f32 = |v: &[T]| v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect::<Vec<_>>();
    let mut out: Vec<Entry> = net
        .params()
        .iter()
        .map(|p| Entry {
            name: p.name.clone(),
            dims: p.dims.clone(),
            values: to_f32(&p.value),
        })
        .collect();
    for (id, mean, var) in net.running_stats() {
        for (suffix, v) in [("running_mean", mean), ("running_var", var)] {
            out.push(Entry {
                name: format!("n{id}.bn.{suffix}"),
                dims: vec![v.len()],
                values: to_f32(v),
            });
        }
    }
    out
}

pub fn save_weights<T: Scalar>(net: &Network<T>, mut w: impl Write) -> Result<(), NnError> {
    let entries = entries(net);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in &entries {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for e in &entries {
        for v in &e.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Snapshot(msg.into())
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NnError> {
        if self.0.len() < n {
            return Err(bad("truncated file"));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a snapshot into `net`. The manifest must match the network's own
/// entries exactly (names, order and shapes).
pub fn load_weights<T: Scalar>(net: &mut Network<T>, mut r: impl Read) -> Result<(), NnError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor(&bytes);
    if c.take(4)? != MAGIC {
        return Err(bad("not a weight snapshot"));
    }
    let version = c.u32()?;
    if version != SNAPSHOT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let expected = entries(net);
    let count = c.u32()? as usize;
    if count != expected.len() {
        return Err(bad(format!("{count} entries, network has {}", expected.len())));
    }
    for e in &expected {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| bad("entry name is not UTF-8"))?;
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if name != e.name || dims != e.dims {
            return Err(bad(format!("entry {name} {dims:?} does not match {} {:?}", e.name, e.dims)));
        }
    }
    let mut read = |n: usize| -> Result<Vec<T>, NnError> {
        let raw = c.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| T::from_f32(f32::from_le_bytes(b.try_into().unwrap())).unwrap())
            .collect())
    };
    for p in net.params_mut() {
        p.value = read(p.value.len())?;
    }
    for (_, mean, var) in net.running_stats_mut() {
        *mean = read(mean.len())?;
        *var = read(var.len())?;
    }
    if !c.0.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(())
}
