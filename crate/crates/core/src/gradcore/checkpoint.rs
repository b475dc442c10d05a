//! Binary checkpoint format.
//!
//! ```text
//! "ACE1"
//! u32 record count, then records      (parameters and buffers)
//! u64 step, f64 base_lr, f64 half_life, f64 beta1, f64 beta2, f64 eps
//! u32 record count, then records      (Adam moments: "m/<name>", "v/<name>", "t/<name>")
//!
//! record := u32 name length, name bytes (UTF-8), u32 rank, u64 extents[rank],
//!           f64 values[product(extents)]
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{AdamState, Moments, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ACE1";

/// Names stored as buffers rather than trainable parameters.
pub fn is_buffer_name(name: &str) -> bool {
    name.starts_with("meta.") || name.ends_with(".running_mean") || name.ends_with(".running_var")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub adam: AdamState,
}

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend((e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::format("checkpoint", format!("truncated at byte {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|e| Error::format("checkpoint", format!("record name: {e}")))?
            .to_string();
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&c| c <= (self.buf.len() - self.pos) / 8)
            .ok_or_else(|| Error::format("checkpoint", format!("bad extents for {name}")))?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(self.f64()?);
        }
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        let records: Vec<(&String, &Tensor)> = self
            .params
            .trainable
            .iter()
            .chain(self.params.buffers.iter())
            .collect();
        out.extend((records.len() as u32).to_le_bytes());
        for (name, t) in records {
            write_record(&mut out, name, t);
        }
        let a = &self.adam;
        out.extend(a.t.to_le_bytes());
        for x in [a.base_lr, a.half_life, a.beta1, a.beta2, a.eps] {
            out.extend(x.to_le_bytes());
        }
        out.extend(((a.moments.len() * 3) as u32).to_le_bytes());
        for (name, mom) in &a.moments {
            write_record(&mut out, &format!("m/{name}"), &mom.m);
            write_record(&mut out, &format!("v/{name}"), &mom.v);
            write_record(
                &mut out,
                &format!("t/{name}"),
                &Tensor::scalar(mom.step as f64),
            );
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != MAGIC {
            return Err(Error::format("checkpoint", "missing ACE1 magic"));
        }
        let mut r = Reader { buf, pos: 4 };
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let (name, t) = r.record()?;
            if is_buffer_name(&name) {
                params.buffers.insert(name, t);
            } else {
                params.trainable.insert(name, t);
            }
        }
        let t = r.u64()?;
        let base_lr = r.f64()?;
        let half_life = r.f64()?;
        let mut adam = AdamState::new(base_lr, half_life);
        adam.t = t;
        adam.beta1 = r.f64()?;
        adam.beta2 = r.f64()?;
        adam.eps = r.f64()?;
        type Parts = (Option<Tensor>, Option<Tensor>, Option<u64>);
        let mut parts: BTreeMap<String, Parts> = BTreeMap::new();
        for _ in 0..r.u32()? {
            let (name, t) = r.record()?;
            let (kind, pname) = name
                .split_once('/')
                .ok_or_else(|| Error::format("checkpoint", format!("bad moment name {name}")))?;
            let e = parts.entry(pname.to_string()).or_default();
            match kind {
                "m" => e.0 = Some(t),
                "v" => e.1 = Some(t),
                "t" => e.2 = Some(t.item() as u64),
                _ => {
                    return Err(Error::format(
                        "checkpoint",
                        format!("bad moment name {name}"),
                    ))
                }
            }
        }
        for (name, part) in parts {
            match part {
                (Some(m), Some(v), Some(step)) => {
                    adam.moments.insert(name, Moments { m, v, step });
                }
                _ => {
                    return Err(Error::format(
                        "checkpoint",
                        format!("incomplete moments for {name}"),
                    ))
                }
            }
        }
        if r.pos != buf.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint { params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
