//! Checkpoint persistence. Binary layout (all integers little-endian,
//! strings are u32 byte length + UTF-8, f32 arrays are raw IEEE bits):
//!
//! ```text
//! magic "SSN1" | u32 version=1
//! str config_hash | str variant | u64 epoch | u64 global_step
//! u32 n_arrays   { str name | u64 count | f32[count] }      sorted by name
//! u32 n_counters { str name | u64 value }                   sorted by name
//! u32 n_streams  { str name | u128 word_pos (16 bytes) }    sorted by name
//! u32 n_pools    { str name | u32 n_items {4xu64 dims | u64 count | f32[count]} }
//! ```
//!
//! Pool items keep insertion order (the buffer is index-addressed);
//! everything else is canonically sorted, so save -> load -> save is
//! byte-identical. Unknown versions and trailing bytes are rejected.

use crate::data::audit;
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SSN1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub variant: String,
    pub epoch: u64,
    pub global_step: u64,
    /// Network parameters ("param.g1.stem.conv.w") and optimizer moments
    /// ("adam.m.g1.stem.conv.w" / "adam.v...").
    pub arrays: BTreeMap<String, Vec<f32>>,
    /// Optimizer step counters ("t.g1") and other integer state.
    pub counters: BTreeMap<String, u64>,
    /// RNG stream positions by stream name.
    pub streams: BTreeMap<String, u128>,
    /// History-buffer contents by pool stream name.
    pub pools: BTreeMap<String, Vec<([usize; 4], Vec<f32>)>>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.extend_from_slice(&(xs.len() as u64).to_le_bytes());
    for v in xs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {} (wanted {n} more)",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: non-UTF8 name", self.path.display())))
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u64()? as usize;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| {
            Error::Checkpoint(format!("{}: array length overflow", self.path.display()))
        })?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config_hash);
        put_str(&mut out, &self.variant);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.global_step.to_le_bytes());

        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, xs) in &self.arrays {
            put_str(&mut out, name);
            put_f32s(&mut out, xs);
        }
        out.extend_from_slice(&(self.counters.len() as u32).to_le_bytes());
        for (name, v) in &self.counters {
            put_str(&mut out, name);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.streams.len() as u32).to_le_bytes());
        for (name, pos) in &self.streams {
            put_str(&mut out, name);
            out.extend_from_slice(&pos.to_le_bytes());
        }
        out.extend_from_slice(&(self.pools.len() as u32).to_le_bytes());
        for (name, items) in &self.pools {
            put_str(&mut out, name);
            out.extend_from_slice(&(items.len() as u32).to_le_bytes());
            for (dims, data) in items {
                for d in dims {
                    out.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                put_f32s(&mut out, data);
            }
        }

        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("ssn1.tmp");
        std::fs::write(&tmp, &out)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        audit::record_read(path);
        let buf = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut c = Cursor { buf: &buf, pos: 0, path };
        if c.take(4)? != MAGIC {
            return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {version} (expected {VERSION})",
                path.display()
            )));
        }
        let config_hash = c.string()?;
        let variant = c.string()?;
        let epoch = c.u64()?;
        let global_step = c.u64()?;

        let mut arrays = BTreeMap::new();
        for _ in 0..c.u32()? {
            let name = c.string()?;
            let xs = c.f32s()?;
            arrays.insert(name, xs);
        }
        let mut counters = BTreeMap::new();
        for _ in 0..c.u32()? {
            let name = c.string()?;
            let v = c.u64()?;
            counters.insert(name, v);
        }
        let mut streams = BTreeMap::new();
        for _ in 0..c.u32()? {
            let name = c.string()?;
            let pos = c.u128()?;
            streams.insert(name, pos);
        }
        let mut pools = BTreeMap::new();
        for _ in 0..c.u32()? {
            let name = c.string()?;
            let n_items = c.u32()?;
            let mut items = Vec::with_capacity(n_items as usize);
            for _ in 0..n_items {
                let mut dims = [0usize; 4];
                for d in &mut dims {
                    *d = c.u64()? as usize;
                }
                items.push((dims, c.f32s()?));
            }
            pools.insert(name, items);
        }
        if c.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{}: {} trailing bytes",
                path.display(),
                buf.len() - c.pos
            )));
        }
        Ok(Checkpoint { config_hash, variant, epoch, global_step, arrays, counters, streams, pools })
    }
}
