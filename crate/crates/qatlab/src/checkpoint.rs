//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"QATL"
//! version u32 (currently 1)
//! count   u32
//! entry*  name_len u32, name utf-8, kind u8, body
//! ```
//!
//! Entry kinds:
//!
//! * `0` tensor — rank u32, extents u64 each, payload 8-byte floats
//! * `1` quant spec — bits u32, granularity u8, learnable u8,
//!   group count u32, scales 8-byte floats, zero-shifts i32
//! * `2` flag — u8 (0 or 1)
//! * `3` integer list — count u32, i64 each
//! * `4` packed weights — bits u32, n u64, m u64, channel count u32,
//!   scales 8-byte floats, zero-shifts u8, byte count u64, code bytes
//!
//! A completed run stores `aux.present = false` and no aux tensors, so the
//! auxiliary payload of a shipped checkpoint is exactly zero bytes. Saves go
//! through a temp file plus rename, so an aborted writer never corrupts an
//! existing checkpoint.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::intexec::PackedWeights;
use crate::quantizer::{Granularity, QuantSpec};

pub const MAGIC: &[u8; 4] = b"QATL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Tensor { shape: Vec<usize>, data: Vec<f64> },
    Spec(QuantSpec<f64>),
    Flag(bool),
    Ints(Vec<i64>),
    Packed(PackedWeights<f64>),
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Entry)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::CheckpointFormat(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: &str, entry: Entry) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::invalid(format!("duplicate checkpoint entry {name:?}")));
        }
        self.entries.push((name.to_string(), entry));
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name) {
            Some(Entry::Tensor { shape, data }) => Ok((shape, data)),
            _ => Err(bad(format!("missing tensor entry {name:?}"))),
        }
    }

    pub fn spec(&self, name: &str) -> Result<&QuantSpec<f64>> {
        match self.get(name) {
            Some(Entry::Spec(s)) => Ok(s),
            _ => Err(bad(format!("missing quant spec entry {name:?}"))),
        }
    }

    pub fn flag(&self, name: &str) -> Result<bool> {
        match self.get(name) {
            Some(Entry::Flag(b)) => Ok(*b),
            _ => Err(bad(format!("missing flag entry {name:?}"))),
        }
    }

    pub fn ints(&self, name: &str) -> Result<&[i64]> {
        match self.get(name) {
            Some(Entry::Ints(v)) => Ok(v),
            _ => Err(bad(format!("missing integer entry {name:?}"))),
        }
    }

    pub fn packed(&self, name: &str) -> Result<&PackedWeights<f64>> {
        match self.get(name) {
            Some(Entry::Packed(p)) => Ok(p),
            _ => Err(bad(format!("missing packed entry {name:?}"))),
        }
    }

    /// Total serialized bytes of all entries whose name starts with `prefix`
    /// (directory records plus payload).
    pub fn prefix_bytes(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, e)| {
                let mut buf = Vec::new();
                write_entry(&mut buf, n, e);
                buf.len()
            })
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            write_entry(&mut out, name, entry);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("entry name is not utf-8"))?
                .to_string();
            let entry = read_entry(&mut r)?;
            ckpt.insert(&name, entry)?;
        }
        if r.pos != buf.len() {
            return Err(bad("trailing bytes after last entry"));
        }
        Ok(ckpt)
    }

    /// Atomic save: write to a temp file in the target directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp-{}",
            path.file_name().and_then(|f| f.to_str()).unwrap_or("ckpt"),
            std::process::id()
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

fn write_entry(out: &mut Vec<u8>, name: &str, entry: &Entry) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    match entry {
        Entry::Tensor { shape, data } => {
            out.push(0);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Entry::Spec(s) => {
            out.push(1);
            out.extend_from_slice(&s.bits.to_le_bytes());
            out.push(match s.granularity {
                Granularity::PerTensor => 0,
                Granularity::PerChannel => 1,
                Granularity::PerToken => 2,
            });
            out.push(s.learnable as u8);
            out.extend_from_slice(&(s.scales.len() as u32).to_le_bytes());
            for &v in &s.scales {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for &z in &s.zeros {
                out.extend_from_slice(&(z as i32).to_le_bytes());
            }
        }
        Entry::Flag(b) => {
            out.push(2);
            out.push(*b as u8);
        }
        Entry::Ints(v) => {
            out.push(3);
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for &x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Entry::Packed(p) => {
            out.push(4);
            out.extend_from_slice(&p.bits.to_le_bytes());
            out.extend_from_slice(&(p.n as u64).to_le_bytes());
            out.extend_from_slice(&(p.m as u64).to_le_bytes());
            out.extend_from_slice(&(p.scales.len() as u32).to_le_bytes());
            for &v in &p.scales {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for &z in &p.zeros {
                out.push(z as u8);
            }
            out.extend_from_slice(&(p.bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&p.bytes);
        }
    }
}

fn read_entry(r: &mut Reader) -> Result<Entry> {
    match r.u8()? {
        0 => {
            let rank = r.u32()? as usize;
            if rank > 4 {
                return Err(bad(format!("implausible tensor rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f64s(numel)?;
            Ok(Entry::Tensor { shape, data })
        }
        1 => {
            let bits = r.u32()?;
            let granularity = match r.u8()? {
                0 => Granularity::PerTensor,
                1 => Granularity::PerChannel,
                2 => Granularity::PerToken,
                g => return Err(bad(format!("unknown granularity tag {g}"))),
            };
            let learnable = r.u8()? != 0;
            let groups = r.u32()? as usize;
            let scales = r.f64s(groups)?;
            let zeros = (0..groups)
                .map(|_| r.i32().map(i64::from))
                .collect::<Result<Vec<_>>>()?;
            Ok(Entry::Spec(QuantSpec {
                bits,
                granularity,
                scales,
                zeros,
                learnable,
            }))
        }
        2 => Ok(Entry::Flag(r.u8()? != 0)),
        3 => {
            let count = r.u32()? as usize;
            let v = (0..count).map(|_| r.i64()).collect::<Result<Vec<_>>>()?;
            Ok(Entry::Ints(v))
        }
        4 => {
            let bits = r.u32()?;
            let n = r.u64()? as usize;
            let m = r.u64()? as usize;
            let channels = r.u32()? as usize;
            let scales = r.f64s(channels)?;
            let zeros = (0..channels)
                .map(|_| r.u8().map(i64::from))
                .collect::<Result<Vec<_>>>()?;
            let byte_len = r.u64()? as usize;
            let bytes = r.take(byte_len)?.to_vec();
            Ok(Entry::Packed(PackedWeights {
                bytes,
                scales,
                zeros,
                n,
                m,
                bits,
            }))
        }
        k => Err(bad(format!("unknown entry kind {k}"))),
    }
}

/// FNV-1a over raw bytes; used for artifact determinism checks.
pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert(
            "w",
            Entry::Tensor {
                shape: vec![2, 3],
                data: vec![1.0, -2.5, 0.0, 3.25, f64::MIN_POSITIVE, 1e300],
            },
        )
        .unwrap();
        c.insert(
            "w.qspec",
            Entry::Spec(QuantSpec {
                bits: 4,
                granularity: Granularity::PerChannel,
                scales: vec![0.5, 0.25],
                zeros: vec![8, 3],
                learnable: true,
            }),
        )
        .unwrap();
        c.insert("aux.present", Entry::Flag(false)).unwrap();
        c.insert("phase_log", Entry::Ints(vec![32, 16, 8, 4, 2, 1, 0])).unwrap();
        c.insert(
            "w.packed",
            Entry::Packed(PackedWeights {
                bytes: vec![0x13, 0x2f],
                scales: vec![0.5],
                zeros: vec![7],
                n: 1,
                m: 4,
                bits: 4,
            }),
        )
        .unwrap();
        c
    }

    #[test]
    fn round_trip_preserves_everything() {
        let c = sample();
        let bytes = c.to_bytes();
        let d = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.tensor("w").unwrap().0, &[2, 3]);
        assert!(!d.flag("aux.present").unwrap());
        assert_eq!(d.ints("phase_log").unwrap(), &[32, 16, 8, 4, 2, 1, 0]);
        assert_eq!(d.packed("w.packed").unwrap().bytes, vec![0x13, 0x2f]);
    }

    #[test]
    fn serialization_is_deterministic() {
        assert_eq!(sample().to_bytes(), sample().to_bytes());
        assert_eq!(checksum(&sample().to_bytes()), checksum(&sample().to_bytes()));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointFormat(_))
        ));

        let good = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&good[..good.len() - 1]).is_err());

        let mut extra = good.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());

        let mut version = good.clone();
        version[4] = 99;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = Checkpoint::new();
        c.insert("a", Entry::Flag(true)).unwrap();
        assert!(c.insert("a", Entry::Flag(false)).is_err());
    }

    #[test]
    fn save_load_and_atomicity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        // overwrite keeps the file readable and leaves no temp litter
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn prefix_accounting_sees_zero_aux_bytes_when_absent() {
        let c = sample();
        assert_eq!(c.prefix_bytes("aux.l"), 0);
        assert!(c.prefix_bytes("w") > 0);
        let mut with_aux = Checkpoint::new();
        with_aux
            .insert(
                "aux.l.0",
                Entry::Tensor {
                    shape: vec![4, 2],
                    data: Rng::new(1).normal_vec(8),
                },
            )
            .unwrap();
        assert!(with_aux.prefix_bytes("aux.l") > 64);
    }
}
