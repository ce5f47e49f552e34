//! Binary snapshot container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "TWSNAP\0\0"
//! version      u32
//! arch_hash    u64
//! epoch        u64
//! seed         u64
//! rng          [u8; 32] seed, u64 stream, u128 word position
//! adam         f64 lr, f64 beta1, f64 beta2, f64 eps, u64 step
//! n_params     u32, then per parameter:
//!              u16 name length, name bytes, u8 partition, u8 ndim,
//!              u32 per dim, f64 per value
//! n_moments    u32, then per moment:
//!              u16 name length, name bytes, u64 step, u32 length,
//!              f64 first moments, f64 second moments
//! checksum     first 8 bytes of SHA-256 over everything above
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grad::{AdamState, ParamSet, Partition, Tensor};

use crate::grad::Moments;

pub const SNAPSHOT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TWSNAP\0\0";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub version: u32,
    pub arch_hash: u64,
    pub epoch: u64,
    pub seed: u64,
    pub rng: RngState,
    pub params: ParamSet,
    pub adam: AdamState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Snapshot("truncated snapshot".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
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
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Snapshot("non-utf8 name".into()))
    }
}

fn checksum(body: &[u8]) -> u64 {
    let d = Sha256::digest(body);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

impl ModelSnapshot {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(self.version);
        w.u64(self.arch_hash);
        w.u64(self.epoch);
        w.u64(self.seed);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.u128(self.rng.word_pos);
        w.f64(self.adam.lr);
        w.f64(self.adam.beta1);
        w.f64(self.adam.beta2);
        w.f64(self.adam.eps);
        w.u64(self.adam.t);
        w.u32(self.params.len() as u32);
        for e in self.params.iter() {
            w.name(&e.name);
            w.u8(e.partition.code());
            w.u8(e.tensor.shape().len() as u8);
            e.tensor.shape().iter().for_each(|&d| w.u32(d as u32));
            e.tensor.data().iter().for_each(|&v| w.f64(v));
        }
        w.u32(self.adam.moments.len() as u32);
        for (name, m) in &self.adam.moments {
            w.name(name);
            w.u64(m.t);
            w.u32(m.m.len() as u32);
            m.m.iter().for_each(|&v| w.f64(v));
            m.v.iter().for_each(|&v| w.f64(v));
        }
        let sum = checksum(&w.0);
        w.u64(sum);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 8 || &buf[..8] != MAGIC {
            return Err(Error::Snapshot("not a snapshot file".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 8);
        if checksum(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Snapshot("checksum mismatch (corrupt snapshot)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        let arch_hash = r.u64()?;
        let epoch = r.u64()?;
        let seed = r.u64()?;
        let rng = RngState {
            seed: r.take(32)?.try_into().unwrap(),
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let mut adam = AdamState::new(r.f64()?);
        adam.beta1 = r.f64()?;
        adam.beta2 = r.f64()?;
        adam.eps = r.f64()?;
        adam.t = r.u64()?;
        let mut params = ParamSet::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let partition =
                Partition::from_code(r.u8()?).ok_or_else(|| Error::Snapshot(format!("bad partition for `{name}`")))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            let data = r.f64s(n)?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Snapshot(e.to_string()))?;
            params.insert(name, partition, t).map_err(|e| Error::Snapshot(e.to_string()))?;
        }
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let t = r.u64()?;
            let n = r.u32()? as usize;
            let m = r.f64s(n)?;
            let v = r.f64s(n)?;
            adam.moments.insert(name, Moments { m, v, t });
        }
        if r.pos != body.len() {
            return Err(Error::Snapshot("trailing bytes".into()));
        }
        Ok(Self {
            version,
            arch_hash,
            epoch,
            seed,
            rng,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{ArchConfig, MtlModel};

    #[test]
    fn bytes_round_trip() {
        let mut m = MtlModel::build(ArchConfig::default(), 9).unwrap();
        m.epoch = 5;
        let snap = m.snapshot();
        let back = ModelSnapshot::from_bytes(&snap.to_bytes()).unwrap();
        assert_eq!(snap, back);
    }

    #[test]
    fn corruption_is_detected() {
        let m = MtlModel::build(ArchConfig::default(), 9).unwrap();
        let mut bytes = m.snapshot().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(ModelSnapshot::from_bytes(&bytes), Err(Error::Snapshot(_))));
        assert!(ModelSnapshot::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn mismatched_architecture_is_refused() {
        let a = MtlModel::build(ArchConfig::default(), 1).unwrap();
        let mut b = MtlModel::build(
            ArchConfig {
                det_hidden: 4,
                ..ArchConfig::default()
            },
            1,
        )
        .unwrap();
        assert!(matches!(b.restore(&a.snapshot()), Err(Error::Snapshot(_))));
    }
}
