//! Binary checkpoints and channel-realization snapshots.
//!
//! All integers and floats are little-endian. A checkpoint is
//!
//! ```text
//! "SEMUXCKP"  u32 version  [u8; 32] config hash  u64 epoch
//! [u8; 32] rng seed  u64 rng stream  u128 rng word position
//! u32 count, then per parameter:
//!   u32 name length, name, u32 group length, group, u32 rank, u64 dims..., f64 values...
//! ```
//!
//! A realization snapshot is `"SEMUXCHR"  u32 version` followed by the
//! blobs `taps.re`, `taps.im`, `h.re`, `h.im` in the same blob layout.

use crate::channel::ChannelRealization;
use crate::diffcore::{ComplexTensor, RealTensor};
use crate::error::{Error, Result};
use crate::nets::{ArchConfig, ModelParams, ParamGroup, SemuxModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const CKP_MAGIC: &[u8; 8] = b"SEMUXCKP";
const CHR_MAGIC: &[u8; 8] = b"SEMUXCHR";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: [u8; 32],
    pub epoch: u64,
    pub rng: ChaCha8Rng,
    pub params: ModelParams,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &RealTensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {} (need {n} more)", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(format!("bad name: {e}")))
    }
    fn tensor(&mut self) -> Result<RealTensor> {
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        RealTensor::new(&shape, data)
    }
    fn magic(&mut self, want: &[u8; 8], what: &str) -> Result<()> {
        let got = self.take(8)?;
        if got != want {
            return Err(Error::Format(format!("{what}: bad magic {:?}", String::from_utf8_lossy(got))));
        }
        let v = self.u32()?;
        if v != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("{what}: unsupported version {v}")));
        }
        Ok(())
    }
    fn done(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.at)));
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32], epoch: u64, rng: ChaCha8Rng, params: ModelParams) -> Self {
        Self { version: CHECKPOINT_VERSION, config_hash, epoch, rng, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CKP_MAGIC);
        w.u32(self.version);
        w.0.extend_from_slice(&self.config_hash);
        w.u64(self.epoch);
        w.0.extend_from_slice(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.0.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        w.u32(self.params.len() as u32);
        for e in self.params.entries() {
            w.str(&e.name);
            w.str(e.group.name());
            w.tensor(&e.value);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        r.magic(CKP_MAGIC, "checkpoint")?;
        let config_hash = r.array()?;
        let epoch = r.u64()?;
        let mut rng = ChaCha8Rng::from_seed(r.array()?);
        rng.set_stream(r.u64()?);
        rng.set_word_pos(u128::from_le_bytes(r.array()?));
        let n = r.u32()?;
        let mut params = ModelParams::default();
        for _ in 0..n {
            let name = r.str()?;
            let g = r.str()?;
            let group = ParamGroup::from_name(&g).ok_or_else(|| Error::Format(format!("unknown group `{g}` for {name}")))?;
            params.insert(name, group, r.tensor()?)?;
        }
        r.done()?;
        Ok(Self { version: CHECKPOINT_VERSION, config_hash, epoch, rng, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
    }

    /// Reads `path`; a config-hash mismatch is an error unless `force`.
    pub fn load(path: &Path, expected_hash: &[u8; 32], force: bool) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let ck = Self::from_bytes(&bytes)?;
        if &ck.config_hash != expected_hash {
            if !force {
                return Err(Error::Config(format!(
                    "{} was written for a different configuration (hash {} vs {}); pass --force to load anyway",
                    path.display(),
                    hex(&ck.config_hash),
                    hex(expected_hash)
                )));
            }
            log::warn!("loading {} despite a config hash mismatch", path.display());
        }
        Ok(ck)
    }

    /// Model for `arch`; names, groups and shapes must match a fresh model.
    pub fn into_model(self, arch: ArchConfig) -> Result<SemuxModel> {
        let fresh = SemuxModel::init(arch.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let (a, b) = (fresh.params.entries(), self.params.entries());
        if a.len() != b.len() {
            return Err(Error::Format(format!("checkpoint has {} parameters, model needs {}", b.len(), a.len())));
        }
        for (x, y) in a.iter().zip(b) {
            if x.name != y.name || x.group != y.group || x.value.shape() != y.value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                    y.name,
                    y.value.shape(),
                    x.name,
                    x.value.shape()
                )));
            }
        }
        Ok(SemuxModel { arch, params: self.params })
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn realization_to_bytes(real: &ChannelRealization) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHR_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    for t in [&real.taps.re, &real.taps.im, &real.h.re, &real.h.im] {
        w.tensor(t);
    }
    w.0
}

pub fn realization_from_bytes(bytes: &[u8]) -> Result<ChannelRealization> {
    let mut r = Reader { bytes, at: 0 };
    r.magic(CHR_MAGIC, "channel realization")?;
    let taps = ComplexTensor::new(r.tensor()?, r.tensor()?)?;
    let h = ComplexTensor::new(r.tensor()?, r.tensor()?)?;
    r.done()?;
    if taps.shape().len() != 3 || h.shape().len() != 3 || taps.shape()[1..] != h.shape()[1..] {
        return Err(Error::Format(format!("realization taps {:?} with response {:?}", taps.shape(), h.shape())));
    }
    Ok(ChannelRealization { taps, h })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelModel, Fading};
    use crate::modem::OfdmConfig;
    use rand::RngCore;

    fn small_arch() -> ArchConfig {
        ArchConfig { key_dim: 4, packets: 1, k_used: 4, csi_hidden: 4, rx_hidden: 6, feature_dim: 5, ..ArchConfig::default() }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = SemuxModel::init(small_arch(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.set_stream(5);
        rng.next_u64();
        let ck = Checkpoint::new([7; 32], 4, rng, model.params.clone());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.into_model(small_arch()).unwrap().params, model.params);
    }

    #[test]
    fn corrupt_or_mismatched_checkpoints_rejected() {
        let model = SemuxModel::init(small_arch(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let ck = Checkpoint::new([1; 32], 0, ChaCha8Rng::seed_from_u64(0), model.params);
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let other = ArchConfig { feature_dim: 6, ..small_arch() };
        assert!(ck.into_model(other).is_err());
    }

    #[test]
    fn realization_round_trip() {
        let ofdm = OfdmConfig::new(16, 8).unwrap();
        let cm = ChannelModel::new(2, 3, 4, Fading::Rayleigh, 20.0).unwrap();
        let real = cm.sample_realization(&ofdm, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let bytes = realization_to_bytes(&real);
        let back = realization_from_bytes(&bytes).unwrap();
        assert_eq!(back, real);
        assert_eq!(realization_to_bytes(&back), bytes);
    }
}
