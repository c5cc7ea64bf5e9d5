//! OFDM modulator/demodulator as a unitary IFFT/FFT pair.
//!
//! Used subcarrier `k` (ascending frequency) maps onto FFT bin
//! `N − K/2 + k` for `k < K/2` and `1 + (k − K/2)` otherwise; the DC bin and
//! the band edges stay empty as guards.

use crate::diffcore::{fft_values, CVar, ComplexTensor, RealTensor, Tape};
use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OfdmConfig {
    pub fft_size: usize,
    pub used_subcarriers: usize,
}

impl Default for OfdmConfig {
    fn default() -> Self {
        Self { fft_size: 1024, used_subcarriers: 800 }
    }
}

impl OfdmConfig {
    pub fn new(fft_size: usize, used_subcarriers: usize) -> Result<Self> {
        let cfg = Self { fft_size, used_subcarriers };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || !self.fft_size.is_power_of_two() {
            return Err(Error::NotPowerOfTwo { op: "ofdm", len: self.fft_size });
        }
        if self.used_subcarriers == 0 || !self.used_subcarriers.is_multiple_of(2) || self.used_subcarriers >= self.fft_size {
            return Err(Error::Config(format!(
                "used_subcarriers must be even, positive and below fft_size {} (got {})",
                self.fft_size, self.used_subcarriers
            )));
        }
        Ok(())
    }

    /// FFT bin carrying used subcarrier `k`.
    pub fn bin(&self, k: usize) -> usize {
        let half = self.used_subcarriers / 2;
        if k < half {
            self.fft_size - half + k
        } else {
            1 + k - half
        }
    }

    pub fn used_bins(&self) -> Vec<usize> {
        (0..self.used_subcarriers).map(|k| self.bin(k)).collect()
    }

    /// Bins left empty (DC and guard bands).
    pub fn guard_bins(&self) -> Vec<usize> {
        let half = self.used_subcarriers / 2;
        std::iter::once(0).chain(half + 1..self.fft_size - half).collect()
    }
}

/// Time-domain baseband samples `[P, fft_size, streams]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: ComplexTensor,
    /// Factor applied at the transmitter to bring the peak magnitude to 1.
    pub scale: f64,
}

impl Waveform {
    pub fn peak(&self) -> f64 {
        self.samples.max_abs()
    }

    /// Interleaved little-endian `f32` I/Q pairs in row-major sample order.
    pub fn write_iq_f32(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(&self.to_iq_bytes())?;
        out.flush()?;
        Ok(())
    }

    pub fn to_iq_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.samples.len() * 8);
        for (re, im) in self.samples.re.data().iter().zip(self.samples.im.data()) {
            buf.extend_from_slice(&(*re as f32).to_le_bytes());
            buf.extend_from_slice(&(*im as f32).to_le_bytes());
        }
        buf
    }

    pub fn read_iq_f32(path: &Path, shape: &[usize], scale: f64) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let n: usize = shape.iter().product();
        if bytes.len() != n * 8 {
            return Err(Error::Format(format!("{} bytes of I/Q for {} samples", bytes.len(), n)));
        }
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        for pair in bytes.chunks_exact(8) {
            re.push(f32::from_le_bytes(pair[..4].try_into().expect("4 bytes")) as f64);
            im.push(f32::from_le_bytes(pair[4..].try_into().expect("4 bytes")) as f64);
        }
        let samples = ComplexTensor::new(RealTensor::new(shape, re)?, RealTensor::new(shape, im)?)?;
        Ok(Self { samples, scale })
    }
}

fn check_freq(op: &'static str, shape: &[usize], cfg: &OfdmConfig) -> Result<()> {
    if shape.len() != 3 || shape[1] != cfg.used_subcarriers {
        return Err(Error::shape(
            op,
            format!("symbols {:?}, expected [P, {}, streams]", shape, cfg.used_subcarriers),
        ));
    }
    Ok(())
}

/// Places `[P, K, S]` symbols onto their bins: `[P, fft_size, S]`, guards zero.
pub fn map_subcarriers(tape: &mut Tape, z: CVar, cfg: &OfdmConfig) -> Result<CVar> {
    let s = tape.shape(z.re).to_vec();
    check_freq("map_subcarriers", &s, cfg)?;
    let half = cfg.used_subcarriers / 2;
    let neg = tape.cnarrow(z, 1, 0, half)?;
    let pos = tape.cnarrow(z, 1, half, half)?;
    let dc = tape.complex_constant(ComplexTensor::zeros(&[s[0], 1, s[2]]));
    let guard = tape.complex_constant(ComplexTensor::zeros(&[s[0], cfg.fft_size - 1 - cfg.used_subcarriers, s[2]]));
    tape.cconcat(&[dc, pos, guard, neg], 1)
}

/// Inverse of [`map_subcarriers`]: `[P, fft_size, S]` bins to `[P, K, S]`.
pub fn extract_subcarriers(tape: &mut Tape, bins: CVar, cfg: &OfdmConfig) -> Result<CVar> {
    let s = tape.shape(bins.re).to_vec();
    if s.len() != 3 || s[1] != cfg.fft_size {
        return Err(Error::shape("extract_subcarriers", format!("{:?}, fft_size {}", s, cfg.fft_size)));
    }
    let half = cfg.used_subcarriers / 2;
    let pos = tape.cnarrow(bins, 1, 1, half)?;
    let neg = tape.cnarrow(bins, 1, cfg.fft_size - half, half)?;
    tape.cconcat(&[neg, pos], 1)
}

/// Peak-normalization factor for the time-domain image of `z[P, K, S]`;
/// 1 for an all-zero input.
pub fn peak_scale(z: &ComplexTensor, cfg: &OfdmConfig) -> Result<f64> {
    check_freq("peak_scale", z.shape(), cfg)?;
    let (p, k, st) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let mut bins = ComplexTensor::zeros(&[p, cfg.fft_size, st]);
    for pi in 0..p {
        for ki in 0..k {
            let b = cfg.bin(ki);
            for si in 0..st {
                bins.set((pi * cfg.fft_size + b) * st + si, z.get((pi * k + ki) * st + si));
            }
        }
    }
    let peak = fft_values(&bins, 1, true)?.max_abs();
    Ok(if peak > 0.0 { 1.0 / peak } else { 1.0 })
}

/// Tape form of [`modulate`]; the peak scale is a constant (no gradient
/// flows through the max).
pub fn modulate_var(tape: &mut Tape, z: CVar, cfg: &OfdmConfig) -> Result<(CVar, f64)> {
    cfg.validate()?;
    let scale = peak_scale(&tape.complex_value(z), cfg)?;
    let bins = map_subcarriers(tape, z, cfg)?;
    let time = tape.ifft(bins, 1)?;
    Ok((tape.cscale(time, scale)?, scale))
}

/// Tape form of [`demodulate`].
pub fn demodulate_var(tape: &mut Tape, w: CVar, scale: f64, cfg: &OfdmConfig) -> Result<CVar> {
    cfg.validate()?;
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::invalid("demodulate", format!("scale {scale}")));
    }
    let bins = tape.fft(w, 1)?;
    let used = extract_subcarriers(tape, bins, cfg)?;
    tape.cscale(used, 1.0 / scale)
}

/// Frequency-domain symbols `[P, K, N_t]` to a peak-normalized waveform.
pub fn modulate(z: &ComplexTensor, cfg: &OfdmConfig) -> Result<Waveform> {
    let mut tape = Tape::new();
    let zv = tape.complex_constant(z.clone());
    let (w, scale) = modulate_var(&mut tape, zv, cfg)?;
    Ok(Waveform { samples: tape.complex_value(w), scale })
}

/// Waveform `[P, fft_size, N_r]` back to used-subcarrier symbols `[P, K, N_r]`.
pub fn demodulate(w: &Waveform, cfg: &OfdmConfig) -> Result<ComplexTensor> {
    let s = w.samples.shape();
    if s.len() != 3 || s[1] != cfg.fft_size {
        return Err(Error::shape("demodulate", format!("samples {:?}, fft_size {}", s, cfg.fft_size)));
    }
    let mut tape = Tape::new();
    let wv = tape.complex_constant(w.samples.clone());
    let z = demodulate_var(&mut tape, wv, w.scale, cfg)?;
    Ok(tape.complex_value(z))
}

/// Raw (unscaled) FFT bins of a received waveform, `[P, fft_size, N_r]`.
pub fn spectrum(w: &Waveform) -> Result<ComplexTensor> {
    fft_values(&w.samples, 1, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> OfdmConfig {
        OfdmConfig::new(64, 16).unwrap()
    }

    #[test]
    fn defaults_mirror_reference_numerology() {
        let c = OfdmConfig::default();
        assert_eq!((c.fft_size, c.used_subcarriers), (1024, 800));
        assert_eq!(c.guard_bins().len(), 224);
        let mut all = c.used_bins();
        all.extend(c.guard_bins());
        all.sort();
        assert_eq!(all, (0..1024).collect::<Vec<_>>());
    }

    #[test]
    fn zero_symbols_stay_zero() {
        let w = modulate(&ComplexTensor::zeros(&[2, 16, 2]), &cfg()).unwrap();
        assert_eq!(w.scale, 1.0);
        assert_eq!(w.peak(), 0.0);
    }

    #[test]
    fn single_tone_has_constant_envelope() {
        let mut z = ComplexTensor::zeros(&[1, 16, 1]);
        z.set(5, (0.3, -0.4));
        let w = modulate(&z, &cfg()).unwrap();
        for i in 0..64 {
            let (a, b) = w.samples.get(i);
            assert!((a.hypot(b) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_and_unit_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = ComplexTensor::randn(&[2, 16, 3], 1.0, &mut rng);
        let w = modulate(&z, &cfg()).unwrap();
        assert!((w.peak() - 1.0).abs() < 1e-12);
        let back = demodulate(&w, &cfg()).unwrap();
        assert!(back.max_abs_diff(&z) < 1e-9);
    }

    #[test]
    fn guards_are_empty_and_parseval_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = ComplexTensor::randn(&[1, 16, 2], 1.0, &mut rng);
        let w = modulate(&z, &cfg()).unwrap();
        let spec = spectrum(&w).unwrap();
        for &g in &cfg().guard_bins() {
            for s in 0..2 {
                let (a, b) = spec.get(g * 2 + s);
                assert!(a.hypot(b) < 1e-12);
            }
        }
        let time_energy = w.samples.energy() / (w.scale * w.scale);
        assert!((time_energy - z.energy()).abs() < 1e-9);
    }

    #[test]
    fn iq_export_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = modulate(&ComplexTensor::randn(&[1, 16, 1], 1.0, &mut rng), &cfg()).unwrap();
        let bytes = w.to_iq_bytes();
        assert_eq!(bytes.len(), 64 * 8);
        assert_eq!(&bytes[..4], &(w.samples.re.data()[0] as f32).to_le_bytes());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.iq");
        w.write_iq_f32(&path).unwrap();
        let back = Waveform::read_iq_f32(&path, &[1, 64, 1], w.scale).unwrap();
        assert!(back.samples.max_abs_diff(&w.samples) < 1e-6);
    }

    #[test]
    fn bad_config_rejected() {
        assert!(OfdmConfig::new(1000, 800).is_err());
        assert!(OfdmConfig::new(1024, 1024).is_err());
        assert!(OfdmConfig::new(1024, 3).is_err());
        let w = Waveform { samples: ComplexTensor::zeros(&[1, 32, 1]), scale: 1.0 };
        assert!(demodulate(&w, &cfg()).is_err());
    }
}
