//! Frequency-selective MIMO fading channel with AWGN.
//!
//! A realization is a set of `L` complex tap matrices. The time-domain path
//! convolves each transmit stream circularly with the taps, so the
//! frequency-domain path (`ẑ_k = H_k z_k + n`) with `H` the DFT of the taps
//! is exact, with no cyclic prefix needed.

use crate::codec::Csi;
use crate::diffcore::{fft_values, CVar, ComplexTensor, RealTensor, Tape};
use crate::error::{Error, Result};
use crate::modem::{self, OfdmConfig, Waveform};
use rand::Rng;
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fading {
    Rayleigh,
    Rician { k_factor_db: f64 },
}

/// Angles (radians) of the line-of-sight path at a uniform half-wavelength array.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LosGeometry {
    pub departure: f64,
    pub arrival: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelModel {
    pub n_tx: usize,
    pub n_rx: usize,
    pub fading: Fading,
    /// Mean power per tap, summing to one; its length is the tap count `L`.
    pub power_delay_profile: Vec<f64>,
    pub snr_db: f64,
    pub los: LosGeometry,
}

/// Exponentially decaying profile whose last tap sits 20 dB below the first.
pub fn exponential_pdp(n_taps: usize) -> Vec<f64> {
    let raw: Vec<f64> = if n_taps == 1 {
        vec![1.0]
    } else {
        (0..n_taps).map(|l| 10f64.powf(-2.0 * l as f64 / (n_taps - 1) as f64)).collect()
    };
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

impl ChannelModel {
    pub fn new(n_tx: usize, n_rx: usize, n_taps: usize, fading: Fading, snr_db: f64) -> Result<Self> {
        let m = Self {
            n_tx,
            n_rx,
            fading,
            power_delay_profile: exponential_pdp(n_taps.max(1)),
            snr_db,
            los: LosGeometry::default(),
        };
        if n_taps == 0 {
            return Err(Error::Config("channel needs at least one tap".into()));
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tx == 0 || self.n_rx == 0 {
            return Err(Error::Config("channel needs at least one antenna per side".into()));
        }
        if self.power_delay_profile.is_empty() {
            return Err(Error::Config("power delay profile is empty".into()));
        }
        let total: f64 = self.power_delay_profile.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.power_delay_profile.iter().any(|&p| p < 0.0) {
            return Err(Error::Config(format!("tap powers must be nonnegative and sum to 1 (sum {total})")));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::Config("snr_db must be finite".into()));
        }
        Ok(())
    }

    pub fn n_taps(&self) -> usize {
        self.power_delay_profile.len()
    }

    /// `σ² = 10^(−SNR/10)` for unit peak transmit power.
    pub fn noise_variance(&self) -> f64 {
        10f64.powf(-self.snr_db / 10.0)
    }

    /// Same statistics with new line-of-sight angles (a moved terminal).
    pub fn relocated<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let mut m = self.clone();
        m.los = LosGeometry {
            departure: rng.gen_range(-PI / 2.0..PI / 2.0),
            arrival: rng.gen_range(-PI / 2.0..PI / 2.0),
        };
        m
    }

    /// Unit-modulus LoS matrix `a_r(arrival) a_t(departure)ᴴ`, `[N_r, N_t]`.
    pub fn los_matrix(&self) -> ComplexTensor {
        let mut m = ComplexTensor::zeros(&[self.n_rx, self.n_tx]);
        let (st, sr) = (self.los.departure.sin(), self.los.arrival.sin());
        for r in 0..self.n_rx {
            for t in 0..self.n_tx {
                let phase = PI * (r as f64 * sr - t as f64 * st);
                m.set(r * self.n_tx + t, (phase.cos(), phase.sin()));
            }
        }
        m
    }

    pub fn sample_realization<R: Rng + ?Sized>(&self, cfg: &OfdmConfig, rng: &mut R) -> Result<ChannelRealization> {
        let (l, nr, nt) = (self.n_taps(), self.n_rx, self.n_tx);
        let per = nr * nt;
        let mut taps = ComplexTensor::zeros(&[l, nr, nt]);
        for (li, &power) in self.power_delay_profile.iter().enumerate() {
            let (scatter, los) = match self.fading {
                Fading::Rician { k_factor_db } if li == 0 => {
                    let k = 10f64.powf(k_factor_db / 10.0);
                    if k.is_infinite() {
                        (0.0, power)
                    } else {
                        (power / (k + 1.0), power * k / (k + 1.0))
                    }
                }
                _ => (power, 0.0),
            };
            let draw = ComplexTensor::randn(&[per], scatter, rng);
            let los_m = self.los_matrix();
            let amp = los.sqrt();
            for j in 0..per {
                let (a, b) = draw.get(j);
                let (c, d) = los_m.get(j);
                taps.set(li * per + j, (a + amp * c, b + amp * d));
            }
        }
        ChannelRealization::from_taps(taps, cfg)
    }
}

/// Channel taps and the CFR on the used subcarriers.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    /// `[L, N_r, N_t]`.
    pub taps: ComplexTensor,
    /// `[K_used, N_r, N_t]`, `H_k = Σ_ℓ taps_ℓ e^{−j2π·bin(k)·ℓ/N}`.
    pub h: ComplexTensor,
}

impl ChannelRealization {
    pub fn from_taps(taps: ComplexTensor, cfg: &OfdmConfig) -> Result<Self> {
        cfg.validate()?;
        let s = taps.shape().to_vec();
        if s.len() != 3 || s[0] == 0 || s[0] > cfg.fft_size {
            return Err(Error::shape("channel taps", format!("{:?} for fft_size {}", s, cfg.fft_size)));
        }
        let per = s[1] * s[2];
        let mut padded = ComplexTensor::zeros(&[cfg.fft_size, s[1], s[2]]);
        for i in 0..taps.len() {
            padded.set(i, taps.get(i));
        }
        let spec = fft_values(&padded, 0, false)?;
        let root_n = (cfg.fft_size as f64).sqrt();
        let mut h = ComplexTensor::zeros(&[cfg.used_subcarriers, s[1], s[2]]);
        for k in 0..cfg.used_subcarriers {
            let b = cfg.bin(k);
            for j in 0..per {
                let (re, im) = spec.get(b * per + j);
                h.set(k * per + j, (re * root_n, im * root_n));
            }
        }
        Ok(Self { taps, h })
    }

    /// Single-tap identity channel (`N_r = N_t = n`).
    pub fn identity(n: usize, cfg: &OfdmConfig) -> Result<Self> {
        let mut taps = ComplexTensor::zeros(&[1, n, n]);
        for i in 0..n {
            taps.set(i * n + i, (1.0, 0.0));
        }
        Self::from_taps(taps, cfg)
    }

    pub fn n_rx(&self) -> usize {
        self.taps.shape()[1]
    }

    pub fn n_tx(&self) -> usize {
        self.taps.shape()[2]
    }

    /// Max deviation of the stored CFR from a direct DFT sum over the taps.
    pub fn cfr_consistency(&self, cfg: &OfdmConfig) -> f64 {
        let s = self.taps.shape();
        let per = s[1] * s[2];
        let mut worst: f64 = 0.0;
        for k in 0..cfg.used_subcarriers {
            let b = cfg.bin(k) as f64;
            for j in 0..per {
                let (mut re, mut im) = (0.0, 0.0);
                for l in 0..s[0] {
                    let (a, c) = self.taps.get(l * per + j);
                    let ang = -2.0 * PI * b * l as f64 / cfg.fft_size as f64;
                    re += a * ang.cos() - c * ang.sin();
                    im += a * ang.sin() + c * ang.cos();
                }
                let (hr, hi) = self.h.get(k * per + j);
                worst = worst.max((hr - re).hypot(hi - im));
            }
        }
        worst
    }

    /// Genie CSI: the true CFR and a flat noise-variance vector.
    pub fn csi(&self, sigma2: f64) -> Result<Csi> {
        Csi::new(self.h.clone(), RealTensor::full(&[self.h.shape()[0]], sigma2))
    }
}

fn check_latent(op: &'static str, shape: &[usize], h: &ComplexTensor) -> Result<()> {
    let hs = h.shape();
    if shape.len() != 4 || shape[2] != hs[0] || shape[3] != hs[2] {
        return Err(Error::shape(op, format!("z {:?} with CFR {:?}", shape, hs)));
    }
    Ok(())
}

/// `ẑ_{b,p,k} = H_k z_{b,p,k} + n` for `z[B, P, K, N_t]`; `noise` is
/// `[B, P, K, N_r]` or absent. H and the noise are constants on the tape.
pub fn apply_freq_with_noise(tape: &mut Tape, z: CVar, h: &ComplexTensor, noise: Option<&ComplexTensor>) -> Result<CVar> {
    let s = tape.shape(z.re).to_vec();
    check_latent("apply_freq", &s, h)?;
    let (b, p, k, nt) = (s[0], s[1], s[2], s[3]);
    let nr = h.shape()[1];
    let zt = tape.cpermute(z, &[2, 3, 0, 1])?;
    let zt = tape.creshape(zt, &[k, nt, b * p])?;
    let hv = tape.complex_constant(h.clone());
    let y = tape.cbmm(hv, zt)?;
    let y = tape.creshape(y, &[k, nr, b, p])?;
    let y = tape.cpermute(y, &[2, 3, 0, 1])?;
    match noise {
        None => Ok(y),
        Some(n) => {
            if n.shape() != [b, p, k, nr] {
                return Err(Error::shape("apply_freq", format!("noise {:?}, expected {:?}", n.shape(), [b, p, k, nr])));
            }
            let nv = tape.complex_constant(n.clone());
            tape.cadd(y, nv)
        }
    }
}

/// Circularly-symmetric noise with variance `sigma2[k] · gain[b]` at `[b, p, k, r]`.
pub fn draw_freq_noise<R: Rng + ?Sized>(shape: &[usize], sigma2: &[f64], gain: &[f64], rng: &mut R) -> Result<ComplexTensor> {
    let (b, p, k, nr) = (shape[0], shape[1], shape[2], shape[3]);
    if sigma2.len() != k || gain.len() != b {
        return Err(Error::shape(
            "apply_freq",
            format!("{} noise variances for {} subcarriers, {} gains for batch {}", sigma2.len(), k, gain.len(), b),
        ));
    }
    let mut n = ComplexTensor::randn(shape, 1.0, rng);
    for (bi, &g) in gain.iter().enumerate().take(b) {
        for pi in 0..p {
            for (ki, &s2) in sigma2.iter().enumerate().take(k) {
                let std = (s2 * g).sqrt();
                for r in 0..nr {
                    let idx = ((bi * p + pi) * k + ki) * nr + r;
                    let (a, c) = n.get(idx);
                    n.set(idx, (a * std, c * std));
                }
            }
        }
    }
    Ok(n)
}

/// Frequency-domain channel with `CN(0, σ²_k)` noise per subcarrier.
pub fn apply_freq<R: Rng + ?Sized>(
    tape: &mut Tape,
    z: CVar,
    real: &ChannelRealization,
    sigma2: &[f64],
    rng: &mut R,
) -> Result<CVar> {
    let b = tape.shape(z.re).first().copied().unwrap_or(0);
    apply_freq_scaled(tape, z, real, sigma2, &vec![1.0; b], rng)
}

/// [`apply_freq`] with an extra per-item noise gain (used to fold the
/// transmitter's peak normalization into the frequency-domain model).
pub fn apply_freq_scaled<R: Rng + ?Sized>(
    tape: &mut Tape,
    z: CVar,
    real: &ChannelRealization,
    sigma2: &[f64],
    gain: &[f64],
    rng: &mut R,
) -> Result<CVar> {
    let s = tape.shape(z.re).to_vec();
    check_latent("apply_freq", &s, &real.h)?;
    let noise = if sigma2.iter().all(|&v| v == 0.0) {
        None
    } else {
        Some(draw_freq_noise(&[s[0], s[1], s[2], real.n_rx()], sigma2, gain, rng)?)
    };
    apply_freq_with_noise(tape, z, &real.h, noise.as_ref())
}

/// Time-domain channel: circular convolution with the taps, summed over
/// transmit streams, plus the supplied noise `[P, N, N_r]`.
pub fn apply_time_with_noise(w: &Waveform, real: &ChannelRealization, noise: Option<&ComplexTensor>) -> Result<Waveform> {
    let s = w.samples.shape();
    let (l, nr, nt) = (real.taps.shape()[0], real.n_rx(), real.n_tx());
    if s.len() != 3 || s[2] != nt {
        return Err(Error::shape("apply_time", format!("waveform {:?} with taps {:?}", s, real.taps.shape())));
    }
    let (p, n) = (s[0], s[1]);
    let mut out = ComplexTensor::zeros(&[p, n, nr]);
    for pi in 0..p {
        for r in 0..nr {
            for t in 0..nt {
                for li in 0..l {
                    let (hr, hi) = real.taps.get((li * nr + r) * nt + t);
                    if hr == 0.0 && hi == 0.0 {
                        continue;
                    }
                    for i in 0..n {
                        let (xr, xi) = w.samples.get((pi * n + (i + n - li % n) % n) * nt + t);
                        let idx = (pi * n + i) * nr + r;
                        let (yr, yi) = out.get(idx);
                        out.set(idx, (yr + hr * xr - hi * xi, yi + hr * xi + hi * xr));
                    }
                }
            }
        }
    }
    if let Some(noise) = noise {
        if noise.shape() != out.shape() {
            return Err(Error::shape("apply_time", format!("noise {:?}, expected {:?}", noise.shape(), out.shape())));
        }
        for i in 0..out.len() {
            let (a, b) = out.get(i);
            let (c, d) = noise.get(i);
            out.set(i, (a + c, b + d));
        }
    }
    Ok(Waveform { samples: out, scale: w.scale })
}

/// Time-domain channel with `CN(0, σ²)` noise on every received sample.
pub fn apply_time<R: Rng + ?Sized>(w: &Waveform, real: &ChannelRealization, sigma2: f64, rng: &mut R) -> Result<Waveform> {
    let s = w.samples.shape();
    let noise = (sigma2 > 0.0).then(|| ComplexTensor::randn(&[s[0], s[1], real.n_rx()], sigma2, rng));
    apply_time_with_noise(w, real, noise.as_ref())
}

/// Least-squares CSI from unit-amplitude pilots on every used subcarrier.
pub fn estimate_csi<R: Rng + ?Sized>(
    model: &ChannelModel,
    real: &ChannelRealization,
    cfg: &OfdmConfig,
    rng: &mut R,
) -> Result<Csi> {
    let pilots = ComplexTensor::from_real(RealTensor::full(&[cfg.used_subcarriers], 1.0));
    estimate_csi_with_pilots(model, real, cfg, &pilots, rng)
}

/// Sends `N_t` pilot packets (packet `i` drives only antenna `i` with
/// `pilots[k]`), estimates `Ĥ_k[:, i] = ẑ_k / x_k`, and estimates the noise
/// variance from the energy left in the empty bins.
pub fn estimate_csi_with_pilots<R: Rng + ?Sized>(
    model: &ChannelModel,
    real: &ChannelRealization,
    cfg: &OfdmConfig,
    pilots: &ComplexTensor,
    rng: &mut R,
) -> Result<Csi> {
    let k = cfg.used_subcarriers;
    if pilots.shape() != [k] {
        return Err(Error::shape("estimate_csi", format!("pilots {:?}, expected [{}]", pilots.shape(), k)));
    }
    if (0..k).any(|i| {
        let (a, b) = pilots.get(i);
        a == 0.0 && b == 0.0
    }) {
        return Err(Error::invalid("estimate_csi", "pilot symbols must be nonzero"));
    }
    let (nt, nr) = (model.n_tx, model.n_rx);
    if real.n_tx() != nt || real.n_rx() != nr {
        return Err(Error::shape("estimate_csi", format!("model {}x{} vs realization {:?}", nr, nt, real.taps.shape())));
    }
    let sigma2 = model.noise_variance();
    let guards = cfg.guard_bins();
    let mut h = ComplexTensor::zeros(&[k, nr, nt]);
    let mut guard_energy = 0.0;
    for tx in 0..nt {
        let mut x = ComplexTensor::zeros(&[1, k, nt]);
        for ki in 0..k {
            x.set(ki * nt + tx, pilots.get(ki));
        }
        let w = modem::modulate(&x, cfg)?;
        let y = apply_time(&w, real, sigma2, rng)?;
        let spec = modem::spectrum(&y)?;
        for ki in 0..k {
            let (pr, pi) = pilots.get(ki);
            let (sr, si) = (pr * w.scale, pi * w.scale);
            let den = sr * sr + si * si;
            let bin = cfg.bin(ki);
            for r in 0..nr {
                let (yr, yi) = spec.get(bin * nr + r);
                // y / x = y·conj(x) / |x|²
                h.set((ki * nr + r) * nt + tx, ((yr * sr + yi * si) / den, (yi * sr - yr * si) / den));
            }
        }
        for &g in &guards {
            for r in 0..nr {
                let (a, b) = spec.get(g * nr + r);
                guard_energy += a * a + b * b;
            }
        }
    }
    let sigma2_hat = (guard_energy / (nt * nr * guards.len()) as f64).max(f64::MIN_POSITIVE);
    Csi::new(h, RealTensor::full(&[k], sigma2_hat))
}
