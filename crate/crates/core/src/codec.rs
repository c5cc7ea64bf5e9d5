//! CSI-conditioned stochastic precoder and deterministic postcoder.
//!
//! Both sides turn the channel state into one small complex matrix per
//! packet and subcarrier with a per-subcarrier MLP whose weights are shared
//! across subcarriers, then multiply the stream vectors by it.

use crate::diffcore::{CVar, ComplexTensor, RealTensor, Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{ArchConfig, BoundParams, ModelParams, ParamGroup};
use nalgebra::{Complex, DMatrix};
use rand::Rng;
use rand_distr::StandardNormal;

/// Floor added to the softplus covariance head.
pub const SIGMA2_FLOOR: f64 = 1e-6;

/// Channel state: CFR per used subcarrier and per-subcarrier noise variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Csi {
    /// `[K_used, N_r, N_t]`.
    pub h: ComplexTensor,
    /// `[K_used]`, strictly positive.
    pub sigma2_noise: RealTensor,
}

impl Csi {
    pub fn new(h: ComplexTensor, sigma2_noise: RealTensor) -> Result<Self> {
        let csi = Self { h, sigma2_noise };
        csi.validate()?;
        Ok(csi)
    }

    pub fn k_used(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.h.shape();
        if s.len() != 3 || self.sigma2_noise.shape() != [s[0]] {
            return Err(Error::shape(
                "csi",
                format!("H {:?}, sigma2 {:?}", s, self.sigma2_noise.shape()),
            ));
        }
        if !self.h.is_finite() || !self.sigma2_noise.is_finite() {
            return Err(Error::NonFinite { op: "csi" });
        }
        if self.sigma2_noise.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("csi", "noise variance must be positive"));
        }
        Ok(())
    }

    fn check(&self, op: &'static str, arch: &ArchConfig) -> Result<()> {
        self.validate()?;
        if self.h.shape() != [arch.k_used, arch.n_rx, arch.n_tx] {
            return Err(Error::shape(
                op,
                format!("CSI {:?}, expected [{}, {}, {}]", self.h.shape(), arch.k_used, arch.n_rx, arch.n_tx),
            ));
        }
        Ok(())
    }

    /// `[K_used, 2·N_r·N_t + 1]`: interleaved (re, im) of `H_k` followed by `σ²_k`.
    pub fn features(&self) -> RealTensor {
        let k = self.k_used();
        let per = self.h.len() / k.max(1);
        let mut out = Vec::with_capacity(k * (2 * per + 1));
        for ki in 0..k {
            for j in 0..per {
                let (re, im) = self.h.get(ki * per + j);
                out.push(re);
                out.push(im);
            }
            out.push(self.sigma2_noise.data()[ki]);
        }
        RealTensor::from_parts(vec![k, 2 * per + 1], out)
    }
}

/// Diagonal complex Gaussian over latent symbols, batched: `[B, P, K_used, N_t]`.
#[derive(Clone, Copy, Debug)]
pub struct LatentDistribution {
    pub mu: CVar,
    pub sigma2: Var,
}

fn identity_bias(packets: usize, n: usize) -> RealTensor {
    // layout per subcarrier: [P, 2 (re, im), n, n]
    let mut b = RealTensor::zeros(&[packets * 2 * n * n]);
    for p in 0..packets {
        for i in 0..n {
            b.data_mut()[p * 2 * n * n + i * n + i] = 1.0;
        }
    }
    b
}

fn init_csi_branch<R: Rng + ?Sized>(
    p: &mut ModelParams,
    prefix: &str,
    group: ParamGroup,
    a: &ArchConfig,
    n: usize,
    identity: bool,
    rng: &mut R,
) -> Result<()> {
    let fin = a.csi_features();
    let out = a.packets * 2 * n * n;
    p.insert(format!("{prefix}.csi1.w"), group, RealTensor::randn(&[fin, a.csi_hidden], (2.0 / fin as f64).sqrt(), rng))?;
    p.insert(format!("{prefix}.csi1.b"), group, RealTensor::zeros(&[a.csi_hidden]))?;
    p.insert(format!("{prefix}.csi2.w"), group, RealTensor::randn(&[a.csi_hidden, out], 0.1 / (a.csi_hidden as f64).sqrt(), rng))?;
    let bias = if identity { identity_bias(a.packets, n) } else { RealTensor::zeros(&[out]) };
    p.insert(format!("{prefix}.csi2.b"), group, bias)?;
    Ok(())
}

fn identity_plus_noise<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> RealTensor {
    let mut w = RealTensor::randn(&[n, n], std, rng);
    for i in 0..n {
        w.data_mut()[i * n + i] += 1.0;
    }
    w
}

pub(crate) fn init_precoder<R: Rng + ?Sized>(p: &mut ModelParams, a: &ArchConfig, rng: &mut R) -> Result<()> {
    let g = ParamGroup::Precoder;
    init_csi_branch(p, "prec", g, a, a.n_tx, true, rng)?;
    let w = 2 * a.n_tx;
    p.insert("prec.mu.w", g, identity_plus_noise(w, 0.05, rng))?;
    p.insert("prec.mu.b", g, RealTensor::zeros(&[w]))?;
    p.insert("prec.sigma.w", g, RealTensor::randn(&[w, a.n_tx], 0.05, rng))?;
    // softplus(-2) ≈ 0.13 initial latent variance
    p.insert("prec.sigma.b", g, RealTensor::full(&[a.n_tx], -2.0))?;
    Ok(())
}

pub(crate) fn init_postcoder<R: Rng + ?Sized>(p: &mut ModelParams, a: &ArchConfig, rng: &mut R) -> Result<()> {
    let g = ParamGroup::Postcoder;
    // with the combiner branch the postcoder starts as linear MMSE plus a small
    // learned correction, otherwise as the identity
    init_csi_branch(p, "post", g, a, a.n_rx, !a.mmse_branch, rng)?;
    if a.mmse_branch {
        p.insert("post.eq_gain", g, RealTensor::full(&[1, 1], 1.0))?;
    }
    let w = 2 * a.n_rx;
    p.insert("post.lin.w", g, identity_plus_noise(w, 0.05, rng))?;
    p.insert("post.lin.b", g, RealTensor::zeros(&[w]))?;
    Ok(())
}

/// Linear MMSE combiner `(HᴴH + σ²I)⁻¹Hᴴ` per subcarrier, its `min(N_t, N_r)`
/// leading rows placed in an `N_r×N_r` matrix and repeated for every packet:
/// `[P·K_used·N_r·N_r, 1]` (real and imaginary parts).
pub fn mmse_combiner(csi: &Csi, packets: usize) -> Result<ComplexTensor> {
    let s = csi.h.shape();
    let (k, nr, nt) = (s[0], s[1], s[2]);
    let rows = nt.min(nr);
    let mut out = ComplexTensor::zeros(&[packets * k * nr * nr, 1]);
    for ki in 0..k {
        let h = DMatrix::from_fn(nr, nt, |r, t| {
            let (a, b) = csi.h.get((ki * nr + r) * nt + t);
            Complex::new(a, b)
        });
        let hh = h.adjoint();
        let gram = &hh * &h + DMatrix::<Complex<f64>>::identity(nt, nt) * Complex::new(csi.sigma2_noise.data()[ki], 0.0);
        let inv = gram.try_inverse().ok_or_else(|| Error::invalid("mmse_combiner", format!("singular Gram matrix at subcarrier {ki}")))?;
        let w = inv * hh;
        for pi in 0..packets {
            let base = (pi * k + ki) * nr * nr;
            for r in 0..rows {
                for c in 0..nr {
                    let v = w[(r, c)];
                    out.set(base + r * nr + c, (v.re, v.im));
                }
            }
        }
    }
    Ok(out)
}

/// CSI features through `Linear → ReLU → Linear`, arranged as one complex
/// `n×n` matrix per (packet, subcarrier): `[P·K_used, n, n]`.
fn coding_tensor(tape: &mut Tape, p: &BoundParams, prefix: &str, csi: &Csi, packets: usize, n: usize) -> Result<CVar> {
    let k = csi.k_used();
    let feats = tape.constant(csi.features());
    let h = tape.matmul(feats, p.var(&format!("{prefix}.csi1.w"))?)?;
    let h = tape.add_bias(h, p.var(&format!("{prefix}.csi1.b"))?)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, p.var(&format!("{prefix}.csi2.w"))?)?;
    let o = tape.add_bias(o, p.var(&format!("{prefix}.csi2.b"))?)?;
    let o = tape.reshape(o, &[k, packets, 2, n * n])?;
    let o = tape.permute(o, &[1, 0, 2, 3])?;
    let re = tape.narrow(o, 2, 0, 1)?;
    let im = tape.narrow(o, 2, 1, 1)?;
    tape.creshape(CVar { re, im }, &[packets * k, n, n])
}

/// `[B, P, K, n]` stream vectors times the per-(P, K) matrices: returns
/// `[P·K·B, 2n]` rows holding (re, im) of each coded stream vector.
fn apply_coding(tape: &mut Tape, coding: CVar, z: CVar, packets: usize, k: usize, n: usize) -> Result<Var> {
    let b = tape.shape(z.re)[0];
    let zt = tape.cpermute(z, &[1, 2, 3, 0])?;
    let zt = tape.creshape(zt, &[packets * k, n, b])?;
    let u = tape.cbmm(coding, zt)?;
    let u = tape.cpermute(u, &[0, 2, 1])?;
    let rows = tape.concat(&[u.re, u.im], 2)?;
    tape.reshape(rows, &[packets * k * b, 2 * n])
}

/// `[P·K·B, w]` rows back to `[B, P, K, w]`.
fn rows_to_batch(tape: &mut Tape, rows: Var, b: usize, packets: usize, k: usize) -> Result<Var> {
    let w = tape.shape(rows)[1];
    let r = tape.reshape(rows, &[packets, k, b, w])?;
    tape.permute(r, &[2, 0, 1, 3])
}

fn split_complex_rows(tape: &mut Tape, rows: Var, b: usize, packets: usize, k: usize) -> Result<CVar> {
    let n = tape.shape(rows)[1] / 2;
    let re = tape.narrow(rows, 1, 0, n)?;
    let im = tape.narrow(rows, 1, n, n)?;
    Ok(CVar { re: rows_to_batch(tape, re, b, packets, k)?, im: rows_to_batch(tape, im, b, packets, k)? })
}

/// Maps `t[B, 2·P·K·N_t]` and the CSI to the latent distribution parameters.
pub fn precode(tape: &mut Tape, arch: &ArchConfig, p: &BoundParams, t: Var, csi: &Csi) -> Result<LatentDistribution> {
    csi.check("precode", arch)?;
    let ts = tape.shape(t).to_vec();
    if ts.len() != 2 || ts[1] != arch.t_len() {
        return Err(Error::shape("precode", format!("t {:?}, expected [B, {}]", ts, arch.t_len())));
    }
    let (b, pk, k, n) = (ts[0], arch.packets, arch.k_used, arch.n_tx);
    let z = tape.complexify(t)?;
    let z = tape.creshape(z, &[b, pk, k, n])?;
    let coding = coding_tensor(tape, p, "prec", csi, pk, n)?;
    let rows = apply_coding(tape, coding, z, pk, k, n)?;

    let mu = tape.matmul(rows, p.var("prec.mu.w")?)?;
    let mu = tape.add_bias(mu, p.var("prec.mu.b")?)?;
    let mu = split_complex_rows(tape, mu, b, pk, k)?;

    let raw = tape.matmul(rows, p.var("prec.sigma.w")?)?;
    let raw = tape.add_bias(raw, p.var("prec.sigma.b")?)?;
    let s2 = tape.softplus(raw)?;
    let s2 = tape.add_scalar(s2, SIGMA2_FLOOR)?;
    let sigma2 = rows_to_batch(tape, s2, b, pk, k)?;
    Ok(LatentDistribution { mu, sigma2 })
}

/// Reparameterized draw `z = μ + √(σ²/2)·(ε_re + i·ε_im)`; `ε` enters the
/// tape as a constant.
pub fn sample_latent<R: Rng + ?Sized>(tape: &mut Tape, dist: &LatentDistribution, rng: &mut R) -> Result<CVar> {
    let shape = tape.shape(dist.sigma2).to_vec();
    let n: usize = shape.iter().product();
    let mut draw = || {
        let d = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        RealTensor::from_parts(shape.clone(), d)
    };
    let (e_re, e_im) = (draw(), draw());
    let half = tape.scale(dist.sigma2, 0.5)?;
    let std = tape.sqrt(half)?;
    let e_re = tape.constant(e_re);
    let e_im = tape.constant(e_im);
    let n_re = tape.mul(std, e_re)?;
    let n_im = tape.mul(std, e_im)?;
    Ok(CVar { re: tape.add(dist.mu.re, n_re)?, im: tape.add(dist.mu.im, n_im)? })
}

/// Maps received symbols `ẑ[B, P, K, N_r]` and the CSI to real features `[B, 2·P·K·N_r]`.
pub fn postcode(tape: &mut Tape, arch: &ArchConfig, p: &BoundParams, z_hat: CVar, csi: &Csi) -> Result<Var> {
    csi.check("postcode", arch)?;
    let zs = tape.shape(z_hat.re).to_vec();
    if zs.len() != 4 || zs[1..] != [arch.packets, arch.k_used, arch.n_rx] {
        return Err(Error::shape(
            "postcode",
            format!("z_hat {:?}, expected [B, {}, {}, {}]", zs, arch.packets, arch.k_used, arch.n_rx),
        ));
    }
    let (b, pk, k, n) = (zs[0], arch.packets, arch.k_used, arch.n_rx);
    let mut coding = coding_tensor(tape, p, "post", csi, pk, n)?;
    if arch.mmse_branch {
        let w = tape.complex_constant(mmse_combiner(csi, pk)?);
        let gain = p.var("post.eq_gain")?;
        let eq = CVar { re: tape.matmul(w.re, gain)?, im: tape.matmul(w.im, gain)? };
        let eq = tape.creshape(eq, &[pk * k, n, n])?;
        coding = tape.cadd(coding, eq)?;
    }
    let rows = apply_coding(tape, coding, z_hat, pk, k, n)?;
    let lin = tape.matmul(rows, p.var("post.lin.w")?)?;
    let lin = tape.add_bias(lin, p.var("post.lin.b")?)?;
    let v = split_complex_rows(tape, lin, b, pk, k)?;
    let flat = tape.creshape(v, &[b, pk * k * n])?;
    tape.realify(flat)
}
