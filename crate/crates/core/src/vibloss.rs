//! Variational information bottleneck objective.
//!
//! `loss = mean NLL over tasks + β · KL(q(z|x, s) ‖ CN(0, I))`, estimated with
//! `n_mc` reparameterized samples, each through its own channel draw.

use crate::codec::LatentDistribution;
use crate::diffcore::{ComplexTensor, RealTensor, Tape, Var};
use crate::error::{Error, Result, ResultExt};
use crate::pipeline::{self, ForwardOptions, TaskBatch};
use crate::channel::ChannelModel;
use crate::modem::OfdmConfig;
use crate::nets::{BoundParams, SemuxModel};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub n_mc: usize,
    /// Fold the transmitter's peak normalization into the noise level.
    pub peak_normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 1e-4, n_mc: 1, peak_normalize: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if self.n_mc == 0 {
            return Err(Error::Config("n_mc must be at least 1".into()));
        }
        Ok(())
    }
}

/// Closed-form `KL(CN(μ, σ²) ‖ CN(0, 1))` summed over every complex dimension.
pub fn kl_value(mu: &ComplexTensor, sigma2: &RealTensor) -> Result<f64> {
    if mu.shape() != sigma2.shape() {
        return Err(Error::shape("kl_to_standard", format!("mu {:?}, sigma2 {:?}", mu.shape(), sigma2.shape())));
    }
    let mut total = 0.0;
    for (i, &s) in sigma2.data().iter().enumerate() {
        if s.is_nan() || s <= 0.0 {
            return Err(Error::invalid("kl_to_standard", format!("variance {s} at index {i}")));
        }
        let (a, b) = mu.get(i);
        total += s + a * a + b * b - 1.0 - s.ln();
    }
    Ok(total)
}

/// Tape form of the KL: summed per item, averaged over the batch axis.
pub fn kl_to_standard(tape: &mut Tape, dist: &LatentDistribution) -> Result<Var> {
    let s = tape.value(dist.sigma2);
    if let Some(bad) = s.data().iter().find(|&&v| v.is_nan() || v <= 0.0) {
        return Err(Error::invalid("kl_to_standard", format!("variance {bad}")));
    }
    let b = s.shape().first().copied().unwrap_or(1).max(1);
    let m2 = tape.abs2(dist.mu)?;
    let ln = tape.log(dist.sigma2)?;
    let d = tape.sub(dist.sigma2, ln)?;
    let e = tape.add(d, m2)?;
    let e = tape.add_scalar(e, -1.0)?;
    let total = tape.sum(e)?;
    tape.scale(total, 1.0 / b as f64)
}

/// Mean softmax cross-entropy over the batch and over the task heads.
pub fn nll_term(tape: &mut Tape, logits: &[Var], labels: &[Vec<usize>]) -> Result<Var> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::shape("nll_term", format!("{} heads, {} label sets", logits.len(), labels.len())));
    }
    let per = logits
        .iter()
        .zip(labels)
        .map(|(&l, y)| tape.softmax_cross_entropy(l, y))
        .collect::<Result<Vec<_>>>()?;
    let total = tape.add_n(&per)?;
    tape.scale(total, 1.0 / per.len() as f64)
}

/// Differentiable loss plus the scalar values of its two terms.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub loss: Var,
    pub nll: f64,
    pub kl: f64,
}

/// Monte Carlo estimate of the objective for one batch.
///
/// The transmitter network runs once; each sample then draws a channel
/// realization, precodes against its (genie) CSI, samples `z`, and runs the
/// receiver.
#[allow(clippy::too_many_arguments)]
pub fn vib_loss_mc<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &SemuxModel,
    p: &BoundParams,
    batch: &TaskBatch,
    channel: &ChannelModel,
    ofdm: &OfdmConfig,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossParts> {
    cfg.validate()?;
    let t = pipeline::transmitter_features(tape, model, p, batch).context(|| "vib_loss_mc: transmitter".into())?;
    let sigma2 = channel.noise_variance();
    let opts = ForwardOptions::training(*ofdm, cfg.peak_normalize);
    let mut terms = Vec::with_capacity(cfg.n_mc);
    let (mut nll_sum, mut kl_sum) = (0.0, 0.0);
    for s in 0..cfg.n_mc {
        let real = channel.sample_realization(ofdm, rng)?;
        let csi = real.csi(sigma2)?;
        let out = pipeline::channel_and_receiver(tape, model, p, t, &real, &csi, sigma2, &opts, rng)
            .context(|| format!("vib_loss_mc: sample {s}"))?;
        let nll = nll_term(tape, &out.logits, &batch.labels)?;
        nll_sum += tape.value(nll).item();
        let term = if cfg.beta == 0.0 {
            kl_sum += kl_value(&tape.complex_value(out.dist.mu), tape.value(out.dist.sigma2))? / batch.len() as f64;
            nll
        } else {
            let kl = kl_to_standard(tape, &out.dist)?;
            kl_sum += tape.value(kl).item();
            let weighted = tape.scale(kl, cfg.beta)?;
            tape.add(nll, weighted)?
        };
        terms.push(term);
    }
    let total = tape.add_n(&terms)?;
    let loss = tape.scale(total, 1.0 / cfg.n_mc as f64)?;
    let n = cfg.n_mc as f64;
    Ok(LossParts { loss, nll: nll_sum / n, kl: kl_sum / n })
}
