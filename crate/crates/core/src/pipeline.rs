//! End-to-end training, inference and online adaptation.

use crate::channel::{self, ChannelModel, ChannelRealization};
use crate::codec::{self, Csi, LatentDistribution};
use crate::data::{sample_indices, DataSplit, Dataset};
use crate::diffcore::{CVar, ComplexTensor, RealTensor, Tape, Var};
use crate::error::{Error, Result, ResultExt};
use crate::modem::{self, OfdmConfig};
use crate::nets::{self, BoundParams, ModelParams, ParamGroup, SemuxModel, TrainMode};
use crate::vibloss::{self, LossConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// `N_mb` items for each of the `N_comp` computation channels.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    /// One `[N_mb, C, H, W]` tensor per computation channel.
    pub inputs: Vec<RealTensor>,
    pub labels: Vec<Vec<usize>>,
}

impl TaskBatch {
    pub fn new(inputs: Vec<RealTensor>, labels: Vec<Vec<usize>>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::shape("task_batch", format!("{} inputs, {} label sets", inputs.len(), labels.len())));
        }
        let n = labels[0].len();
        for (x, y) in inputs.iter().zip(&labels) {
            if x.shape().first() != Some(&n) || y.len() != n {
                return Err(Error::shape(
                    "task_batch",
                    format!("input {:?} with {} labels, expected {n} items", x.shape(), y.len()),
                ));
            }
        }
        Ok(Self { inputs, labels })
    }

    /// Channel `i` receives the items `idx[i]` of `ds`.
    pub fn from_indices(ds: &Dataset, idx: &[Vec<usize>]) -> Result<Self> {
        let (inputs, labels) = idx.iter().map(|ix| ds.gather(ix)).unzip();
        Self::new(inputs, labels)
    }

    /// Independent random items for every computation channel.
    pub fn sample<R: Rng + ?Sized>(ds: &Dataset, n_comp: usize, batch: usize, rng: &mut R) -> Result<Self> {
        let idx: Vec<Vec<usize>> = (0..n_comp).map(|_| sample_indices(ds.len(), batch, rng)).collect();
        Self::from_indices(ds, &idx)
    }

    pub fn n_comp(&self) -> usize {
        self.inputs.len()
    }

    pub fn len(&self) -> usize {
        self.labels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    /// Reparameterized draw from the precoder's distribution.
    Sample,
    /// Transmit the mean.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelPath {
    /// `ẑ = H z + n` per subcarrier, differentiable.
    Frequency,
    /// Modulate, convolve with the taps, add time-domain noise, demodulate.
    Waveform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsiSource {
    Genie,
    Estimated,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub latent: LatentMode,
    pub path: ChannelPath,
    /// Scale each transmission to unit peak amplitude before the channel.
    pub peak_normalize: bool,
    pub ofdm: OfdmConfig,
}

impl ForwardOptions {
    pub fn training(ofdm: OfdmConfig, peak_normalize: bool) -> Self {
        Self { latent: LatentMode::Sample, path: ChannelPath::Frequency, peak_normalize, ofdm }
    }

    pub fn inference(ofdm: OfdmConfig) -> Self {
        Self { latent: LatentMode::Mean, path: ChannelPath::Frequency, peak_normalize: true, ofdm }
    }
}

pub struct ReceiverOutput {
    pub dist: LatentDistribution,
    pub z: CVar,
    pub z_hat: CVar,
    pub logits: Vec<Var>,
}

/// Disjoint preprocessing, binding, superposition and `f_t`: `[B, 2·P·K·N_t]`.
pub fn transmitter_features(tape: &mut Tape, model: &SemuxModel, p: &BoundParams, batch: &TaskBatch) -> Result<Var> {
    let inputs: Vec<Var> = batch.inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let bound = nets::bind_inputs(tape, model, p, &inputs)?;
    nets::f_t(tape, model, p, bound)
}

fn item(z: &ComplexTensor, b: usize) -> ComplexTensor {
    let shape = &z.shape()[1..];
    let per: usize = shape.iter().product();
    let cut = |t: &RealTensor| RealTensor::from_parts(shape.to_vec(), t.data()[b * per..(b + 1) * per].to_vec());
    ComplexTensor { re: cut(&z.re), im: cut(&z.im) }
}

/// Per-item `1/s²`, where `s` is the peak-normalization factor of that transmission.
pub fn peak_noise_gains(z: &ComplexTensor, ofdm: &OfdmConfig) -> Result<Vec<f64>> {
    (0..z.shape()[0])
        .map(|b| modem::peak_scale(&item(z, b), ofdm).map(|s| 1.0 / (s * s)))
        .collect()
}

fn waveform_channel<R: Rng + ?Sized>(
    z: &ComplexTensor,
    real: &ChannelRealization,
    sigma2: f64,
    ofdm: &OfdmConfig,
    rng: &mut R,
) -> Result<ComplexTensor> {
    let b = z.shape()[0];
    let mut re = Vec::new();
    let mut im = Vec::new();
    let mut shape = Vec::new();
    for bi in 0..b {
        let w = modem::modulate(&item(z, bi), ofdm)?;
        let y = channel::apply_time(&w, real, sigma2, rng)?;
        let zh = modem::demodulate(&y, ofdm)?;
        shape = zh.shape().to_vec();
        re.extend_from_slice(zh.re.data());
        im.extend_from_slice(zh.im.data());
    }
    shape.insert(0, b);
    ComplexTensor::new(RealTensor::new(&shape, re)?, RealTensor::new(&shape, im)?)
}

/// Precoding against `csi`, the physical channel `real`, and the whole receiver.
#[allow(clippy::too_many_arguments)]
pub fn channel_and_receiver<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &SemuxModel,
    p: &BoundParams,
    t: Var,
    real: &ChannelRealization,
    csi: &Csi,
    sigma2: f64,
    opts: &ForwardOptions,
    rng: &mut R,
) -> Result<ReceiverOutput> {
    let dist = codec::precode(tape, &model.arch, p, t, csi)?;
    let z = match opts.latent {
        LatentMode::Sample => codec::sample_latent(tape, &dist, rng)?,
        LatentMode::Mean => dist.mu,
    };
    let z_hat = match opts.path {
        ChannelPath::Frequency => {
            let zv = tape.complex_value(z);
            let gains = if opts.peak_normalize {
                peak_noise_gains(&zv, &opts.ofdm)?
            } else {
                vec![1.0; zv.shape()[0]]
            };
            channel::apply_freq_scaled(tape, z, real, &vec![sigma2; model.arch.k_used], &gains, rng)?
        }
        ChannelPath::Waveform => {
            let received = waveform_channel(&tape.complex_value(z), real, sigma2, &opts.ofdm, rng)?;
            tape.complex_constant(received)
        }
    };
    let post = codec::postcode(tape, &model.arch, p, z_hat, csi)?;
    let feats = nets::f_r(tape, model, p, post)?;
    let unbound = nets::unbind_all(tape, model, p, feats)?;
    let logits = nets::classify_heads(tape, model, p, &unbound)?;
    Ok(ReceiverOutput { dist, z, z_hat, logits })
}

/// Per-head logits `[B, n_classes]` for one pass through `real`.
#[allow(clippy::too_many_arguments)]
pub fn infer_logits<R: Rng + ?Sized>(
    model: &SemuxModel,
    inputs: &[RealTensor],
    real: &ChannelRealization,
    csi: Option<&Csi>,
    sigma2: f64,
    opts: &ForwardOptions,
    rng: &mut R,
) -> Result<Vec<RealTensor>> {
    let csi = csi.ok_or_else(|| Error::invalid("infer", "no CSI available; run channel estimation first"))?;
    let n = inputs.first().map_or(0, |x| x.shape()[0]);
    let batch = TaskBatch::new(inputs.to_vec(), vec![vec![0; n]; inputs.len()])?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let t = transmitter_features(&mut tape, model, &p, &batch)?;
    let out = channel_and_receiver(&mut tape, model, &p, t, real, csi, sigma2, opts, rng)?;
    Ok(out.logits.iter().map(|&l| tape.value(l).clone()).collect())
}

pub fn argmax_rows(logits: &RealTensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Class predictions per computation channel.
#[allow(clippy::too_many_arguments)]
pub fn infer<R: Rng + ?Sized>(
    model: &SemuxModel,
    inputs: &[RealTensor],
    real: &ChannelRealization,
    csi: Option<&Csi>,
    sigma2: f64,
    opts: &ForwardOptions,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    Ok(infer_logits(model, inputs, real, csi, sigma2, opts, rng)?.iter().map(argmax_rows).collect())
}

/// Fraction of correct predictions per task on `batch`.
pub fn batch_accuracy<R: Rng + ?Sized>(
    model: &SemuxModel,
    batch: &TaskBatch,
    real: &ChannelRealization,
    csi: &Csi,
    sigma2: f64,
    opts: &ForwardOptions,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let pred = infer(model, &batch.inputs, real, Some(csi), sigma2, opts, rng)?;
    Ok(pred
        .iter()
        .zip(&batch.labels)
        .map(|(p, y)| p.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len().max(1) as f64)
        .collect())
}

/// Counts correct predictions per task over `items` test items per channel,
/// in chunks of `chunk`.
#[allow(clippy::too_many_arguments)]
pub fn accuracy_on<R: Rng + ?Sized>(
    model: &SemuxModel,
    test: &Dataset,
    items: usize,
    chunk: usize,
    real: &ChannelRealization,
    csi: &Csi,
    sigma2: f64,
    opts: &ForwardOptions,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n_comp = model.arch.n_comp;
    let idx: Vec<Vec<usize>> = (0..n_comp).map(|_| sample_indices(test.len(), items, rng)).collect();
    let mut correct = vec![0.0; n_comp];
    let mut start = 0;
    while start < items {
        let end = (start + chunk.max(1)).min(items);
        let part: Vec<Vec<usize>> = idx.iter().map(|ix| ix[start..end].to_vec()).collect();
        let batch = TaskBatch::from_indices(test, &part)?;
        let acc = batch_accuracy(model, &batch, real, csi, sigma2, opts, rng)?;
        for (c, a) in correct.iter_mut().zip(acc) {
            *c += a * (end - start) as f64;
        }
        start = end;
    }
    Ok(correct.into_iter().map(|c| c / items.max(1) as f64).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Test items per computation channel and realization.
    pub items: usize,
    pub realizations: usize,
    pub chunk: usize,
    pub csi: CsiSource,
    pub path: ChannelPath,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { items: 512, realizations: 4, chunk: 256, csi: CsiSource::Genie, path: ChannelPath::Frequency, seed: 7 }
    }
}

/// Per-task test accuracy averaged over fresh channel realizations; the
/// realizations and items depend only on `cfg.seed`.
pub fn evaluate(
    model: &SemuxModel,
    test: &Dataset,
    channel: &ChannelModel,
    ofdm: &OfdmConfig,
    cfg: &EvalConfig,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // estimation noise on its own stream so genie and estimated runs see the same items
    let mut est_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    est_rng.set_stream(1);
    let sigma2 = channel.noise_variance();
    let opts = ForwardOptions { path: cfg.path, ..ForwardOptions::inference(*ofdm) };
    let mut total = vec![0.0; model.arch.n_comp];
    for _ in 0..cfg.realizations.max(1) {
        let real = channel.sample_realization(ofdm, &mut rng)?;
        let csi = match cfg.csi {
            CsiSource::Genie => real.csi(sigma2)?,
            CsiSource::Estimated => channel::estimate_csi(channel, &real, ofdm, &mut est_rng)?,
        };
        let acc = accuracy_on(model, test, cfg.items, cfg.chunk, &real, &csi, sigma2, &opts, &mut rng)?;
        for (t, a) in total.iter_mut().zip(acc) {
            *t += a;
        }
    }
    Ok(total.into_iter().map(|t| t / cfg.realizations.max(1) as f64).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(Self::Sgd),
            "adam" => Some(Self::Adam),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the joint gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(5.0) }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("adam moments need beta in [0, 1) and eps > 0".into()));
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Plain gradient descent or Adam over the trainable entries of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &ModelParams) -> Result<Self> {
        cfg.validate()?;
        let zeros = || params.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Ok(Self { cfg, steps: 0, m: zeros(), v: zeros() })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update; `grads` is aligned with `params.entries()`, `None` = frozen.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<RealTensor>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape("optimizer", format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.steps += 1;
        if self.cfg.lr == 0.0 {
            return Ok(());
        }
        let norm = grads.iter().flatten().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "optimizer" });
        }
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let c = &self.cfg;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (i, (entry, g)) in params.entries_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let w = entry.value.data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in w.iter_mut().zip(g.data()) {
                        *w -= c.lr * clip * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..w.len() {
                        let g = clip * g.data()[j];
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                        w[j] -= c.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub optimizer: OptimizerConfig,
    /// Adapt once every this many inference steps.
    pub pilot_period: usize,
    /// Stored pilots per computation channel.
    pub pilots_per_channel: usize,
    /// Pilot pairs sent in one adaptation step.
    pub pilots_per_step: usize,
    pub shared_seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig { lr: 3e-3, ..OptimizerConfig::default() },
            pilot_period: 1,
            pilots_per_channel: 64,
            pilots_per_step: 1,
            shared_seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub eval: EvalConfig,
    pub adapt: AdaptConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            epochs: 20,
            batch_size: 32,
            steps_per_epoch: 50,
            loss: LossConfig::default(),
            seed: 0,
            eval: EvalConfig::default(),
            adapt: AdaptConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.adapt.optimizer.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("batch_size and steps_per_epoch must be positive".into()));
        }
        if self.eval.items == 0 || self.eval.realizations == 0 {
            return Err(Error::Config("evaluation needs at least one item and one realization".into()));
        }
        if self.adapt.pilot_period == 0 || self.adapt.pilots_per_channel == 0 || self.adapt.pilots_per_step == 0 {
            return Err(Error::Config("adaptation period and pilot counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub kl: f64,
    pub nll: f64,
    pub acc: Vec<f64>,
    pub wallclock_s: f64,
}

/// Training state that survives between epochs (and across checkpoints).
#[derive(Clone, Debug)]
pub struct Trainer {
    pub rng: ChaCha8Rng,
    pub optimizer: Optimizer,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: &SemuxModel, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            optimizer: Optimizer::new(cfg.optimizer.clone(), &model.params)?,
            epoch: 0,
        })
    }

    /// One gradient step on a fresh batch; returns `(loss, nll, kl)`.
    pub fn step(
        &mut self,
        model: &mut SemuxModel,
        train: &Dataset,
        channel: &ChannelModel,
        ofdm: &OfdmConfig,
        cfg: &TrainConfig,
    ) -> Result<(f64, f64, f64)> {
        let step = self.optimizer.steps();
        let batch = TaskBatch::sample(train, model.arch.n_comp, cfg.batch_size, &mut self.rng)?;
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let parts = vibloss::vib_loss_mc(&mut tape, model, &p, &batch, channel, ofdm, &cfg.loss, &mut self.rng)
            .map_err(|e| diverged(step, e))?;
        let loss = tape.value(parts.loss).item();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss {loss}") });
        }
        let grads = tape.backward(parts.loss)?;
        let g = p.collect_grads(&tape, &grads);
        drop(p);
        self.optimizer.step(&mut model.params, &g).map_err(|e| diverged(step, e))?;
        Ok((loss, parts.nll, parts.kl))
    }

    pub fn run_epoch(
        &mut self,
        model: &mut SemuxModel,
        data: &DataSplit,
        channel: &ChannelModel,
        ofdm: &OfdmConfig,
        cfg: &TrainConfig,
    ) -> Result<EpochMetrics> {
        let start = Instant::now();
        let (mut loss, mut nll, mut kl) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.steps_per_epoch {
            let (l, n, k) = self.step(model, &data.train, channel, ofdm, cfg)?;
            loss += l;
            nll += n;
            kl += k;
        }
        let s = cfg.steps_per_epoch as f64;
        let acc = evaluate(model, &data.test, channel, ofdm, &cfg.eval)?;
        self.epoch += 1;
        let m = EpochMetrics {
            epoch: self.epoch,
            loss: loss / s,
            kl: kl / s,
            nll: nll / s,
            acc,
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.4} nll {:.4} kl {:.2} acc {:?}",
            m.epoch,
            m.loss,
            m.nll,
            m.kl,
            m.acc.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()
        );
        Ok(m)
    }
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged { step, detail: format!("non-finite value in {op}") },
        Error::Context { context, source } if matches!(*source, Error::NonFinite { .. }) => {
            Error::Diverged { step, detail: format!("{context}: {source}") }
        }
        other => other,
    }
}

/// Full end-to-end training; every parameter group is unfrozen.
pub fn train(
    model: &mut SemuxModel,
    data: &DataSplit,
    channel: &ChannelModel,
    ofdm: &OfdmConfig,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    model.params.set_mode(TrainMode::Full);
    let mut trainer = Trainer::new(model, cfg)?;
    (0..cfg.epochs).map(|_| trainer.run_epoch(model, data, channel, ofdm, cfg)).collect()
}

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Computation channel that carries the task pilot at `global_time`. The
/// 128-bit input `(global_time, shared_seed)` is hashed by chaining:
/// `mix(mix(global_time) ^ shared_seed)`.
pub fn select_pilot_channel(global_time: u64, shared_seed: u64, n_comp: usize) -> usize {
    if n_comp <= 1 {
        return 0;
    }
    (splitmix64(splitmix64(global_time) ^ shared_seed) % n_comp as u64) as usize
}

/// Stored (input, label) pairs per computation channel, shared by both ends.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotStore {
    pub pilots: Vec<Dataset>,
    pub shared_seed: u64,
    cursor: Vec<usize>,
}

impl PilotStore {
    pub fn new(pilots: Vec<Dataset>, shared_seed: u64) -> Result<Self> {
        if pilots.is_empty() || pilots.iter().any(Dataset::is_empty) {
            return Err(Error::invalid("pilot_store", "every computation channel needs at least one pilot"));
        }
        let cursor = vec![0; pilots.len()];
        Ok(Self { pilots, shared_seed, cursor })
    }

    /// Draws `per_channel` distinct training items for every channel.
    pub fn from_dataset<R: Rng + ?Sized>(
        ds: &Dataset,
        n_comp: usize,
        per_channel: usize,
        shared_seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        let pilots = (0..n_comp)
            .map(|_| {
                let (x, y) = ds.gather(&sample_indices(ds.len(), per_channel, rng));
                Dataset::new(x, y, ds.n_classes)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pilots, shared_seed)
    }

    pub fn n_comp(&self) -> usize {
        self.pilots.len()
    }

    /// Next `count` pilots of `channel`, cycling through the store.
    pub fn next(&mut self, channel: usize, count: usize) -> (RealTensor, Vec<usize>) {
        let store = &self.pilots[channel];
        let idx: Vec<usize> = (0..count).map(|i| (self.cursor[channel] + i) % store.len()).collect();
        self.cursor[channel] = (self.cursor[channel] + count) % store.len();
        store.gather(&idx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptOutcome {
    pub channel: usize,
    pub pilot_loss: f64,
}

/// One online adaptation step. The pilot channel picked by
/// [`select_pilot_channel`] carries stored pilots, the others carry the
/// first items of `traffic`; only the pilot head contributes to the loss.
#[allow(clippy::too_many_arguments)]
pub fn adapt_step<R: Rng + ?Sized>(
    model: &mut SemuxModel,
    optimizer: &mut Optimizer,
    pilots: &mut PilotStore,
    traffic: &TaskBatch,
    real: &ChannelRealization,
    fresh_csi: &Csi,
    sigma2: f64,
    global_time: u64,
    cfg: &AdaptConfig,
    ofdm: &OfdmConfig,
    rng: &mut R,
) -> Result<AdaptOutcome> {
    for g in ParamGroup::ALL {
        if model.params.is_trainable(g) != ParamGroup::ADAPTABLE.contains(&g) {
            return Err(Error::invalid("adapt_step", format!("parameters not in adaptation mode (group {g})")));
        }
    }
    let n_comp = model.arch.n_comp;
    if pilots.n_comp() != n_comp || traffic.n_comp() != n_comp {
        return Err(Error::shape(
            "adapt_step",
            format!("{} pilot channels, {} traffic channels, model has {n_comp}", pilots.n_comp(), traffic.n_comp()),
        ));
    }
    let count = cfg.pilots_per_step;
    if traffic.len() < count {
        return Err(Error::shape("adapt_step", format!("{} traffic items, need {count}", traffic.len())));
    }
    let c = select_pilot_channel(global_time, pilots.shared_seed, n_comp);
    let (x, y) = pilots.next(c, count);
    let inputs = (0..n_comp)
        .map(|i| {
            if i == c {
                x.clone()
            } else {
                let per: usize = traffic.inputs[i].shape()[1..].iter().product();
                let mut shape = traffic.inputs[i].shape().to_vec();
                shape[0] = count;
                RealTensor::from_parts(shape, traffic.inputs[i].data()[..count * per].to_vec())
            }
        })
        .collect();
    let mut labels = vec![vec![0; count]; n_comp];
    labels[c] = y.clone();
    let batch = TaskBatch::new(inputs, labels)?;

    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let t = transmitter_features(&mut tape, model, &p, &batch)?;
    let opts = ForwardOptions::training(*ofdm, true);
    let out = channel_and_receiver(&mut tape, model, &p, t, real, fresh_csi, sigma2, &opts, rng)
        .context(|| "adapt_step".into())?;
    let loss = tape.softmax_cross_entropy(out.logits[c], &y)?;
    let pilot_loss = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let g = p.collect_grads(&tape, &grads);
    drop(p);
    optimizer.step(&mut model.params, &g)?;
    Ok(AdaptOutcome { channel: c, pilot_loss })
}

/// Fine-tunes the adaptable groups on training batches over one fixed
/// channel; the reference for how much accuracy a redraw can recover.
#[allow(clippy::too_many_arguments)]
pub fn finetune_on_channel<R: Rng + ?Sized>(
    model: &mut SemuxModel,
    train: &Dataset,
    real: &ChannelRealization,
    csi: &Csi,
    sigma2: f64,
    steps: usize,
    batch_size: usize,
    opt: &OptimizerConfig,
    ofdm: &OfdmConfig,
    rng: &mut R,
) -> Result<()> {
    model.params.set_mode(TrainMode::Adaptation);
    let mut optimizer = Optimizer::new(opt.clone(), &model.params)?;
    let opts = ForwardOptions::training(*ofdm, true);
    for _ in 0..steps {
        let batch = TaskBatch::sample(train, model.arch.n_comp, batch_size, rng)?;
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let t = transmitter_features(&mut tape, model, &p, &batch)?;
        let out = channel_and_receiver(&mut tape, model, &p, t, real, csi, sigma2, &opts, rng)?;
        let loss = vibloss::nll_term(&mut tape, &out.logits, &batch.labels)?;
        let grads = tape.backward(loss)?;
        let g = p.collect_grads(&tape, &grads);
        drop(p);
        optimizer.step(&mut model.params, &g)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicConfig {
    pub steps: usize,
    /// Inference steps between channel redraws.
    pub period: usize,
    pub adapt: bool,
    pub adapt_cfg: AdaptConfig,
    /// Test items per computation channel and inference step.
    pub items_per_step: usize,
    /// Move the terminals (new line-of-sight angles) at every redraw.
    pub relocate: bool,
    pub seed: u64,
}

impl Default for DynamicConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            period: 100,
            adapt: true,
            adapt_cfg: AdaptConfig::default(),
            items_per_step: 32,
            relocate: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicRow {
    pub step: usize,
    pub channel_epoch: usize,
    pub acc_mean: f64,
    pub pilot_loss: Option<f64>,
}

/// Inference over a channel that is redrawn every `period` steps. Each
/// redraw is followed by LS channel estimation; adaptation steps are
/// interleaved every `pilot_period` inference steps when enabled.
pub fn run_dynamic_experiment(
    model: &SemuxModel,
    data: &DataSplit,
    channel: &ChannelModel,
    ofdm: &OfdmConfig,
    cfg: &DynamicConfig,
) -> Result<Vec<DynamicRow>> {
    if cfg.period == 0 || cfg.items_per_step == 0 {
        return Err(Error::Config("dynamic experiment needs a positive period and batch".into()));
    }
    let mut model = model.clone();
    model.params.set_mode(TrainMode::Adaptation);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // adaptation noise on its own stream so runs with and without it see the same channels and items
    let mut adapt_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    adapt_rng.set_stream(1);
    let mut pilots = PilotStore::from_dataset(
        &data.train,
        model.arch.n_comp,
        cfg.adapt_cfg.pilots_per_channel,
        cfg.adapt_cfg.shared_seed,
        &mut rng,
    )?;
    let sigma2 = channel.noise_variance();
    let opts = ForwardOptions::inference(*ofdm);
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut state: Option<(ChannelRealization, Csi, Optimizer)> = None;
    let mut channel_epoch = 0;
    for step in 0..cfg.steps {
        if step % cfg.period == 0 {
            let cm = if cfg.relocate && step > 0 { channel.relocated(&mut rng) } else { channel.clone() };
            let real = cm.sample_realization(ofdm, &mut rng)?;
            let csi = channel::estimate_csi(&cm, &real, ofdm, &mut rng)?;
            let opt = Optimizer::new(cfg.adapt_cfg.optimizer.clone(), &model.params)?;
            state = Some((real, csi, opt));
            channel_epoch += 1;
        }
        let (real, csi, opt) = state.as_mut().expect("channel drawn at step 0");
        let batch = TaskBatch::sample(&data.test, model.arch.n_comp, cfg.items_per_step, &mut rng)?;
        let acc = batch_accuracy(&model, &batch, real, csi, sigma2, &opts, &mut rng)?;
        let acc_mean = acc.iter().sum::<f64>() / acc.len() as f64;
        let pilot_loss = if cfg.adapt && step % cfg.adapt_cfg.pilot_period == 0 {
            let out = adapt_step(
                &mut model,
                opt,
                &mut pilots,
                &batch,
                real,
                csi,
                sigma2,
                step as u64,
                &cfg.adapt_cfg,
                ofdm,
                &mut adapt_rng,
            )?;
            Some(out.pilot_loss)
        } else {
            None
        };
        rows.push(DynamicRow { step, channel_epoch, acc_mean, pilot_loss });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_channel_hash() {
        assert!((0..1000).all(|t| select_pilot_channel(t, 99, 1) == 0));
        assert_eq!(select_pilot_channel(17, 3, 8), select_pilot_channel(17, 3, 8));
        assert!((0..1000).all(|t| select_pilot_channel(t, 5, 3) < 3));
    }

    #[test]
    fn splitmix_reference_values() {
        // first outputs of the reference generator seeded with 0
        let mut state = 0u64;
        let mut next = || {
            let out = splitmix64(state);
            state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
            out
        };
        assert_eq!(next(), 0xe220_a839_7b1d_cdaf);
        assert_eq!(next(), 0x6e78_9e6a_a1b9_65f4);
    }

    #[test]
    fn sgd_and_adam_move_downhill() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = ModelParams::default();
            p.insert("w", ParamGroup::Ft, RealTensor::from_slice(&[1.0, -2.0])).unwrap();
            let cfg = OptimizerConfig { kind, lr: 0.1, clip_norm: None, ..OptimizerConfig::default() };
            let mut opt = Optimizer::new(cfg, &p).unwrap();
            let g = Some(RealTensor::from_slice(&[1.0, -1.0]));
            opt.step(&mut p, &[g]).unwrap();
            let w = p.get("w").unwrap().data();
            assert!(w[0] < 1.0 && w[1] > -2.0);
        }
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = ModelParams::default();
        p.insert("w", ParamGroup::Ft, RealTensor::from_slice(&[0.3, -0.7])).unwrap();
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerConfig { lr: 0.0, ..OptimizerConfig::default() }, &p).unwrap();
        opt.step(&mut p, &[Some(RealTensor::from_slice(&[5.0, 5.0]))]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn clip_bounds_sgd_step() {
        let mut p = ModelParams::default();
        p.insert("w", ParamGroup::Ft, RealTensor::zeros(&[1])).unwrap();
        let cfg = OptimizerConfig { kind: OptimizerKind::Sgd, lr: 1.0, clip_norm: Some(0.5), ..OptimizerConfig::default() };
        let mut opt = Optimizer::new(cfg, &p).unwrap();
        opt.step(&mut p, &[Some(RealTensor::from_slice(&[10.0]))]).unwrap();
        assert!((p.get("w").unwrap().data()[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_pilot_store_rejected() {
        let empty = Dataset::new(RealTensor::zeros(&[0, 1, 2, 2]), vec![], 2).unwrap();
        assert!(PilotStore::new(vec![empty], 0).is_err());
        assert!(PilotStore::new(vec![], 0).is_err());
    }

    #[test]
    fn pilot_store_cycles() {
        let ds = Dataset::new(RealTensor::new(&[3, 1, 1, 1], vec![0.0, 1.0, 2.0]).unwrap(), vec![0, 1, 0], 2).unwrap();
        let mut s = PilotStore::new(vec![ds], 1).unwrap();
        assert_eq!(s.next(0, 2).0.data(), &[0.0, 1.0]);
        assert_eq!(s.next(0, 2).0.data(), &[2.0, 0.0]);
    }

    #[test]
    fn argmax_picks_first_max() {
        let l = RealTensor::new(&[2, 3], vec![0.0, 2.0, 2.0, -1.0, -3.0, -2.0]).unwrap();
        assert_eq!(argmax_rows(&l), vec![1, 0]);
    }
}
