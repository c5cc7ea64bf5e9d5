//! Fast property checks run by the `selftest` command.

use crate::channel::{self, ChannelModel, Fading};
use crate::data::{self, SyntheticSpec};
use crate::diffcore::{grad_check_report, GradCheckOptions, RealTensor, Tape};
use crate::error::Result;
use crate::experiment::checkpoint::Checkpoint;
use crate::experiment::config::ExperimentConfig;
use crate::modem::{self, OfdmConfig};
use crate::nets::{ArchConfig, SemuxModel};
use crate::pipeline::{self, ForwardOptions, TaskBatch};
use crate::vibloss::{self, LossConfig};
use crate::vsa::{self, BindingKeySet};
use crate::diffcore::ComplexTensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn tiny_model(n_comp: usize) -> Result<SemuxModel> {
    let arch = ArchConfig { n_comp, key_dim: 4, packets: 1, k_used: 4, csi_hidden: 4, rx_hidden: 6, feature_dim: 5, ..ArchConfig::default() };
    SemuxModel::init(arch, &mut ChaCha8Rng::seed_from_u64(1))
}

fn tiny_data() -> Result<data::DataSplit> {
    data::synthetic(&SyntheticSpec { n_train: 32, n_test: 8, ..SyntheticSpec::default() }, 0)
}

fn gradients() -> Result<(bool, String)> {
    let data = tiny_data()?;
    let model = tiny_model(2)?;
    let ofdm = OfdmConfig::new(16, 4)?;
    let ch = ChannelModel::new(2, 2, 2, Fading::Rayleigh, 20.0)?;
    let batch = TaskBatch::sample(&data.train, 2, 3, &mut ChaCha8Rng::seed_from_u64(2))?;
    let params: Vec<RealTensor> = model.params.entries().iter().map(|e| e.value.clone()).collect();
    let cfg = LossConfig { beta: 0.1, n_mc: 2, peak_normalize: false };
    let rep = grad_check_report(
        |tape, vars| {
            let p = model.params.bind_vars(vars)?;
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            Ok(vibloss::vib_loss_mc(tape, &model, &p, &batch, &ch, &ofdm, &cfg, &mut rng)?.loss)
        },
        &params,
        &GradCheckOptions { max_probes_per_param: Some(4), ..Default::default() },
    )?;
    Ok((rep.max_relative_error < 1e-4, format!("max relative error {:.2e}", rep.max_relative_error)))
}

fn modem_oracle() -> Result<(bool, String)> {
    let ofdm = OfdmConfig::new(64, 48)?;
    let cm = ChannelModel::new(2, 2, 6, Fading::Rayleigh, 20.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let z = ComplexTensor::randn(&[2, 48, 2], 1.0, &mut rng);
        let real = cm.sample_realization(&ofdm, &mut rng)?;
        let w = modem::modulate(&z, &ofdm)?;
        worst = worst.max(modem::demodulate(&w, &ofdm)?.max_abs_diff(&z));
        let via_time = modem::demodulate(&channel::apply_time_with_noise(&w, &real, None)?, &ofdm)?;
        let mut tape = Tape::new();
        let zv = tape.complex_constant(z.clone().reshape(&[1, 2, 48, 2])?);
        let y = channel::apply_freq_with_noise(&mut tape, zv, &real.h, None)?;
        let via_freq = tape.complex_value(y).reshape(&[2, 48, 2])?;
        worst = worst.max(via_time.max_abs_diff(&via_freq));
    }
    Ok((worst < 1e-9, format!("max deviation {worst:.2e}")))
}

/// KL of `N(m, s²)` from `N(0, 1/2)` by Simpson's rule on a wide grid.
pub fn kl_numeric_real(m: f64, var: f64) -> f64 {
    let sd = var.sqrt();
    let (lo, hi, n) = (m - 12.0 * sd, m + 12.0 * sd, 20_000);
    let h = (hi - lo) / n as f64;
    let ln_q = |x: f64| -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - m).powi(2) / (2.0 * var);
    let ln_p = |x: f64| -0.5 * std::f64::consts::PI.ln() - x * x;
    let f = |x: f64| ln_q(x).exp() * (ln_q(x) - ln_p(x));
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn kl_integration() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for (mu, s2) in [((0.3, -0.2), 0.7), ((1.5, 0.0), 0.2), ((-0.4, 0.9), 2.5)] {
        let mut m = ComplexTensor::zeros(&[1]);
        m.set(0, mu);
        let closed = vibloss::kl_value(&m, &RealTensor::from_slice(&[s2]))?;
        let numeric = kl_numeric_real(mu.0, s2 / 2.0) + kl_numeric_real(mu.1, s2 / 2.0);
        worst = worst.max((closed - numeric).abs());
    }
    let zero = vibloss::kl_value(&ComplexTensor::zeros(&[1]), &RealTensor::from_slice(&[1.0]))?;
    Ok((worst < 1e-4 && zero == 0.0, format!("max deviation {worst:.2e}, KL at the prior {zero}")))
}

fn beta_zero() -> Result<(bool, String)> {
    let data = tiny_data()?;
    let model = tiny_model(2)?;
    let ofdm = OfdmConfig::new(16, 4)?;
    let ch = ChannelModel::new(2, 2, 2, Fading::Rayleigh, 20.0)?;
    let batch = TaskBatch::sample(&data.train, 2, 4, &mut ChaCha8Rng::seed_from_u64(3))?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let cfg = LossConfig { beta: 0.0, ..LossConfig::default() };
    let parts = vibloss::vib_loss_mc(&mut tape, &model, &p, &batch, &ch, &ofdm, &cfg, &mut ChaCha8Rng::seed_from_u64(4))?;
    let loss = tape.value(parts.loss).item();
    Ok((loss.to_bits() == parts.nll.to_bits(), format!("loss {loss}, nll {}", parts.nll)))
}

fn keys() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let big = vsa::mean_cross_talk(&BindingKeySet::init(8, 1024, &mut rng)?)?;
    Ok((big < 0.1, format!("mean |cos| at dim 1024 {big:.4}")))
}

fn pilot_hash() -> Result<(bool, String)> {
    let n = 4;
    let draws = 20_000u64;
    let mut counts = vec![0.0; n];
    for t in 0..draws {
        counts[pipeline::select_pilot_channel(t, 0x5eed, n)] += 1.0;
    }
    let e = draws as f64 / n as f64;
    let chi2: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
    // 99.9th percentile of chi-square with 3 degrees of freedom
    Ok((chi2 < 16.27, format!("chi-square {chi2:.2}")))
}

fn persistence() -> Result<(bool, String)> {
    let data = tiny_data()?;
    let model = tiny_model(2)?;
    let ck = Checkpoint::new([0; 32], 1, ChaCha8Rng::seed_from_u64(8), model.params.clone());
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes)?;
    let same_bytes = back.to_bytes() == bytes;
    let restored = back.into_model(model.arch.clone())?;
    let ofdm = OfdmConfig::new(16, 4)?;
    let real = channel::ChannelRealization::identity(2, &ofdm)?;
    let csi = real.csi(0.01)?;
    let (x, _) = data.test.gather(&[0, 1, 2]);
    let inputs = vec![x.clone(), x];
    let opts = ForwardOptions::inference(ofdm);
    let a = pipeline::infer_logits(&model, &inputs, &real, Some(&csi), 0.0, &opts, &mut ChaCha8Rng::seed_from_u64(1))?;
    let b = pipeline::infer_logits(&restored, &inputs, &real, Some(&csi), 0.0, &opts, &mut ChaCha8Rng::seed_from_u64(1))?;
    let diff = a.iter().zip(&b).map(|(p, q)| p.max_abs_diff(q)).fold(0.0, f64::max);
    let cfg = ExperimentConfig::parse("n_comp = 3\nsnr_db = 10")?;
    let cfg_ok = ExperimentConfig::parse(&cfg.to_text())? == cfg;
    Ok((same_bytes && diff == 0.0 && cfg_ok, format!("bytes identical {same_bytes}, logit diff {diff}, config round trip {cfg_ok}")))
}

fn idx_files() -> Result<(bool, String)> {
    let d = tiny_data()?.test;
    let (img, lab) = data::encode_idx(&d)?;
    let back = data::parse_idx_images(&img)?;
    let labels_ok = data::parse_idx_labels(&lab)? == d.labels;
    let mut bad = img.clone();
    bad[2] = 0x09;
    let rejected = data::parse_idx_images(&bad).map_err(|e| e.to_string()).err().is_some_and(|m| m.contains("0x00000903"));
    let err = back.max_abs_diff(&d.images);
    Ok((labels_ok && rejected && err <= 0.5 / 255.0 + 1e-12, format!("pixel error {err:.2e}, bad magic rejected {rejected}")))
}

type Check = fn() -> Result<(bool, String)>;

pub fn run() -> Vec<CheckResult> {
    let checks: [(&'static str, Check); 8] = [
        ("gradients", gradients),
        ("modem_channel_oracle", modem_oracle),
        ("kl_integration", kl_integration),
        ("beta_zero_is_nll", beta_zero),
        ("key_orthogonality", keys),
        ("pilot_hash_uniformity", pilot_hash),
        ("persistence", persistence),
        ("idx_files", idx_files),
    ];
    checks
        .iter()
        .map(|&(name, f)| match f() {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult { name, passed: false, detail: format!("error: {e}") },
        })
        .collect()
}
