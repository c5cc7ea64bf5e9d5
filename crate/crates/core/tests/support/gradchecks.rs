//! Finite-difference checks of composed forward paths; each returns the
//! maximum relative error.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semux_core::channel::{self, ChannelModel, Fading};
use semux_core::codec::{self, Csi};
use semux_core::data::{synthetic, SyntheticSpec};
use semux_core::diffcore::{grad_check, grad_check_report, CVar, GradCheckOptions, RealTensor, Tape, Var};
use semux_core::modem::{self, OfdmConfig};
use semux_core::nets::{self, ArchConfig, SemuxModel};
use semux_core::pipeline::TaskBatch;
use semux_core::vibloss::{self, LossConfig};
use semux_core::vsa;
use semux_core::Result;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `Σ w ⊙ x` with fixed random weights, so no gradient cancels by symmetry.
fn weighted(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = RealTensor::randn(tape.shape(x), 1.0, &mut rng(seed));
    let w = tape.constant(w);
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

fn weighted_c(tape: &mut Tape, z: CVar, seed: u64) -> Result<Var> {
    let a = weighted(tape, z.re, seed)?;
    let b = weighted(tape, z.im, seed + 1)?;
    tape.add(a, b)
}

fn arch() -> ArchConfig {
    ArchConfig { n_comp: 2, key_dim: 4, packets: 1, k_used: 4, csi_hidden: 4, rx_hidden: 6, feature_dim: 5, ..ArchConfig::default() }
}

fn csi(a: &ArchConfig, seed: u64) -> Csi {
    let ofdm = OfdmConfig::new(16, a.k_used).unwrap();
    let cm = ChannelModel::new(a.n_tx, a.n_rx, 2, Fading::Rayleigh, 20.0).unwrap();
    cm.sample_realization(&ofdm, &mut rng(seed)).unwrap().csi(cm.noise_variance()).unwrap()
}

fn model(a: ArchConfig) -> SemuxModel {
    SemuxModel::init(a, &mut rng(1)).unwrap()
}

fn all_params(m: &SemuxModel) -> Vec<RealTensor> {
    m.params.entries().iter().map(|e| e.value.clone()).collect()
}

fn probes() -> GradCheckOptions {
    GradCheckOptions { max_probes_per_param: Some(6), ..GradCheckOptions::default() }
}

pub fn bind_superpose_unbind() -> f64 {
    let x1 = RealTensor::randn(&[2, 8, 3, 3], 1.0, &mut rng(2));
    let x2 = RealTensor::randn(&[2, 8, 3, 3], 1.0, &mut rng(3));
    let k1 = RealTensor::randn(&[8], 0.35, &mut rng(4));
    let k2 = RealTensor::randn(&[8], 0.35, &mut rng(5));
    let m = RealTensor::randn(&[8, 8], 0.35, &mut rng(6));
    grad_check(
        |tape, v| {
            let a = vsa::bind(tape, v[0], v[2])?;
            let b = vsa::bind(tape, v[1], v[3])?;
            let s = vsa::superpose(tape, &[a, b])?;
            let u = vsa::unbind(tape, s, v[4])?;
            weighted(tape, u, 7)
        },
        &[x1, x2, k1, k2, m],
        1e-5,
    )
    .unwrap()
}

pub fn precode_with_frozen_noise() -> f64 {
    let a = arch();
    let m = model(a.clone());
    let c = csi(&a, 8);
    let t = RealTensor::randn(&[3, a.t_len()], 1.0, &mut rng(9));
    let mut params = all_params(&m);
    params.push(t);
    grad_check_report(
        |tape, v| {
            let p = m.params.bind_vars(&v[..v.len() - 1])?;
            let dist = codec::precode(tape, &a, &p, v[v.len() - 1], &c)?;
            let z = codec::sample_latent(tape, &dist, &mut rng(10))?;
            let kl = vibloss::kl_to_standard(tape, &dist)?;
            let s = weighted_c(tape, z, 11)?;
            tape.add(s, kl)
        },
        &params,
        &probes(),
    )
    .unwrap()
    .max_relative_error
}

pub fn apply_freq_and_modem() -> f64 {
    let ofdm = OfdmConfig::new(16, 6).unwrap();
    let cm = ChannelModel::new(2, 3, 3, Fading::Rayleigh, 15.0).unwrap();
    let real = cm.sample_realization(&ofdm, &mut rng(12)).unwrap();
    let re = RealTensor::randn(&[2, 1, 6, 2], 1.0, &mut rng(13));
    let im = RealTensor::randn(&[2, 1, 6, 2], 1.0, &mut rng(14));
    grad_check(
        |tape, v| {
            let z = CVar { re: v[0], im: v[1] };
            let y = channel::apply_freq(tape, z, &real, &[0.03; 6], &mut rng(15))?;
            let y = tape.creshape(y, &[2, 6, 3])?;
            let (w, scale) = modem::modulate_var(tape, y, &ofdm)?;
            let back = modem::demodulate_var(tape, w, scale, &ofdm)?;
            weighted_c(tape, back, 16)
        },
        &[re, im],
        1e-5,
    )
    .unwrap()
}

pub fn postcode_with_and_without_combiner() -> f64 {
    let mut worst: f64 = 0.0;
    for mmse in [true, false] {
        let a = ArchConfig { mmse_branch: mmse, ..arch() };
        let m = model(a.clone());
        let c = csi(&a, 17);
        let re = RealTensor::randn(&[2, a.packets, a.k_used, a.n_rx], 1.0, &mut rng(18));
        let im = RealTensor::randn(&[2, a.packets, a.k_used, a.n_rx], 1.0, &mut rng(19));
        let mut params = all_params(&m);
        params.push(re);
        params.push(im);
        let rep = grad_check_report(
            |tape, v| {
                let n = v.len();
                let p = m.params.bind_vars(&v[..n - 2])?;
                let out = codec::postcode(tape, &a, &p, CVar { re: v[n - 2], im: v[n - 1] }, &c)?;
                weighted(tape, out, 20)
            },
            &params,
            &probes(),
        )
        .unwrap();
        worst = worst.max(rep.max_relative_error);
    }
    worst
}

pub fn transmitter_and_receiver_networks() -> f64 {
    let a = arch();
    let m = model(a.clone());
    let data = synthetic(&SyntheticSpec { n_train: 16, n_test: 4, ..SyntheticSpec::default() }, 0).unwrap();
    let batch = TaskBatch::sample(&data.train, 2, 2, &mut rng(21)).unwrap();
    grad_check_report(
        |tape, v| {
            let p = m.params.bind_vars(v)?;
            let inputs: Vec<Var> = batch.inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let bound = nets::bind_inputs(tape, &m, &p, &inputs)?;
            let t = nets::f_t(tape, &m, &p, bound)?;
            let post = tape.narrow(t, 1, 0, a.postcoded_len())?;
            let feats = nets::f_r(tape, &m, &p, post)?;
            let unbound = nets::unbind_all(tape, &m, &p, feats)?;
            let logits = nets::classify_heads(tape, &m, &p, &unbound)?;
            vibloss::nll_term(tape, &logits, &batch.labels)
        },
        &all_params(&m),
        &probes(),
    )
    .unwrap()
    .max_relative_error
}

pub fn full_vib_loss() -> f64 {
    let a = arch();
    let m = model(a);
    let data = synthetic(&SyntheticSpec { n_train: 32, n_test: 8, ..SyntheticSpec::default() }, 0).unwrap();
    let ofdm = OfdmConfig::new(16, 4).unwrap();
    let ch = ChannelModel::new(2, 2, 2, Fading::Rayleigh, 20.0).unwrap();
    let batch = TaskBatch::sample(&data.train, 2, 3, &mut rng(2)).unwrap();
    let cfg = LossConfig { beta: 0.1, n_mc: 2, peak_normalize: false };
    grad_check_report(
        |tape, v| {
            let p = m.params.bind_vars(v)?;
            Ok(vibloss::vib_loss_mc(tape, &m, &p, &batch, &ch, &ofdm, &cfg, &mut rng(5))?.loss)
        },
        &all_params(&m),
        &probes(),
    )
    .unwrap()
    .max_relative_error
}

type Check = fn() -> f64;

pub const CASES: [(&str, Check); 6] = [
    ("bind_superpose_unbind", bind_superpose_unbind),
    ("precode_with_frozen_noise", precode_with_frozen_noise),
    ("apply_freq_and_modem", apply_freq_and_modem),
    ("postcode_with_and_without_combiner", postcode_with_and_without_combiner),
    ("transmitter_and_receiver_networks", transmitter_and_receiver_networks),
    ("full_vib_loss", full_vib_loss),
];
