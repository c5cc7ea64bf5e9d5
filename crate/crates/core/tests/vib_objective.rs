//! KL term, cross-entropy, reparameterized sampling and the Monte Carlo objective.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semux_core::channel::{ChannelModel, Fading};
use semux_core::codec::{self, LatentDistribution};
use semux_core::data::{synthetic, SyntheticSpec};
use semux_core::diffcore::{ComplexTensor, RealTensor, Tape};
use semux_core::modem::OfdmConfig;
use semux_core::nets::{ArchConfig, SemuxModel};
use semux_core::pipeline::TaskBatch;
use semux_core::vibloss::{self, LossConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `∫ q ln(q/p)` for `q = N(m, v)`, `p = N(0, 1/2)`, by Simpson's rule.
fn kl_1d(m: f64, v: f64) -> f64 {
    let sd = v.sqrt();
    let (lo, hi, n) = (m - 14.0 * sd, m + 14.0 * sd, 40_000);
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let lq = -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (x - m).powi(2) / (2.0 * v);
        let lp = -0.5 * std::f64::consts::PI.ln() - x * x;
        lq.exp() * (lq - lp)
    };
    let inner: f64 = (1..n).map(|i| f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(lo) + f(hi) + inner) * h / 3.0
}

fn kl_one(mu: (f64, f64), s2: f64) -> f64 {
    let mut m = ComplexTensor::zeros(&[1]);
    m.set(0, mu);
    vibloss::kl_value(&m, &RealTensor::from_slice(&[s2])).unwrap()
}

#[test]
fn closed_form_kl_matches_numerical_integration() {
    let mut r = rng(0);
    for _ in 0..20 {
        let mu = (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
        let s2 = r.gen_range(0.05..4.0);
        // a circular complex Gaussian is two independent real ones with half the variance
        let numeric = kl_1d(mu.0, s2 / 2.0) + kl_1d(mu.1, s2 / 2.0);
        let closed = kl_one(mu, s2);
        assert!((closed - numeric).abs() < 1e-4, "mu {mu:?} s2 {s2}: {closed} vs {numeric}");
    }
    assert_eq!(kl_one((0.0, 0.0), 1.0), 0.0);
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_only_at_the_prior(a in -3.0f64..3.0, b in -3.0f64..3.0, s2 in 1e-3f64..10.0) {
        let kl = kl_one((a, b), s2);
        prop_assert!(kl >= 0.0);
        let dist = a * a + b * b + (s2 - 1.0).powi(2);
        if dist > 1e-3 {
            prop_assert!(kl > 1e-9);
        }
    }
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let logits = RealTensor::randn(&[7, 5], 2.0, &mut rng(1));
    let labels: Vec<usize> = (0..7).map(|i| (i * 3) % 5).collect();
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let nll = vibloss::nll_term(&mut tape, &[l], std::slice::from_ref(&labels)).unwrap();
    let direct: f64 = logits
        .data()
        .chunks(5)
        .zip(&labels)
        .map(|(row, &y)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum::<f64>()
        / 7.0;
    assert!((tape.value(nll).item() - direct).abs() < 1e-10);

    let mut sharp = RealTensor::zeros(&[1, 3]);
    sharp.data_mut()[1] = 800.0;
    let s = tape.constant(sharp);
    let nll = vibloss::nll_term(&mut tape, &[s], &[vec![1]]).unwrap();
    assert!(tape.value(nll).item() < 1e-300);
}

#[test]
fn reparameterized_samples_have_the_right_moments() {
    let n = 100_000;
    let mu_v = (0.7, -1.2);
    let s2 = 0.3;
    let mut m = ComplexTensor::zeros(&[n]);
    for i in 0..n {
        m.set(i, mu_v);
    }
    let mut tape = Tape::new();
    let mu = tape.complex_constant(m);
    let sigma2 = tape.constant(RealTensor::full(&[n], s2));
    let z = codec::sample_latent(&mut tape, &LatentDistribution { mu, sigma2 }, &mut rng(2)).unwrap();
    let z = tape.complex_value(z);
    let (mut sr, mut si, mut sq) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = z.get(i);
        sr += a;
        si += b;
        sq += (a - mu_v.0).powi(2) + (b - mu_v.1).powi(2);
    }
    let tol = 3.0 * (s2 / n as f64).sqrt();
    assert!((sr / n as f64 - mu_v.0).abs() < tol);
    assert!((si / n as f64 - mu_v.1).abs() < tol);
    assert!((sq / n as f64 / s2 - 1.0).abs() < 0.05);
}

struct Fixture {
    model: SemuxModel,
    batch: TaskBatch,
    channel: ChannelModel,
    ofdm: OfdmConfig,
}

fn fixture(n_classes: usize, model_seed: u64) -> Fixture {
    let spec = SyntheticSpec { n_classes, n_train: 64, n_test: 8, ..SyntheticSpec::default() };
    let data = synthetic(&spec, 0).unwrap();
    let arch = ArchConfig { n_comp: 2, key_dim: 8, k_used: 8, n_classes, ..ArchConfig::default() };
    Fixture {
        model: SemuxModel::init(arch, &mut rng(model_seed)).unwrap(),
        batch: TaskBatch::sample(&data.train, 2, 16, &mut rng(model_seed + 100)).unwrap(),
        channel: ChannelModel::new(2, 2, 4, Fading::Rayleigh, 20.0).unwrap(),
        ofdm: OfdmConfig::new(32, 8).unwrap(),
    }
}

fn loss(f: &Fixture, cfg: &LossConfig, seed: u64) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let p = f.model.params.bind(&mut tape);
    let parts = vibloss::vib_loss_mc(&mut tape, &f.model, &p, &f.batch, &f.channel, &f.ofdm, cfg, &mut rng(seed)).unwrap();
    (tape.value(parts.loss).item(), parts.nll, parts.kl)
}

#[test]
fn beta_zero_loss_is_exactly_the_nll() {
    let f = fixture(8, 3);
    for n_mc in [1, 2, 4] {
        let (l, nll, kl) = loss(&f, &LossConfig { beta: 0.0, n_mc, peak_normalize: true }, 4);
        assert_eq!(l.to_bits(), nll.to_bits(), "n_mc {n_mc}");
        assert!(kl > 0.0);
    }
}

#[test]
fn untrained_loss_is_near_uniform_prediction() {
    let cfg = LossConfig::default();
    for seed in 0..20 {
        let f = fixture(10, seed);
        let (l, _, kl) = loss(&f, &cfg, seed);
        let expected = 10f64.ln() + cfg.beta * kl;
        assert!((l / expected - 1.0).abs() < 0.1, "seed {seed}: {l} vs {expected}");
    }
}

#[test]
fn monte_carlo_variance_falls_as_one_over_samples() {
    let f = fixture(8, 5);
    let counts = [1usize, 2, 4, 8];
    let reps = 150;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &n_mc in &counts {
        let cfg = LossConfig { beta: 1e-2, n_mc, peak_normalize: true };
        let vals: Vec<f64> = (0..reps).map(|r| loss(&f, &cfg, 1000 * n_mc as u64 + r).0).collect();
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        xs.push((n_mc as f64).ln());
        ys.push(var.ln());
    }
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((slope + 1.0).abs() <= 0.2, "slope {slope}");
}
