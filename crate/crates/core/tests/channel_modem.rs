//! OFDM modem and MIMO channel: oracle equivalence and Monte Carlo statistics.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semux_core::channel::{self, ChannelModel, ChannelRealization, Fading};
use semux_core::diffcore::{ComplexTensor, Tape};
use semux_core::modem::{self, OfdmConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn freq_path(z: &ComplexTensor, real: &ChannelRealization) -> ComplexTensor {
    let s = z.shape().to_vec();
    let mut tape = Tape::new();
    let zv = tape.complex_constant(z.clone().reshape(&[1, s[0], s[1], s[2]]).unwrap());
    let y = channel::apply_freq_with_noise(&mut tape, zv, &real.h, None).unwrap();
    let nr = real.n_rx();
    tape.complex_value(y).reshape(&[s[0], s[1], nr]).unwrap()
}

fn time_path(z: &ComplexTensor, real: &ChannelRealization, ofdm: &OfdmConfig) -> ComplexTensor {
    let w = modem::modulate(z, ofdm).unwrap();
    modem::demodulate(&channel::apply_time_with_noise(&w, real, None).unwrap(), ofdm).unwrap()
}

#[test]
fn time_and_frequency_paths_agree_on_100_pairs() {
    let ofdm = OfdmConfig::new(128, 96).unwrap();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let fading = if i % 2 == 0 { Fading::Rayleigh } else { Fading::Rician { k_factor_db: 6.0 } };
        let cm = ChannelModel::new(2, 3, 1 + i % 12, fading, 20.0).unwrap();
        let real = cm.sample_realization(&ofdm, &mut r).unwrap();
        let z = ComplexTensor::randn(&[2, 96, 2], 1.0, &mut r);
        worst = worst.max(time_path(&z, &real, &ofdm).max_abs_diff(&freq_path(&z, &real)));
        worst = worst.max(modem::demodulate(&modem::modulate(&z, &ofdm).unwrap(), &ofdm).unwrap().max_abs_diff(&z));
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn matched_noise_keeps_the_paths_equal() {
    // time-domain noise n maps to FFT(n)/scale on the used bins
    let ofdm = OfdmConfig::new(64, 40).unwrap();
    let cm = ChannelModel::new(2, 2, 5, Fading::Rayleigh, 10.0).unwrap();
    let real = cm.sample_realization(&ofdm, &mut rng(2)).unwrap();
    let z = ComplexTensor::randn(&[1, 40, 2], 1.0, &mut rng(3));
    let w = modem::modulate(&z, &ofdm).unwrap();
    let noise = ComplexTensor::randn(&[1, 64, 2], cm.noise_variance(), &mut rng(4));
    let via_time = modem::demodulate(&channel::apply_time_with_noise(&w, &real, Some(&noise)).unwrap(), &ofdm).unwrap();
    let noise_bins = modem::demodulate(&modem::Waveform { samples: noise, scale: w.scale }, &ofdm).unwrap();
    let mut tape = Tape::new();
    let zv = tape.complex_constant(z.reshape(&[1, 1, 40, 2]).unwrap());
    let nb = noise_bins.reshape(&[1, 1, 40, 2]).unwrap();
    let y = channel::apply_freq_with_noise(&mut tape, zv, &real.h, Some(&nb)).unwrap();
    let via_freq = tape.complex_value(y).reshape(&[1, 40, 2]).unwrap();
    assert!(via_time.max_abs_diff(&via_freq) < 1e-9);
}

#[test]
fn average_channel_energy_is_one() {
    let ofdm = OfdmConfig::new(16, 8).unwrap();
    for fading in [Fading::Rayleigh, Fading::Rician { k_factor_db: 3.0 }] {
        let cm = ChannelModel::new(1, 1, 6, fading, 20.0).unwrap();
        let mut r = rng(5);
        let n = 10_000;
        let total: f64 = (0..n).map(|_| cm.sample_realization(&ofdm, &mut r).unwrap().taps.energy()).sum();
        let mean = total / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "{fading:?}: {mean}");
    }
}

#[test]
fn frequency_noise_has_the_configured_variance() {
    let ofdm = OfdmConfig::new(16, 8).unwrap();
    let real = ChannelRealization::identity(2, &ofdm).unwrap();
    let sigma2 = 0.01;
    let mut tape = Tape::new();
    let z = tape.complex_constant(ComplexTensor::zeros(&[3125, 2, 8, 2]));
    let y = channel::apply_freq(&mut tape, z, &real, &[sigma2; 8], &mut rng(6)).unwrap();
    let y = tape.complex_value(y);
    let var = y.energy() / y.len() as f64;
    assert_eq!(y.len(), 100_000);
    assert!((var / sigma2 - 1.0).abs() < 0.05, "{var}");
    assert!((ChannelModel::new(2, 2, 1, Fading::Rayleigh, 20.0).unwrap().noise_variance() - 0.01).abs() < 1e-15);
}

#[test]
fn time_noise_energy_per_packet() {
    let ofdm = OfdmConfig::new(64, 32).unwrap();
    let cm = ChannelModel::new(2, 3, 4, Fading::Rayleigh, 13.0).unwrap();
    let real = cm.sample_realization(&ofdm, &mut rng(7)).unwrap();
    let silent = modem::Waveform { samples: ComplexTensor::zeros(&[2000, 64, 2]), scale: 1.0 };
    let y = channel::apply_time(&silent, &real, cm.noise_variance(), &mut rng(8)).unwrap();
    let per_packet = y.samples.energy() / 2000.0;
    let want = 64.0 * cm.noise_variance() * 3.0;
    assert!((per_packet / want - 1.0).abs() < 0.05, "{per_packet} vs {want}");
}

#[test]
fn single_unit_tap_passes_the_waveform_through() {
    let ofdm = OfdmConfig::new(32, 16).unwrap();
    let real = ChannelRealization::identity(2, &ofdm).unwrap();
    let w = modem::modulate(&ComplexTensor::randn(&[2, 16, 2], 1.0, &mut rng(9)), &ofdm).unwrap();
    let y = channel::apply_time_with_noise(&w, &real, None).unwrap();
    assert!(y.samples.max_abs_diff(&w.samples) < 1e-15);
}

#[test]
fn ls_estimation_error_statistics() {
    let ofdm = OfdmConfig::new(64, 48).unwrap();
    let cm = ChannelModel::new(2, 2, 4, Fading::Rayleigh, 20.0).unwrap();
    let sigma2 = cm.noise_variance();
    let mut r = rng(10);
    let real = cm.sample_realization(&ofdm, &mut r).unwrap();
    let pilots = ComplexTensor::from_real(semux_core::diffcore::RealTensor::full(&[48], 1.0));
    // the pilot packet is peak-normalized, so the symbol that reaches the channel is s·x
    let mut x = ComplexTensor::zeros(&[1, 48, 2]);
    for k in 0..48 {
        x.set(k * 2, (1.0, 0.0));
    }
    let s = modem::modulate(&x, &ofdm).unwrap().scale;
    let expected = sigma2 / (s * s);

    let trials = 10_000;
    let (mut err, mut count, mut sigma_hat) = (0.0, 0usize, 0.0);
    for _ in 0..trials {
        let est = channel::estimate_csi_with_pilots(&cm, &real, &ofdm, &pilots, &mut r).unwrap();
        for i in 0..est.h.len() {
            let (a, b) = est.h.get(i);
            let (c, d) = real.h.get(i);
            err += (a - c).powi(2) + (b - d).powi(2);
            count += 1;
        }
        sigma_hat += est.sigma2_noise.data()[0];
    }
    let err_var = err / count as f64;
    assert!((err_var / expected - 1.0).abs() < 0.05, "{err_var} vs {expected}");
    let mean_sigma = sigma_hat / trials as f64;
    assert!((mean_sigma / sigma2 - 1.0).abs() < 0.1, "{mean_sigma} vs {sigma2}");
}

#[test]
fn rician_los_geometry_sets_the_mean() {
    let ofdm = OfdmConfig::new(16, 8).unwrap();
    let mut cm = ChannelModel::new(2, 2, 1, Fading::Rician { k_factor_db: f64::INFINITY }, 20.0).unwrap();
    cm.los.departure = 0.3;
    cm.los.arrival = -0.4;
    let a = cm.sample_realization(&ofdm, &mut rng(11)).unwrap();
    let b = cm.sample_realization(&ofdm, &mut rng(12)).unwrap();
    assert!(a.taps.max_abs_diff(&b.taps) < 1e-15);
    assert!(a.taps.max_abs_diff(&cm.los_matrix().reshape(&[1, 2, 2]).unwrap()) < 1e-12);
    let moved = cm.relocated(&mut rng(13));
    assert_ne!(moved.los, cm.los);
    assert!(moved.los.departure.abs() < std::f64::consts::FRAC_PI_2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn oracle_holds_for_all_shapes(
        seed in 0u64..100_000,
        log_n in 3u32..8,
        used_frac in 0.2f64..0.9,
        packets in 1usize..3,
        nt in 1usize..4,
        nr in 1usize..4,
        taps in 1usize..8,
    ) {
        let n = 1usize << log_n;
        let k = ((n as f64 * used_frac) as usize / 2 * 2).clamp(2, n - 2);
        let ofdm = OfdmConfig::new(n, k).unwrap();
        let cm = ChannelModel::new(nt, nr, taps.min(n), Fading::Rayleigh, 20.0).unwrap();
        let mut r = rng(seed);
        let real = cm.sample_realization(&ofdm, &mut r).unwrap();
        let z = ComplexTensor::randn(&[packets, k, nt], 1.0, &mut r);
        let w = modem::modulate(&z, &ofdm).unwrap();
        prop_assert!((w.peak() - 1.0).abs() < 1e-12);
        prop_assert!(modem::demodulate(&w, &ofdm).unwrap().max_abs_diff(&z) < 1e-9);
        prop_assert!(time_path(&z, &real, &ofdm).max_abs_diff(&freq_path(&z, &real)) < 1e-9);
        prop_assert!(real.cfr_consistency(&ofdm) < 1e-9);
    }
}
