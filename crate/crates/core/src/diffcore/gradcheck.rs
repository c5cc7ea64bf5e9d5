//! Central finite-difference oracle for tape gradients.

use super::tape::{Tape, Var};
use super::tensor::RealTensor;
use crate::error::Result;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Check at most this many randomly chosen entries per parameter tensor.
    pub max_probes_per_param: Option<usize>,
    pub probe_seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { epsilon: 1e-5, max_probes_per_param: None, probe_seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Worst error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    pub probes: usize,
}

/// Max over parameters of `|analytic − numeric| / max(1, |numeric|)`.
///
/// `f` must be deterministic: any sampling inside it has to reseed its RNG
/// on every call so the noise stays frozen across evaluations.
pub fn grad_check<F>(f: F, params: &[RealTensor], epsilon: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions { epsilon, ..Default::default() };
    Ok(grad_check_report(f, params, &opts)?.max_relative_error)
}

pub fn grad_check_report<F>(mut f: F, params: &[RealTensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic: Vec<RealTensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(&tape, v)).collect()
    };

    let mut eval = |ps: &[RealTensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.probe_seed);
    let mut work: Vec<RealTensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut probes = 0;
    for pi in 0..params.len() {
        let n = params[pi].len();
        let idx: Vec<usize> = match opts.max_probes_per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for i in idx {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + opts.epsilon;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - opts.epsilon;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let err = (analytic[pi].data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            probes += 1;
        }
        per_param.push(worst);
    }
    let max_relative_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { max_relative_error, per_param, probes })
}
