//! Experiment harness: configuration, checkpoints, CSV metrics and commands.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod selftest;

pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, IdxPaths, TaskSource};
pub use metrics::{MetricsWriter, RunSummary};

use crate::data::DataSplit;
use crate::error::{Error, Result, ResultExt};
use crate::nets::{SemuxModel, TrainMode};
use crate::pipeline::{self, splitmix64, EpochMetrics, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Adapt,
    SweepScalability,
    SweepBeta,
    Selftest,
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Command::Train,
            "eval" => Command::Eval,
            "adapt" => Command::Adapt,
            "sweep-scalability" => Command::SweepScalability,
            "sweep-beta" => Command::SweepBeta,
            "selftest" => Command::Selftest,
            other => {
                return Err(Error::Config(format!(
                    "unknown command `{other}`; expected train, eval, adapt, sweep-scalability, sweep-beta or selftest"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    /// Load checkpoints whose config hash does not match.
    pub force: bool,
    /// Sweep worker threads; defaults to `SEMUX_THREADS` or the core count.
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

/// Fresh model for `cfg`; initialization depends only on the seed.
pub fn init_model(cfg: &ExperimentConfig, data: &DataSplit) -> Result<SemuxModel> {
    let arch = cfg.model_arch(data)?;
    SemuxModel::init(arch, &mut ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed)))
}

/// Trains from scratch, calling `on_epoch` after every epoch.
pub fn train_run(
    cfg: &ExperimentConfig,
    data: &DataSplit,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<(SemuxModel, Trainer, Vec<EpochMetrics>)> {
    let mut model = init_model(cfg, data)?;
    model.params.set_mode(TrainMode::Full);
    let mut trainer = Trainer::new(&model, &cfg.train)?;
    let mut log = Vec::with_capacity(cfg.train.epochs);
    for _ in 0..cfg.train.epochs {
        let m = trainer.run_epoch(&mut model, data, &cfg.channel, &cfg.ofdm, &cfg.train)?;
        on_epoch(&m)?;
        log.push(m);
    }
    Ok((model, trainer, log))
}

/// Final metrics of a run; an untrained model is evaluated directly.
pub fn summarize(cfg: &ExperimentConfig, data: &DataSplit, model: &SemuxModel, log: &[EpochMetrics]) -> Result<RunSummary> {
    let wallclock_s = log.iter().map(|m| m.wallclock_s).sum();
    Ok(match log.last() {
        Some(m) => RunSummary { acc: m.acc.clone(), kl: m.kl, nll: m.nll, wallclock_s },
        None => RunSummary {
            acc: pipeline::evaluate(model, &data.test, &cfg.channel, &cfg.ofdm, &cfg.train.eval)?,
            kl: f64::NAN,
            nll: f64::NAN,
            wallclock_s,
        },
    })
}

pub fn thread_count(opts: &RunOptions) -> usize {
    opts.threads
        .or_else(|| std::env::var("SEMUX_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

/// Runs `f` over `jobs` on up to `threads` workers; results keep job order.
pub fn parallel_map<J: Sync, T: Send>(jobs: &[J], threads: usize, f: impl Fn(&J) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(jobs.len()).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every job ran")).collect()
}

fn load_model(cfg: &ExperimentConfig, data: &DataSplit, opts: &RunOptions) -> Result<SemuxModel> {
    let path = cfg.out_dir.join(CHECKPOINT_FILE);
    let ck = Checkpoint::load(&path, &cfg.hash(), opts.force).context(|| "run `train` first".into())?;
    ck.into_model(cfg.model_arch(data)?)
}

fn train_cmd(cfg: &ExperimentConfig, data: &DataSplit) -> Result<Outcome> {
    let csv_path = cfg.out_dir.join("train.csv");
    let mut w = MetricsWriter::create(&csv_path, &metrics::train_header(cfg.arch.n_comp))?;
    let (model, trainer, log) = train_run(cfg, data, |m| w.row(&metrics::train_row(m)))?;
    let ck_path = cfg.out_dir.join(CHECKPOINT_FILE);
    Checkpoint::new(cfg.hash(), trainer.epoch as u64, trainer.rng.clone(), model.params.clone()).save(&ck_path)?;
    let s = summarize(cfg, data, &model, &log)?;
    Ok(Outcome { artifacts: vec![csv_path, ck_path], summary: format!("final test accuracy {:?}", s.acc) })
}

fn eval_cmd(cfg: &ExperimentConfig, data: &DataSplit, opts: &RunOptions) -> Result<Outcome> {
    let model = load_model(cfg, data, opts)?;
    let acc = pipeline::evaluate(&model, &data.test, &cfg.channel, &cfg.ofdm, &cfg.train.eval)?;
    let path = cfg.out_dir.join("eval.csv");
    let mut w = MetricsWriter::create(&path, &metrics::eval_header())?;
    for (i, a) in acc.iter().enumerate() {
        w.row(&[i.to_string(), a.to_string()])?;
    }
    Ok(Outcome { artifacts: vec![path], summary: format!("test accuracy {acc:?}") })
}

fn adapt_cmd(cfg: &ExperimentConfig, data: &DataSplit, opts: &RunOptions) -> Result<Outcome> {
    let model = load_model(cfg, data, opts)?;
    let rows = pipeline::run_dynamic_experiment(&model, data, &cfg.channel, &cfg.ofdm, &cfg.dynamic)?;
    let path = cfg.out_dir.join("adapt.csv");
    let mut w = MetricsWriter::create(&path, &metrics::adapt_header())?;
    for r in &rows {
        w.row(&metrics::adapt_row(r))?;
    }
    let mean = rows.iter().map(|r| r.acc_mean).sum::<f64>() / rows.len().max(1) as f64;
    let mode = if cfg.dynamic.adapt { "with" } else { "without" };
    Ok(Outcome { artifacts: vec![path], summary: format!("mean accuracy {mean:.4} {mode} adaptation over {} steps", rows.len()) })
}

fn seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.sweep_seeds as u64).map(|i| cfg.seed + i).collect()
}

fn sweep_scalability(cfg: &ExperimentConfig, data: &DataSplit, opts: &RunOptions) -> Result<Outcome> {
    let jobs: Vec<(usize, u64)> = cfg.sweep_n_comp.iter().flat_map(|&n| seeds(cfg).into_iter().map(move |s| (n, s))).collect();
    let results = parallel_map(&jobs, thread_count(opts), |&(n, seed)| {
        let mut c = cfg.clone();
        c.arch.n_comp = n;
        c.set_seed(seed);
        let (model, _, log) = train_run(&c, data, |_| Ok(()))?;
        summarize(&c, data, &model, &log)
    })?;
    let path = cfg.out_dir.join("scalability.csv");
    let mut w = MetricsWriter::create(&path, &metrics::scalability_header())?;
    for (&(n, seed), s) in jobs.iter().zip(&results) {
        w.row(&metrics::scalability_row(n, seed, s))?;
    }
    Ok(Outcome { artifacts: vec![path], summary: format!("{} runs", jobs.len()) })
}

fn sweep_beta(cfg: &ExperimentConfig, data: &DataSplit, opts: &RunOptions) -> Result<Outcome> {
    let jobs: Vec<(f64, u64)> = cfg.sweep_betas.iter().flat_map(|&b| seeds(cfg).into_iter().map(move |s| (b, s))).collect();
    let results = parallel_map(&jobs, thread_count(opts), |&(beta, seed)| {
        let mut c = cfg.clone();
        c.train.loss.beta = beta;
        c.set_seed(seed);
        let (model, _, log) = train_run(&c, data, |_| Ok(()))?;
        summarize(&c, data, &model, &log)
    })?;
    let path = cfg.out_dir.join("beta.csv");
    let mut w = MetricsWriter::create(&path, &metrics::beta_header())?;
    for (&(beta, seed), s) in jobs.iter().zip(&results) {
        w.row(&metrics::beta_row(beta, seed, s))?;
    }
    Ok(Outcome { artifacts: vec![path], summary: format!("{} runs", jobs.len()) })
}

fn selftest_cmd() -> Result<Outcome> {
    let results = selftest::run();
    let mut lines = Vec::new();
    for r in &results {
        lines.push(format!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let summary = lines.join("\n");
    if failed > 0 {
        return Err(Error::Config(format!("{failed} selftest check(s) failed\n{summary}")));
    }
    Ok(Outcome { artifacts: Vec::new(), summary })
}

/// Runs `command`; `cfg` may be `None` only for `selftest`.
pub fn run(command: Command, cfg: Option<&ExperimentConfig>, opts: &RunOptions) -> Result<Outcome> {
    if command == Command::Selftest {
        return selftest_cmd();
    }
    let mut cfg = cfg.ok_or_else(|| Error::Config("this command needs --config".into()))?.clone();
    if let Some(seed) = opts.seed {
        cfg.set_seed(seed);
    }
    if let Some(dir) = &opts.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(Error::from)
        .context(|| format!("cannot create {}", cfg.out_dir.display()))?;
    let data = cfg.load_dataset()?;
    log::info!("{} train / {} test items, {} classes", data.train.len(), data.test.len(), data.train.n_classes);
    match command {
        Command::Train => train_cmd(&cfg, &data),
        Command::Eval => eval_cmd(&cfg, &data, opts),
        Command::Adapt => adapt_cmd(&cfg, &data, opts),
        Command::SweepScalability => sweep_scalability(&cfg, &data, opts),
        Command::SweepBeta => sweep_beta(&cfg, &data, opts),
        Command::Selftest => unreachable!("handled above"),
    }
}
