//! Flat `key = value` experiment configuration.

use crate::channel::{exponential_pdp, ChannelModel, Fading, LosGeometry};
use crate::data::{self, DataSplit, SyntheticSpec};
use crate::error::{Error, Result};
use crate::modem::OfdmConfig;
use crate::nets::ArchConfig;
use crate::pipeline::{ChannelPath, CsiSource, DynamicConfig, OptimizerConfig, OptimizerKind, TrainConfig};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Largest label plus one when unset.
    pub n_classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskSource {
    Synthetic(SyntheticSpec),
    Idx(IdxPaths),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskSource,
    /// Seed of the synthetic generator; the data stays fixed across run seeds.
    pub data_seed: u64,
    /// Model layout. `n_classes`, `in_channels` and `image_size` come from the data.
    pub arch: ArchConfig,
    pub ofdm: OfdmConfig,
    pub channel: ChannelModel,
    pub train: TrainConfig,
    pub dynamic: DynamicConfig,
    pub sweep_n_comp: Vec<usize>,
    pub sweep_betas: Vec<f64>,
    pub sweep_seeds: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let ofdm = OfdmConfig::default();
        let arch = ArchConfig { k_used: ofdm.used_subcarriers, ..ArchConfig::default() };
        let channel = ChannelModel::new(arch.n_tx, arch.n_rx, 8, Fading::Rayleigh, 20.0)
            .expect("default channel is valid");
        Self {
            task: TaskSource::Synthetic(SyntheticSpec::default()),
            data_seed: 0,
            arch,
            ofdm,
            channel,
            train: TrainConfig::default(),
            dynamic: DynamicConfig::default(),
            sweep_n_comp: vec![2, 4, 6, 8],
            sweep_betas: vec![1e-4, 1e-2, 1e-1],
            sweep_seeds: 5,
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

struct Fields {
    map: BTreeMap<String, String>,
}

impl Fields {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let k = k.trim().to_string();
            if map.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(Self { map })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| Error::Config(format!("{key} = {v}: {e}"))),
        }
    }

    fn list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|e| Error::Config(format!("{key} = {v}: {e}"))))
                .collect(),
        }
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn optimizer(f: &mut Fields, prefix: &str, base: &OptimizerConfig) -> Result<OptimizerConfig> {
    let name = f.get(&format!("{prefix}optimizer"), base.kind.name().to_string())?;
    let kind = OptimizerKind::from_name(&name).ok_or_else(|| Error::Config(format!("unknown optimizer `{name}`")))?;
    let clip = f.get(&format!("{prefix}clip_norm"), base.clip_norm.map_or("none".to_string(), |c| c.to_string()))?;
    let clip_norm = match clip.as_str() {
        "none" => None,
        v => Some(v.parse::<f64>().map_err(|e| Error::Config(format!("{prefix}clip_norm = {v}: {e}")))?),
    };
    Ok(OptimizerConfig { kind, lr: f.get(&format!("{prefix}lr"), base.lr)?, clip_norm, ..base.clone() })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let d = Self::default();
        let mut f = Fields::parse(text)?;

        let task = match f.get("task", "synthetic".to_string())?.as_str() {
            "synthetic" => {
                let s = SyntheticSpec::default();
                TaskSource::Synthetic(SyntheticSpec {
                    n_classes: f.get("synthetic_classes", s.n_classes)?,
                    side: f.get("synthetic_side", s.side)?,
                    channels: f.get("synthetic_channels", s.channels)?,
                    n_train: f.get("synthetic_train", s.n_train)?,
                    n_test: f.get("synthetic_test", s.n_test)?,
                    margin: f.get("synthetic_margin", s.margin)?,
                    noise_std: f.get("synthetic_noise", s.noise_std)?,
                    background: f.get("synthetic_background", s.background)?,
                })
            }
            "idx_images" => {
                let mut path = |k: &str| {
                    f.raw(k).map(PathBuf::from).ok_or_else(|| Error::Config(format!("task idx_images needs `{k}`")))
                };
                let paths = IdxPaths {
                    train_images: path("train_images")?,
                    train_labels: path("train_labels")?,
                    test_images: path("test_images")?,
                    test_labels: path("test_labels")?,
                    n_classes: None,
                };
                let n: usize = f.get("idx_classes", 0)?;
                TaskSource::Idx(IdxPaths { n_classes: (n > 0).then_some(n), ..paths })
            }
            other => return Err(Error::Config(format!("unknown task `{other}`; expected synthetic or idx_images"))),
        };

        let ofdm = OfdmConfig { fft_size: f.get("fft_size", d.ofdm.fft_size)?, used_subcarriers: f.get("used_subcarriers", d.ofdm.used_subcarriers)? };
        let a = &d.arch;
        let arch = ArchConfig {
            n_comp: f.get("n_comp", a.n_comp)?,
            n_tx: f.get("n_tx", a.n_tx)?,
            n_rx: f.get("n_rx", a.n_rx)?,
            packets: f.get("packets", a.packets)?,
            key_dim: f.get("key_dim", a.key_dim)?,
            ft_pool: f.get("ft_pool", a.ft_pool)?,
            csi_hidden: f.get("csi_hidden", a.csi_hidden)?,
            rx_hidden: f.get("rx_hidden", a.rx_hidden)?,
            feature_dim: f.get("feature_dim", a.feature_dim)?,
            input_center: f.get("input_center", a.input_center)?,
            mmse_branch: f.get("mmse_branch", a.mmse_branch)?,
            k_used: ofdm.used_subcarriers,
            ..a.clone()
        };

        let n_taps: usize = f.get("n_taps", d.channel.n_taps())?;
        let fading = match f.get("fading", "rayleigh".to_string())?.as_str() {
            "rayleigh" => {
                f.raw("k_factor_db");
                Fading::Rayleigh
            }
            "rician" => Fading::Rician { k_factor_db: f.get("k_factor_db", 10.0)? },
            other => return Err(Error::Config(format!("unknown fading `{other}`; expected rayleigh or rician"))),
        };
        if n_taps == 0 {
            return Err(Error::Config("n_taps must be at least 1".into()));
        }
        let channel = ChannelModel {
            n_tx: arch.n_tx,
            n_rx: arch.n_rx,
            fading,
            power_delay_profile: exponential_pdp(n_taps),
            snr_db: f.get("snr_db", d.channel.snr_db)?,
            los: LosGeometry { departure: f.get("los_departure", 0.0)?, arrival: f.get("los_arrival", 0.0)? },
        };

        let t = &d.train;
        let mut train = t.clone();
        train.optimizer = optimizer(&mut f, "", &t.optimizer)?;
        train.epochs = f.get("epochs", t.epochs)?;
        train.batch_size = f.get("batch_size", t.batch_size)?;
        train.steps_per_epoch = f.get("steps_per_epoch", t.steps_per_epoch)?;
        train.loss.beta = f.get("beta", t.loss.beta)?;
        train.loss.n_mc = f.get("n_mc", t.loss.n_mc)?;
        train.loss.peak_normalize = f.get("peak_normalize", t.loss.peak_normalize)?;
        train.eval.items = f.get("eval_items", t.eval.items)?;
        train.eval.realizations = f.get("eval_realizations", t.eval.realizations)?;
        train.eval.chunk = f.get("eval_chunk", t.eval.chunk)?;
        train.eval.seed = f.get("eval_seed", t.eval.seed)?;
        train.eval.csi = match f.get("eval_csi", "genie".to_string())?.as_str() {
            "genie" => CsiSource::Genie,
            "estimated" => CsiSource::Estimated,
            other => return Err(Error::Config(format!("unknown eval_csi `{other}`; expected genie or estimated"))),
        };
        train.eval.path = match f.get("eval_path", "frequency".to_string())?.as_str() {
            "frequency" => ChannelPath::Frequency,
            "waveform" => ChannelPath::Waveform,
            other => return Err(Error::Config(format!("unknown eval_path `{other}`; expected frequency or waveform"))),
        };
        train.adapt.optimizer = optimizer(&mut f, "adapt_", &t.adapt.optimizer)?;
        train.adapt.pilot_period = f.get("pilot_period", t.adapt.pilot_period)?;
        train.adapt.pilots_per_channel = f.get("pilots_per_channel", t.adapt.pilots_per_channel)?;
        train.adapt.pilots_per_step = f.get("pilots_per_step", t.adapt.pilots_per_step)?;
        train.adapt.shared_seed = f.get("shared_seed", t.adapt.shared_seed)?;

        let dd = &d.dynamic;
        let dynamic = DynamicConfig {
            steps: f.get("dynamic_steps", dd.steps)?,
            period: f.get("dynamic_period", dd.period)?,
            adapt: f.get("adapt_enabled", dd.adapt)?,
            adapt_cfg: train.adapt.clone(),
            items_per_step: f.get("dynamic_items", dd.items_per_step)?,
            relocate: f.get("relocate", dd.relocate)?,
            seed: dd.seed,
        };

        let mut cfg = Self {
            task,
            data_seed: f.get("data_seed", d.data_seed)?,
            arch,
            ofdm,
            channel,
            train,
            dynamic,
            sweep_n_comp: f.list("sweep_n_comp", d.sweep_n_comp.clone())?,
            sweep_betas: f.list("sweep_betas", d.sweep_betas.clone())?,
            sweep_seeds: f.get("sweep_seeds", d.sweep_seeds)?,
            out_dir: f.get("out_dir", d.out_dir.clone())?,
            seed: 0,
        };
        let seed = f.get("seed", d.seed)?;
        f.finish()?;
        cfg.set_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path`; relative dataset paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let TaskSource::Idx(p) = &mut cfg.task {
            for f in [&mut p.train_images, &mut p.train_labels, &mut p.test_images, &mut p.test_labels] {
                if f.is_relative() {
                    *f = base.join(&*f);
                }
                if !f.is_file() {
                    return Err(Error::Config(format!("dataset file {} does not exist", f.display())));
                }
            }
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.dynamic.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if let TaskSource::Synthetic(s) = &self.task {
            s.validate()?;
        }
        self.ofdm.validate()?;
        self.channel.validate()?;
        self.train.validate()?;
        if self.arch.n_comp == 0 || self.arch.n_tx == 0 || self.arch.n_rx == 0 {
            return Err(Error::Config("n_comp, n_tx and n_rx must be positive".into()));
        }
        if self.dynamic.steps == 0 || self.dynamic.period == 0 || self.dynamic.items_per_step == 0 {
            return Err(Error::Config("dynamic_steps, dynamic_period and dynamic_items must be positive".into()));
        }
        if self.sweep_n_comp.contains(&0) || self.sweep_seeds == 0 {
            return Err(Error::Config("sweeps need positive n_comp values and at least one seed".into()));
        }
        if let Some(b) = self.sweep_betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::Config(format!("sweep beta {b} outside [0, 1]")));
        }
        Ok(())
    }

    /// Canonical `(key, value, hashed)` listing. Hashed keys are the ones that
    /// determine a trained model.
    pub fn to_pairs(&self) -> Vec<(&'static str, String, bool)> {
        let mut out: Vec<(&'static str, String, bool)> = Vec::new();
        let mut put = |k: &'static str, v: String, h: bool| out.push((k, v, h));
        match &self.task {
            TaskSource::Synthetic(s) => {
                put("task", "synthetic".into(), true);
                put("synthetic_classes", s.n_classes.to_string(), true);
                put("synthetic_side", s.side.to_string(), true);
                put("synthetic_channels", s.channels.to_string(), true);
                put("synthetic_train", s.n_train.to_string(), true);
                put("synthetic_test", s.n_test.to_string(), true);
                put("synthetic_margin", s.margin.to_string(), true);
                put("synthetic_noise", s.noise_std.to_string(), true);
                put("synthetic_background", s.background.to_string(), true);
            }
            TaskSource::Idx(p) => {
                put("task", "idx_images".into(), true);
                put("train_images", p.train_images.display().to_string(), true);
                put("train_labels", p.train_labels.display().to_string(), true);
                put("test_images", p.test_images.display().to_string(), true);
                put("test_labels", p.test_labels.display().to_string(), true);
                put("idx_classes", p.n_classes.unwrap_or(0).to_string(), true);
            }
        }
        let a = &self.arch;
        put("data_seed", self.data_seed.to_string(), true);
        put("n_comp", a.n_comp.to_string(), true);
        put("n_tx", a.n_tx.to_string(), true);
        put("n_rx", a.n_rx.to_string(), true);
        put("packets", a.packets.to_string(), true);
        put("key_dim", a.key_dim.to_string(), true);
        put("ft_pool", a.ft_pool.to_string(), true);
        put("csi_hidden", a.csi_hidden.to_string(), true);
        put("rx_hidden", a.rx_hidden.to_string(), true);
        put("feature_dim", a.feature_dim.to_string(), true);
        put("input_center", a.input_center.to_string(), true);
        put("mmse_branch", a.mmse_branch.to_string(), true);
        put("fft_size", self.ofdm.fft_size.to_string(), true);
        put("used_subcarriers", self.ofdm.used_subcarriers.to_string(), true);
        let c = &self.channel;
        put("n_taps", c.n_taps().to_string(), true);
        match c.fading {
            Fading::Rayleigh => put("fading", "rayleigh".into(), true),
            Fading::Rician { k_factor_db } => {
                put("fading", "rician".into(), true);
                put("k_factor_db", k_factor_db.to_string(), true);
            }
        }
        put("snr_db", c.snr_db.to_string(), true);
        put("los_departure", c.los.departure.to_string(), true);
        put("los_arrival", c.los.arrival.to_string(), true);
        let t = &self.train;
        let clip = |o: &OptimizerConfig| o.clip_norm.map_or("none".to_string(), |c| c.to_string());
        put("optimizer", t.optimizer.kind.name().into(), true);
        put("lr", t.optimizer.lr.to_string(), true);
        put("clip_norm", clip(&t.optimizer), true);
        put("epochs", t.epochs.to_string(), true);
        put("batch_size", t.batch_size.to_string(), true);
        put("steps_per_epoch", t.steps_per_epoch.to_string(), true);
        put("beta", t.loss.beta.to_string(), true);
        put("n_mc", t.loss.n_mc.to_string(), true);
        put("peak_normalize", t.loss.peak_normalize.to_string(), true);
        put("seed", self.seed.to_string(), true);
        put("eval_items", t.eval.items.to_string(), false);
        put("eval_realizations", t.eval.realizations.to_string(), false);
        put("eval_chunk", t.eval.chunk.to_string(), false);
        put("eval_seed", t.eval.seed.to_string(), false);
        let csi = match t.eval.csi {
            CsiSource::Genie => "genie",
            CsiSource::Estimated => "estimated",
        };
        put("eval_csi", csi.into(), false);
        let path = match t.eval.path {
            ChannelPath::Frequency => "frequency",
            ChannelPath::Waveform => "waveform",
        };
        put("eval_path", path.into(), false);
        let ad = &t.adapt;
        put("adapt_optimizer", ad.optimizer.kind.name().into(), false);
        put("adapt_lr", ad.optimizer.lr.to_string(), false);
        put("adapt_clip_norm", clip(&ad.optimizer), false);
        put("pilot_period", ad.pilot_period.to_string(), false);
        put("pilots_per_channel", ad.pilots_per_channel.to_string(), false);
        put("pilots_per_step", ad.pilots_per_step.to_string(), false);
        put("shared_seed", ad.shared_seed.to_string(), false);
        let dy = &self.dynamic;
        put("dynamic_steps", dy.steps.to_string(), false);
        put("dynamic_period", dy.period.to_string(), false);
        put("dynamic_items", dy.items_per_step.to_string(), false);
        put("adapt_enabled", dy.adapt.to_string(), false);
        put("relocate", dy.relocate.to_string(), false);
        put("sweep_n_comp", join(&self.sweep_n_comp), false);
        put("sweep_betas", join(&self.sweep_betas), false);
        put("sweep_seeds", self.sweep_seeds.to_string(), false);
        put("out_dir", self.out_dir.display().to_string(), false);
        out
    }

    /// Text that parses back to this configuration.
    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v, _)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 over the keys that determine a trained model.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v, hashed) in self.to_pairs() {
            if hashed {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn load_dataset(&self) -> Result<DataSplit> {
        match &self.task {
            TaskSource::Synthetic(s) => data::synthetic(s, self.data_seed),
            TaskSource::Idx(p) => {
                let train = data::load_idx(&p.train_images, &p.train_labels, p.n_classes)?;
                let test = data::load_idx(&p.test_images, &p.test_labels, p.n_classes)?;
                let n = p.n_classes.unwrap_or(train.n_classes.max(test.n_classes));
                let train = data::Dataset::new(train.images, train.labels, n)?;
                let test = data::Dataset::new(test.images, test.labels, n)?;
                if train.item_shape() != test.item_shape() {
                    return Err(Error::Format(format!(
                        "train items {:?} and test items {:?} differ",
                        train.item_shape(),
                        test.item_shape()
                    )));
                }
                Ok(DataSplit { train, test })
            }
        }
    }

    /// Architecture with the data-dependent fields filled in.
    pub fn model_arch(&self, data: &DataSplit) -> Result<ArchConfig> {
        let s = data.train.item_shape();
        if s[1] != s[2] {
            return Err(Error::Config(format!("square images required, got {}x{}", s[1], s[2])));
        }
        let arch = ArchConfig { in_channels: s[0], image_size: s[1], n_classes: data.train.n_classes, ..self.arch.clone() };
        arch.validate()?;
        Ok(arch)
    }
}
