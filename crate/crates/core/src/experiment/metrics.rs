//! CSV metric logs: a fixed header per command, one flushed row at a time.

use crate::error::{Result, ResultExt};
use crate::pipeline::{DynamicRow, EpochMetrics};
use std::fs::File;
use std::path::Path;

pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    /// Creates (truncating) `path` and writes the header.
    pub fn create(path: &Path, header: &[String]) -> Result<Self> {
        let file = File::create(path).map_err(crate::Error::from).context(|| format!("cannot write {}", path.display()))?;
        let mut inner = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
        inner.write_record(header)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        self.inner.write_record(fields)?;
        self.inner.flush()?;
        Ok(())
    }
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

pub fn train_header(n_comp: usize) -> Vec<String> {
    let mut h = strings(&["epoch", "loss", "kl_term", "nll_term"]);
    h.extend((0..n_comp).map(|i| format!("acc_task_{i}")));
    h.push("wallclock_s".into());
    h
}

pub fn train_row(m: &EpochMetrics) -> Vec<String> {
    let mut r = vec![m.epoch.to_string(), m.loss.to_string(), m.kl.to_string(), m.nll.to_string()];
    r.extend(m.acc.iter().map(|a| a.to_string()));
    r.push(format!("{:.3}", m.wallclock_s));
    r
}

pub fn adapt_header() -> Vec<String> {
    strings(&["step", "channel_epoch", "acc_mean", "pilot_loss"])
}

pub fn adapt_row(r: &DynamicRow) -> Vec<String> {
    vec![
        r.step.to_string(),
        r.channel_epoch.to_string(),
        r.acc_mean.to_string(),
        r.pilot_loss.map_or(String::new(), |l| l.to_string()),
    ]
}

pub fn eval_header() -> Vec<String> {
    strings(&["task", "accuracy"])
}

pub fn scalability_header() -> Vec<String> {
    strings(&["n_comp", "seed", "acc_mean", "acc_min", "kl_term", "nll_term", "wallclock_s"])
}

pub fn beta_header() -> Vec<String> {
    strings(&["beta", "seed", "kl_term", "nll_term", "acc_mean", "wallclock_s"])
}

/// Summary of one training run used by the sweeps.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub acc: Vec<f64>,
    pub kl: f64,
    pub nll: f64,
    pub wallclock_s: f64,
}

impl RunSummary {
    pub fn acc_mean(&self) -> f64 {
        self.acc.iter().sum::<f64>() / self.acc.len().max(1) as f64
    }

    pub fn acc_min(&self) -> f64 {
        self.acc.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn scalability_row(n_comp: usize, seed: u64, s: &RunSummary) -> Vec<String> {
    vec![
        n_comp.to_string(),
        seed.to_string(),
        s.acc_mean().to_string(),
        s.acc_min().to_string(),
        s.kl.to_string(),
        s.nll.to_string(),
        format!("{:.3}", s.wallclock_s),
    ]
}

pub fn beta_row(beta: f64, seed: u64, s: &RunSummary) -> Vec<String> {
    vec![
        beta.to_string(),
        seed.to_string(),
        s.kl.to_string(),
        s.nll.to_string(),
        s.acc_mean().to_string(),
        format!("{:.3}", s.wallclock_s),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_and_task_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.csv");
        MetricsWriter::create(&p, &train_header(4)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "epoch,loss,kl_term,nll_term,acc_task_0,acc_task_1,acc_task_2,acc_task_3,wallclock_s\n");

        let q = dir.path().join("adapt.csv");
        let mut w = MetricsWriter::create(&q, &adapt_header()).unwrap();
        w.row(&adapt_row(&DynamicRow { step: 0, channel_epoch: 1, acc_mean: 0.5, pilot_loss: None })).unwrap();
        assert_eq!(std::fs::read_to_string(&q).unwrap(), "step,channel_epoch,acc_mean,pilot_loss\n0,1,0.5,\n");
    }

    #[test]
    fn unwritable_path_errors() {
        assert!(MetricsWriter::create(Path::new("/nonexistent-dir/x.csv"), &adapt_header()).is_err());
    }
}
