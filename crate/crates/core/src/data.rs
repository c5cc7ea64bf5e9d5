//! Image classification datasets: a seeded synthetic generator and IDX files.

use crate::diffcore::RealTensor;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Images `[N, C, H, W]` with values in `[0, 1]` and class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: RealTensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(images: RealTensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::shape("dataset", format!("images {:?} with {} labels", s, labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid("dataset", format!("label {bad} out of range for {n_classes} classes")));
        }
        Ok(Self { images, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn item_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Stacks the selected items into `[n, C, H, W]`.
    pub fn gather(&self, idx: &[usize]) -> (RealTensor, Vec<usize>) {
        let per: usize = self.item_shape().iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.item_shape());
        (RealTensor::from_parts(shape, data), idx.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Gaussian blobs around one-hot-patterned means: pixel `j` belongs to
/// pattern group `j mod n_classes`, and class `c` raises its group by `margin`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub side: usize,
    pub channels: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub margin: f64,
    pub noise_std: f64,
    pub background: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n_classes: 8, side: 8, channels: 1, n_train: 4096, n_test: 1024, margin: 0.4, noise_std: 0.3, background: 0.3 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.side == 0 || self.channels == 0 {
            return Err(Error::Config(format!("synthetic: bad dimensions {self:?}")));
        }
        if self.channels * self.side * self.side < self.n_classes {
            return Err(Error::Config("synthetic: fewer pixels than classes".into()));
        }
        if self.margin <= 0.0 || self.noise_std < 0.0 || !(0.0..=1.0).contains(&self.background) {
            return Err(Error::Config(format!(
                "synthetic: margin {} noise {} background {}",
                self.margin, self.noise_std, self.background
            )));
        }
        Ok(())
    }

    /// Class mean image, flattened.
    pub fn mean(&self, class: usize) -> Vec<f64> {
        let n = self.channels * self.side * self.side;
        (0..n)
            .map(|j| if j % self.n_classes == class { self.background + self.margin } else { self.background })
            .collect()
    }
}

/// Seeded synthetic train/test split with balanced, shuffled classes.
pub fn synthetic(spec: &SyntheticSpec, seed: u64) -> Result<DataSplit> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..spec.n_classes).map(|c| spec.mean(c)).collect();
    let mut make = |n: usize| -> Result<Dataset> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
        labels.shuffle(&mut rng);
        let per = spec.channels * spec.side * spec.side;
        let mut data = Vec::with_capacity(n * per);
        for &l in &labels {
            for &m in &means[l] {
                let v: f64 = m + spec.noise_std * rng.sample::<f64, _>(StandardNormal);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        let images = RealTensor::new(&[n, spec.channels, spec.side, spec.side], data)?;
        Dataset::new(images, labels, spec.n_classes)
    };
    let train = make(spec.n_train)?;
    let test = make(spec.n_test)?;
    Ok(DataSplit { train, test })
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX image file (`u8` pixels) into `[N, 1, rows, cols]` scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<RealTensor> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!("idx images: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES:08x}")));
    }
    let n = be_u32(bytes, 4, "idx images")? as usize;
    let rows = be_u32(bytes, 8, "idx images")? as usize;
    let cols = be_u32(bytes, 12, "idx images")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format(format!("idx images: truncated, {} of {} pixel bytes", body.len(), need)));
    }
    let data = body[..need].iter().map(|&b| b as f64 / 255.0).collect();
    RealTensor::new(&[n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!("idx labels: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS:08x}")));
    }
    let n = be_u32(bytes, 4, "idx labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format(format!("idx labels: truncated, {} of {} label bytes", body.len(), n)));
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Loads a matching IDX image/label pair. `n_classes` defaults to the
/// largest label plus one.
pub fn load_idx(images: &Path, labels: &Path, n_classes: Option<usize>) -> Result<Dataset> {
    let imgs = parse_idx_images(&std::fs::read(images)?)?;
    let labs = parse_idx_labels(&std::fs::read(labels)?)?;
    if imgs.shape()[0] != labs.len() {
        return Err(Error::Format(format!(
            "idx: {} images but {} labels ({} / {})",
            imgs.shape()[0],
            labs.len(),
            images.display(),
            labels.display()
        )));
    }
    let n_classes = n_classes.unwrap_or_else(|| labs.iter().max().map_or(1, |m| m + 1));
    Dataset::new(imgs, labs, n_classes)
}

/// Encodes `[N, 1, rows, cols]` images in `[0, 1]` and their labels as IDX bytes.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = ds.images.shape();
    if s[1] != 1 {
        return Err(Error::invalid("encode_idx", format!("single-channel images only, got {:?}", s)));
    }
    if let Some(&bad) = ds.labels.iter().find(|&&l| l > u8::MAX as usize) {
        return Err(Error::invalid("encode_idx", format!("label {bad} does not fit in a byte")));
    }
    let mut img = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGES, s[0] as u32, s[2] as u32, s[3] as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS, ds.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((img, lab))
}

/// Random item indices, drawn without replacement when the dataset is large enough.
pub fn sample_indices<R: Rng + ?Sized>(n_items: usize, count: usize, rng: &mut R) -> Vec<usize> {
    if count <= n_items {
        rand::seq::index::sample(rng, n_items, count).into_vec()
    } else {
        (0..count).map(|_| rng.gen_range(0..n_items)).collect()
    }
}
