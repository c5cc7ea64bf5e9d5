//! Binding, superposition and unbinding of computation channels.
//!
//! Each task's feature volume is bound to its own key by circular convolution
//! along the channel axis (independently at every spatial location), the bound
//! volumes are summed into one representation, and the receiver pulls each
//! task back out with a learned matrix.

use crate::diffcore::{RealTensor, Tape, Var};
use crate::error::{Error, Result};
use rand::Rng;

/// Axis of `[B, C, H, W]` feature volumes that binding convolves along.
pub const BIND_AXIS: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct BindingKeySet {
    pub dim: usize,
    pub keys: Vec<RealTensor>,
}

impl BindingKeySet {
    /// Gaussian keys with variance `1/dim` per entry, so `E‖k‖² = 1`.
    pub fn init<R: Rng + ?Sized>(n_channels: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("init_keys", format!("key dim must be >= 2, got {dim}")));
        }
        if n_channels == 0 {
            return Err(Error::invalid("init_keys", "need at least one computation channel"));
        }
        if dim < n_channels {
            log::warn!(
                "init_keys: {n_channels} keys in {dim} dimensions cannot be mutually near-orthogonal"
            );
        }
        let std = (1.0 / dim as f64).sqrt();
        let keys = (0..n_channels).map(|_| RealTensor::randn(&[dim], std, rng)).collect();
        Ok(Self { dim, keys })
    }

    pub fn n_channels(&self) -> usize {
        self.keys.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnbindSet {
    pub dim: usize,
    pub matrices: Vec<RealTensor>,
}

impl UnbindSet {
    /// Gaussian `dim×dim` matrices with variance `1/dim` per entry.
    pub fn init<R: Rng + ?Sized>(n_channels: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if n_channels == 0 || dim == 0 {
            return Err(Error::invalid("unbind_init", format!("n_channels={n_channels}, dim={dim}")));
        }
        let std = (1.0 / dim as f64).sqrt();
        let matrices = (0..n_channels).map(|_| RealTensor::randn(&[dim, dim], std, rng)).collect();
        Ok(Self { dim, matrices })
    }
}

/// Circularly convolves every channel fiber of `features[B, C, ...]` with `key[C]`.
pub fn bind(tape: &mut Tape, features: Var, key: Var) -> Result<Var> {
    let (fs, ks) = (tape.shape(features), tape.shape(key));
    if fs.len() < 2 || ks.len() != 1 || ks[0] != fs[BIND_AXIS] {
        return Err(Error::shape("bind", format!("features {:?}, key {:?}", fs, ks)));
    }
    tape.circular_conv(features, key, BIND_AXIS)
}

/// Elementwise sum of the bound volumes.
pub fn superpose(tape: &mut Tape, bound: &[Var]) -> Result<Var> {
    tape.add_n(bound).map_err(|e| match e {
        Error::Shape { detail, .. } => Error::shape("superpose", detail),
        Error::InvalidArgument { detail, .. } => Error::invalid("superpose", detail),
        other => other,
    })
}

/// Applies `matrix[D, D]` to every feature fiber along axis 1 of `features[B, D, ...]`.
pub fn unbind(tape: &mut Tape, features: Var, matrix: Var) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    let ms = tape.shape(matrix);
    if fs.len() < 2 || ms.len() != 2 || ms[0] != ms[1] || ms[0] != fs[1] {
        return Err(Error::shape("unbind", format!("features {:?}, matrix {:?}", fs, ms)));
    }
    let d = fs[1];
    let mt = tape.permute(matrix, &[1, 0])?;
    if fs.len() == 2 {
        return tape.matmul(features, mt);
    }
    // move the feature axis last, multiply, and move it back
    let rank = fs.len();
    let mut fwd: Vec<usize> = vec![0];
    fwd.extend(2..rank);
    fwd.push(1);
    let moved = tape.permute(features, &fwd)?;
    let moved_shape = tape.shape(moved).to_vec();
    let flat = tape.reshape(moved, &[moved_shape.iter().product::<usize>() / d, d])?;
    let prod = tape.matmul(flat, mt)?;
    let prod = tape.reshape(prod, &moved_shape)?;
    let mut back: Vec<usize> = vec![0, rank - 1];
    back.extend(1..rank - 1);
    tape.permute(prod, &back)
}

/// Matrix of `|cos|` similarities between keys; unit diagonal.
pub fn cross_talk(keys: &BindingKeySet) -> Result<Vec<Vec<f64>>> {
    let n = keys.n_channels();
    if n < 2 {
        return Err(Error::invalid("cross_talk", "need at least two keys"));
    }
    let norms: Vec<f64> = keys.keys.iter().map(RealTensor::norm).collect();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        m[i][i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = keys.keys[i].data().iter().zip(keys.keys[j].data()).map(|(a, b)| a * b).sum();
            let denom = norms[i] * norms[j];
            let c = if denom > 0.0 { (dot / denom).abs() } else { 0.0 };
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

/// Mean of the off-diagonal entries of [`cross_talk`].
pub fn mean_cross_talk(keys: &BindingKeySet) -> Result<f64> {
    let m = cross_talk(keys)?;
    let n = m.len();
    let total: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j]).sum();
    Ok(total / (n * (n - 1)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn volume(tape: &mut Tape, shape: &[usize], seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tape.constant(RealTensor::randn(shape, 1.0, &mut rng))
    }

    #[test]
    fn delta_key_is_identity() {
        let mut t = Tape::new();
        let x = volume(&mut t, &[2, 8, 3, 3], 0);
        let mut delta = RealTensor::zeros(&[8]);
        delta.data_mut()[0] = 1.0;
        let k = t.constant(delta);
        let y = bind(&mut t, x, k).unwrap();
        assert!(t.value(y).max_abs_diff(t.value(x)) < 1e-12);
    }

    #[test]
    fn bind_fiber_example() {
        let mut t = Tape::new();
        let x = t.constant(RealTensor::new(&[1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let k = t.constant(RealTensor::from_slice(&[0.0, 1.0, 0.0]));
        let y = bind(&mut t, x, k).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 1.0, 2.0]);
    }

    #[test]
    fn bind_rejects_key_length() {
        let mut t = Tape::new();
        let x = volume(&mut t, &[1, 8, 2, 2], 1);
        let k = t.constant(RealTensor::zeros(&[7]));
        assert!(matches!(bind(&mut t, x, k), Err(Error::Shape { op: "bind", .. })));
    }

    #[test]
    fn superpose_cancels() {
        let mut t = Tape::new();
        let x = volume(&mut t, &[1, 4, 2, 2], 2);
        let nx = t.scale(x, -1.0).unwrap();
        let s = superpose(&mut t, &[x, nx]).unwrap();
        assert!(t.value(s).data().iter().all(|&v| v == 0.0));
        let single = superpose(&mut t, &[x]).unwrap();
        assert_eq!(t.value(single), t.value(x));
    }

    #[test]
    fn unbind_identity_and_zero() {
        let mut t = Tape::new();
        let x = volume(&mut t, &[2, 5, 3], 3);
        let eye = t.constant(RealTensor::eye(5));
        let y = unbind(&mut t, x, eye).unwrap();
        assert!(t.value(y).max_abs_diff(t.value(x)) < 1e-15);
        let zero = t.constant(RealTensor::zeros(&[5, 5]));
        let z = unbind(&mut t, x, zero).unwrap();
        assert!(t.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unbind_matches_fiberwise_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = RealTensor::randn(&[3, 3], 1.0, &mut rng);
        let x = RealTensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let mut t = Tape::new();
        let (xv, mv) = (t.constant(x.clone()), t.constant(m.clone()));
        let y = unbind(&mut t, xv, mv).unwrap();
        let yd = t.value(y).data();
        for b in 0..2 {
            for s in 0..4 {
                for i in 0..3 {
                    let want: f64 = (0..3).map(|j| m.data()[i * 3 + j] * x.data()[b * 12 + j * 4 + s]).sum();
                    assert!((yd[b * 12 + i * 4 + s] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn keys_are_deterministic() {
        let a = BindingKeySet::init(4, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = BindingKeySet::init(4, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a, b);
        let one = BindingKeySet::init(1, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(one.n_channels(), 1);
        assert!(BindingKeySet::init(2, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn cross_talk_extremes() {
        let same = BindingKeySet { dim: 3, keys: vec![RealTensor::from_slice(&[1.0, 2.0, 3.0]); 3] };
        let m = cross_talk(&same).unwrap();
        assert!(m.iter().flatten().all(|&v| (v - 1.0).abs() < 1e-12));
        let basis = BindingKeySet {
            dim: 3,
            keys: (0..3).map(|i| {
                let mut k = RealTensor::zeros(&[3]);
                k.data_mut()[i] = 1.0;
                k
            }).collect(),
        };
        assert_eq!(mean_cross_talk(&basis).unwrap(), 0.0);
        assert!(cross_talk(&BindingKeySet { dim: 3, keys: vec![basis.keys[0].clone()] }).is_err());
    }
}
