//! Value-level numeric kernels shared by the forward and backward rules.

use crate::error::{Error, Result};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::sync::Arc;

/// `c (+)= op(a) · op(b)` where `a` is `m×k` and `b` is `k×n` after the
/// optional transposes. Storage is row-major for the untransposed operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements (checked above)
    // and the strides describe in-bounds row/column-major views of them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

pub(crate) fn check_pow2(op: &'static str, len: usize) -> Result<()> {
    if len == 0 || !len.is_power_of_two() {
        return Err(Error::NotPowerOfTwo { op, len });
    }
    Ok(())
}

/// Unitary DFT (scale `1/√n`) of `(re, im)` along `axis` of `shape`.
pub(crate) fn fft_axis(
    re: &[f64],
    im: &[f64],
    shape: &[usize],
    axis: usize,
    inverse: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (outer, n, inner) = super::tensor::axis_extents(shape, axis);
    let mut out_re = vec![0.0; re.len()];
    let mut out_im = vec![0.0; im.len()];
    if n == 0 {
        return (out_re, out_im);
    }
    let fft = plan(n, inverse);
    let scale = 1.0 / (n as f64).sqrt();
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                let idx = base + j * inner;
                *b = Complex64::new(re[idx], im[idx]);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (j, b) in buf.iter().enumerate() {
                let idx = base + j * inner;
                out_re[idx] = b.re * scale;
                out_im[idx] = b.im * scale;
            }
        }
    }
    (out_re, out_im)
}

/// Copies the fibers of `data` along `axis` into a contiguous `[fibers, n]` buffer.
pub(crate) fn gather_fibers(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = super::tensor::axis_extents(shape, axis);
    if inner == 1 {
        return data.to_vec();
    }
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let fiber = o * inner + i;
            for j in 0..n {
                out[fiber * n + j] = data[o * n * inner + j * inner + i];
            }
        }
    }
    out
}

/// Inverse of [`gather_fibers`].
pub(crate) fn scatter_fibers(fibers: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = super::tensor::axis_extents(shape, axis);
    if inner == 1 {
        return fibers.to_vec();
    }
    let mut out = vec![0.0; fibers.len()];
    for o in 0..outer {
        for i in 0..inner {
            let fiber = o * inner + i;
            for j in 0..n {
                out[o * n * inner + j * inner + i] = fibers[fiber * n + j];
            }
        }
    }
    out
}

/// Fiber length from which circular convolution switches to the FFT route.
pub const FFT_CONV_THRESHOLD: usize = 32;

/// `(a ⊛ k)_j = Σ_i a_i k_{(j−i) mod n}` for every contiguous fiber of `a`,
/// all sharing one kernel, by the direct O(n²) sum.
pub(crate) fn circ_conv_direct(fibers: &[f64], key: &[f64]) -> Vec<f64> {
    let n = key.len();
    let mut out = vec![0.0; fibers.len()];
    for (src, dst) in fibers.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        for (i, &a) in src.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            // k_{(j-i) mod n} for j = 0..n is key rotated right by i
            let (head, tail) = key.split_at(n - i);
            for (d, &kv) in dst[..i].iter_mut().zip(tail) {
                *d += a * kv;
            }
            for (d, &kv) in dst[i..].iter_mut().zip(head) {
                *d += a * kv;
            }
        }
    }
    out
}

/// Same as [`circ_conv_direct`] via the convolution theorem.
pub(crate) fn circ_conv_fft(fibers: &[f64], key: &[f64]) -> Vec<f64> {
    let n = key.len();
    let fwd = plan(n, false);
    let inv = plan(n, true);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len())];
    let mut kspec: Vec<Complex64> = key.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process_with_scratch(&mut kspec, &mut scratch);
    let mut out = vec![0.0; fibers.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let norm = 1.0 / n as f64;
    for (src, dst) in fibers.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        for (b, &v) in buf.iter_mut().zip(src) {
            *b = Complex64::new(v, 0.0);
        }
        fwd.process_with_scratch(&mut buf, &mut scratch);
        for (b, kv) in buf.iter_mut().zip(&kspec) {
            *b *= kv;
        }
        inv.process_with_scratch(&mut buf, &mut scratch);
        for (d, b) in dst.iter_mut().zip(&buf) {
            *d = b.re * norm;
        }
    }
    out
}

pub(crate) fn circ_conv(fibers: &[f64], key: &[f64]) -> Vec<f64> {
    if key.len() >= FFT_CONV_THRESHOLD && key.len().is_power_of_two() {
        circ_conv_fft(fibers, key)
    } else {
        circ_conv_direct(fibers, key)
    }
}

/// Index reversal `r_m = v_{(−m) mod n}`; turns convolution into correlation.
pub(crate) fn reverse_circular(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|m| v[(n - m) % n]).collect()
}

/// `Σ_f (g_f ⊛ rev(x_f))`: the key gradient of a shared-kernel circular
/// convolution, accumulated over all fibers.
pub(crate) fn circ_corr_sum(grad: &[f64], fibers: &[f64], n: usize) -> Vec<f64> {
    let mut acc = vec![0.0; n];
    if n >= FFT_CONV_THRESHOLD && n.is_power_of_two() {
        let fwd = plan(n, false);
        let inv = plan(n, true);
        let mut scratch = vec![Complex64::new(0.0, 0.0); fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len())];
        let mut spec = vec![Complex64::new(0.0, 0.0); n];
        let mut gb = vec![Complex64::new(0.0, 0.0); n];
        let mut xb = vec![Complex64::new(0.0, 0.0); n];
        for (g, x) in grad.chunks_exact(n).zip(fibers.chunks_exact(n)) {
            for j in 0..n {
                gb[j] = Complex64::new(g[j], 0.0);
                xb[j] = Complex64::new(x[j], 0.0);
            }
            fwd.process_with_scratch(&mut gb, &mut scratch);
            fwd.process_with_scratch(&mut xb, &mut scratch);
            for j in 0..n {
                spec[j] += gb[j] * xb[j].conj();
            }
        }
        inv.process_with_scratch(&mut spec, &mut scratch);
        for (a, s) in acc.iter_mut().zip(&spec) {
            *a = s.re / n as f64;
        }
    } else {
        for (g, x) in grad.chunks_exact(n).zip(fibers.chunks_exact(n)) {
            for (m, a) in acc.iter_mut().enumerate() {
                let mut s = 0.0;
                for j in 0..n {
                    s += g[j] * x[(j + n - m) % n];
                }
                *a += s;
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv_routes_agree() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &n in &[32usize, 64, 128] {
            let key: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d = circ_conv_direct(&x, &key);
            let f = circ_conv_fft(&x, &key);
            let err = d.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "n={n} err={err}");
        }
    }

    #[test]
    fn corr_sum_routes_agree() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 32;
        let g: Vec<f64> = (0..5 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..5 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = circ_corr_sum(&g, &x, n);
        let mut slow = vec![0.0; n];
        for (gf, xf) in g.chunks(n).zip(x.chunks(n)) {
            let c = circ_conv_direct(gf, &reverse_circular(xf));
            for (s, v) in slow.iter_mut().zip(c) {
                *s += v;
            }
        }
        let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);
    }

    #[test]
    fn fibers_round_trip() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let f = gather_fibers(&data, &shape, 1);
        assert_eq!(&f[..3], &[0.0, 4.0, 8.0]);
        assert_eq!(scatter_fibers(&f, &shape, 1), data);
    }
}
