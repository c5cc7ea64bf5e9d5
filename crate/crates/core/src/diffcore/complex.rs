//! Complex tensors on the tape as (re, im) pairs of real nodes.
//!
//! All losses are real, so treating the two planes as independent real
//! variables gives the same gradients as Wirtinger calculus.

use super::kernels;
use super::tape::{Tape, Var};
use super::tensor::{ComplexTensor, RealTensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

impl Tape {
    pub fn complex_constant(&mut self, value: ComplexTensor) -> CVar {
        CVar { re: self.constant(value.re), im: self.constant(value.im) }
    }

    pub fn complex_param(&mut self, value: ComplexTensor) -> CVar {
        CVar { re: self.param(value.re), im: self.param(value.im) }
    }

    pub fn complex_value(&self, z: CVar) -> ComplexTensor {
        ComplexTensor { re: self.value(z.re).clone(), im: self.value(z.im).clone() }
    }

    pub fn cadd(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        Ok(CVar { re: self.add(a.re, b.re)?, im: self.add(a.im, b.im)? })
    }

    /// Elementwise complex product.
    pub fn cmul(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        let rr = self.mul(a.re, b.re)?;
        let ii = self.mul(a.im, b.im)?;
        let ri = self.mul(a.re, b.im)?;
        let ir = self.mul(a.im, b.re)?;
        Ok(CVar { re: self.sub(rr, ii)?, im: self.add(ri, ir)? })
    }

    /// Batched complex matrix product `[G, m, k] · [G, k, n]`.
    pub fn cbmm(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        let rr = self.bmm(a.re, b.re)?;
        let ii = self.bmm(a.im, b.im)?;
        let ri = self.bmm(a.re, b.im)?;
        let ir = self.bmm(a.im, b.re)?;
        Ok(CVar { re: self.sub(rr, ii)?, im: self.add(ri, ir)? })
    }

    pub fn cpermute(&mut self, z: CVar, axes: &[usize]) -> Result<CVar> {
        Ok(CVar { re: self.permute(z.re, axes)?, im: self.permute(z.im, axes)? })
    }

    pub fn creshape(&mut self, z: CVar, shape: &[usize]) -> Result<CVar> {
        Ok(CVar { re: self.reshape(z.re, shape)?, im: self.reshape(z.im, shape)? })
    }

    pub fn cnarrow(&mut self, z: CVar, axis: usize, start: usize, len: usize) -> Result<CVar> {
        Ok(CVar { re: self.narrow(z.re, axis, start, len)?, im: self.narrow(z.im, axis, start, len)? })
    }

    pub fn cconcat(&mut self, zs: &[CVar], axis: usize) -> Result<CVar> {
        let re: Vec<Var> = zs.iter().map(|z| z.re).collect();
        let im: Vec<Var> = zs.iter().map(|z| z.im).collect();
        Ok(CVar { re: self.concat(&re, axis)?, im: self.concat(&im, axis)? })
    }

    pub fn cscale(&mut self, z: CVar, factor: f64) -> Result<CVar> {
        Ok(CVar { re: self.scale(z.re, factor)?, im: self.scale(z.im, factor)? })
    }

    /// `|z|²` elementwise.
    pub fn abs2(&mut self, z: CVar) -> Result<Var> {
        let r = self.square(z.re)?;
        let i = self.square(z.im)?;
        self.add(r, i)
    }

    /// Splits `t[.., 2n]` along its last axis: first half real, second half imaginary.
    pub fn complexify(&mut self, t: Var) -> Result<CVar> {
        let shape = self.shape(t).to_vec();
        let Some(&last) = shape.last() else {
            return Err(Error::shape("complexify", "scalar input"));
        };
        if last % 2 != 0 {
            return Err(Error::shape("complexify", format!("odd last axis in {:?}", shape)));
        }
        let axis = shape.len() - 1;
        Ok(CVar { re: self.narrow(t, axis, 0, last / 2)?, im: self.narrow(t, axis, last / 2, last / 2)? })
    }

    /// Inverse of [`Tape::complexify`]: concatenates (re, im) along the last axis.
    pub fn realify(&mut self, z: CVar) -> Result<Var> {
        let axis = self.shape(z.re).len().saturating_sub(1);
        self.concat(&[z.re, z.im], axis)
    }

    /// Unitary FFT along `axis`; the axis length must be a power of two.
    pub fn fft(&mut self, z: CVar, axis: usize) -> Result<CVar> {
        self.fft_impl(z, axis, false)
    }

    /// Unitary inverse FFT along `axis`.
    pub fn ifft(&mut self, z: CVar, axis: usize) -> Result<CVar> {
        self.fft_impl(z, axis, true)
    }

    fn fft_impl(&mut self, z: CVar, axis: usize, inverse: bool) -> Result<CVar> {
        let op = if inverse { "ifft" } else { "fft" };
        let (vr, vi) = (self.value(z.re), self.value(z.im));
        if vr.shape() != vi.shape() || axis >= vr.rank() {
            return Err(Error::shape(op, format!("re {:?}, im {:?}, axis {}", vr.shape(), vi.shape(), axis)));
        }
        kernels::check_pow2(op, vr.shape()[axis])?;
        let shape = vr.shape().to_vec();
        let (re, im) = kernels::fft_axis(vr.data(), vi.data(), &shape, axis, inverse);
        // the adjoint of a unitary transform is its inverse
        let adjoint = move |g_re: &[f64], g_im: &[f64], shape: &[usize]| {
            let (a, b) = kernels::fft_axis(g_re, g_im, shape, axis, !inverse);
            (RealTensor::from_parts(shape.to_vec(), a), RealTensor::from_parts(shape.to_vec(), b))
        };
        let out_re = self.push(op, RealTensor::from_parts(shape.clone(), re), vec![z.re, z.im], Box::new(move |c| {
            let zeros = vec![0.0; c.grad.len()];
            let (a, b) = adjoint(c.grad.data(), &zeros, c.grad.shape());
            vec![c.needs[0].then_some(a), c.needs[1].then_some(b)]
        }))?;
        let out_im = self.push(op, RealTensor::from_parts(shape, im), vec![z.re, z.im], Box::new(move |c| {
            let zeros = vec![0.0; c.grad.len()];
            let (a, b) = adjoint(&zeros, c.grad.data(), c.grad.shape());
            vec![c.needs[0].then_some(a), c.needs[1].then_some(b)]
        }))?;
        Ok(CVar { re: out_re, im: out_im })
    }
}

/// Value-level unitary FFT along `axis`, for code paths that do not need a tape.
pub fn fft_values(z: &ComplexTensor, axis: usize, inverse: bool) -> Result<ComplexTensor> {
    let op = if inverse { "ifft" } else { "fft" };
    if axis >= z.re.rank() {
        return Err(Error::shape(op, format!("axis {} for {:?}", axis, z.shape())));
    }
    kernels::check_pow2(op, z.shape()[axis])?;
    let (re, im) = kernels::fft_axis(z.re.data(), z.im.data(), z.shape(), axis, inverse);
    Ok(ComplexTensor {
        re: RealTensor::from_parts(z.shape().to_vec(), re),
        im: RealTensor::from_parts(z.shape().to_vec(), im),
    })
}
