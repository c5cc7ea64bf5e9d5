//! Differentiable primitives over real tensors.

use super::kernels::{self, gemm};
use super::tape::{Tape, Var};
use super::tensor::{axis_extents, strides, RealTensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &RealTensor, b: &RealTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides = strides(shape);
    let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, new_shape);
    }
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    let inner_len = new_shape.last().copied().unwrap_or(1);
    let inner_stride = perm_strides.last().copied().unwrap_or(1);
    loop {
        for j in 0..inner_len {
            out.push(data[offset + j * inner_stride]);
        }
        // advance all but the last axis
        let mut ax = rank.saturating_sub(1);
        loop {
            if ax == 0 {
                return (out, new_shape);
            }
            ax -= 1;
            counter[ax] += 1;
            offset += perm_strides[ax];
            if counter[ax] < new_shape[ax] {
                break;
            }
            offset -= perm_strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
}

fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let out = va.zip_map(vb, |x, y| x + y);
        self.push("add", out, vec![a, b], Box::new(|c| {
            vec![c.needs[0].then(|| c.grad.clone()), c.needs[1].then(|| c.grad.clone())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let out = va.zip_map(vb, |x, y| x - y);
        self.push("sub", out, vec![a, b], Box::new(|c| {
            vec![c.needs[0].then(|| c.grad.clone()), c.needs[1].then(|| c.grad.map(|g| -g))]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let out = va.zip_map(vb, |x, y| x * y);
        self.push("mul", out, vec![a, b], Box::new(|c| {
            vec![
                c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y)),
                c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x)),
            ]
        }))
    }

    /// Sums a list of same-shape tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = xs.split_first() else {
            return Err(Error::invalid("add_n", "empty input list"));
        };
        let mut out = self.value(first).clone();
        for &x in rest {
            same_shape("add_n", &out, self.value(x))?;
            out.add_assign(self.value(x));
        }
        let n = xs.len();
        self.push("add_n", out, xs.to_vec(), Box::new(move |c| {
            (0..n).map(|i| c.needs[i].then(|| c.grad.clone())).collect()
        }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push("scale", out, vec![a], Box::new(move |c| vec![Some(c.grad.map(|g| g * factor))]))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + offset);
        self.push("add_scalar", out, vec![a], Box::new(|c| vec![Some(c.grad.clone())]))
    }

    /// Adds `b` to every trailing block of `x`; `b.shape` must be a suffix of `x.shape`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let (xs, bs) = (vx.shape(), vb.shape());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::shape("add_bias", format!("bias {:?} is not a suffix of {:?}", bs, xs)));
        }
        let n = vb.len();
        let mut out = vx.clone();
        for chunk in out.data_mut().chunks_exact_mut(n.max(1)) {
            for (o, &bv) in chunk.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        self.push("add_bias", out, vec![x, b], Box::new(move |c| {
            let gb = c.needs[1].then(|| {
                let mut acc = vec![0.0; n];
                for chunk in c.grad.data().chunks_exact(n.max(1)) {
                    for (a, g) in acc.iter_mut().zip(chunk) {
                        *a += g;
                    }
                }
                RealTensor::from_parts(c.inputs[1].shape().to_vec(), acc)
            });
            vec![c.needs[0].then(|| c.grad.clone()), gb]
        }))
    }

    /// Adds a per-channel bias `b[C]` to `x[B, C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vx.rank() < 2 || vb.shape() != [vx.shape()[1]] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("x {:?}, bias {:?}", vx.shape(), vb.shape()),
            ));
        }
        let (outer, ch, inner) = axis_extents(vx.shape(), 1);
        let mut out = vx.clone();
        {
            let d = out.data_mut();
            for o in 0..outer {
                for (ci, &bv) in vb.data().iter().enumerate() {
                    let base = (o * ch + ci) * inner;
                    d[base..base + inner].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        self.push("add_channel_bias", out, vec![x, b], Box::new(move |c| {
            let gb = c.needs[1].then(|| {
                let g = c.grad.data();
                let mut acc = vec![0.0; ch];
                for o in 0..outer {
                    for (ci, a) in acc.iter_mut().enumerate() {
                        let base = (o * ch + ci) * inner;
                        *a += g[base..base + inner].iter().sum::<f64>();
                    }
                }
                RealTensor::from_parts(vec![ch], acc)
            });
            vec![c.needs[0].then(|| c.grad.clone()), gb]
        }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push("relu", out, vec![a], Box::new(|c| {
            vec![Some(c.grad.zip_map(c.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
        }))
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push("softplus", out, vec![a], Box::new(|c| {
            vec![Some(c.grad.zip_map(c.inputs[0], |g, x| g / (1.0 + (-x).exp())))]
        }))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, vec![a], Box::new(|c| vec![Some(c.grad.zip_map(c.output, |g, y| g * y))]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::invalid("log", "argument must be strictly positive"));
        }
        let out = va.map(f64::ln);
        self.push("log", out, vec![a], Box::new(|c| vec![Some(c.grad.zip_map(c.inputs[0], |g, x| g / x))]))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::invalid("sqrt", "argument must be strictly positive"));
        }
        let out = va.map(f64::sqrt);
        self.push("sqrt", out, vec![a], Box::new(|c| {
            vec![Some(c.grad.zip_map(c.output, |g, y| 0.5 * g / y))]
        }))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push("square", out, vec![a], Box::new(|c| {
            vec![Some(c.grad.zip_map(c.inputs[0], |g, x| 2.0 * g * x))]
        }))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = RealTensor::scalar(self.value(a).sum());
        self.push("sum", out, vec![a], Box::new(|c| {
            let g = c.grad.item();
            vec![Some(RealTensor::full(c.inputs[0].shape(), g))]
        }))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        self.push("matmul", RealTensor::from_parts(vec![m, n], out), vec![a, b], Box::new(move |c| {
            let ga = c.needs[0].then(|| {
                let mut g = vec![0.0; m * k];
                gemm(m, n, k, c.grad.data(), false, c.inputs[1].data(), true, &mut g, false);
                RealTensor::from_parts(vec![m, k], g)
            });
            let gb = c.needs[1].then(|| {
                let mut g = vec![0.0; k * n];
                gemm(k, m, n, c.inputs[0].data(), true, c.grad.data(), false, &mut g, false);
                RealTensor::from_parts(vec![k, n], g)
            });
            vec![ga, gb]
        }))
    }

    /// Batched `[G, m, k] · [G, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let ok = va.rank() == 3 && vb.rank() == 3 && va.shape()[0] == vb.shape()[0] && va.shape()[2] == vb.shape()[1];
        if !ok {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let (g, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &va.data()[i * m * k..(i + 1) * m * k],
                false,
                &vb.data()[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.push("bmm", RealTensor::from_parts(vec![g, m, n], out), vec![a, b], Box::new(move |c| {
            let gd = c.grad.data();
            let ga = c.needs[0].then(|| {
                let mut acc = vec![0.0; g * m * k];
                for i in 0..g {
                    gemm(
                        m,
                        n,
                        k,
                        &gd[i * m * n..(i + 1) * m * n],
                        false,
                        &c.inputs[1].data()[i * k * n..(i + 1) * k * n],
                        true,
                        &mut acc[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                RealTensor::from_parts(vec![g, m, k], acc)
            });
            let gb = c.needs[1].then(|| {
                let mut acc = vec![0.0; g * k * n];
                for i in 0..g {
                    gemm(
                        k,
                        m,
                        n,
                        &c.inputs[0].data()[i * m * k..(i + 1) * m * k],
                        true,
                        &gd[i * m * n..(i + 1) * m * n],
                        false,
                        &mut acc[i * k * n..(i + 1) * k * n],
                        false,
                    );
                }
                RealTensor::from_parts(vec![g, k, n], acc)
            });
            vec![ga, gb]
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, vec![a], Box::new(|c| {
            vec![Some(RealTensor::from_parts(c.inputs[0].shape().to_vec(), c.grad.data().to_vec()))]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let mut seen = vec![false; va.rank()];
        let valid = axes.len() == va.rank()
            && axes.iter().all(|&ax| ax < seen.len() && !std::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(Error::shape("permute", format!("axes {:?} for shape {:?}", axes, va.shape())));
        }
        let (data, shape) = permute_data(va.data(), va.shape(), axes);
        let inv = invert_axes(axes);
        self.push("permute", RealTensor::from_parts(shape, data), vec![a], Box::new(move |c| {
            let (g, s) = permute_data(c.grad.data(), c.grad.shape(), &inv);
            vec![Some(RealTensor::from_parts(s, g))]
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::invalid("concat", "empty input list"));
        };
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {} for shape {:?}", axis, base)));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {}", s, base, axis)));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &l) in xs.iter().zip(&lens) {
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        self.push("concat", RealTensor::from_parts(shape, out), xs.to_vec(), Box::new(move |c| {
            let g = c.grad.data();
            let mut res = Vec::with_capacity(lens.len());
            let mut offset = 0;
            for (i, &l) in lens.iter().enumerate() {
                if !c.needs[i] {
                    res.push(None);
                    offset += l;
                    continue;
                }
                let mut part = Vec::with_capacity(outer * l * inner);
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    part.extend_from_slice(&g[start..start + l * inner]);
                }
                res.push(Some(RealTensor::from_parts(c.inputs[i].shape().to_vec(), part)));
                offset += l;
            }
            res
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.rank() || start + len > va.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{}, {}) on axis {} of {:?}", start, start + len, axis, va.shape()),
            ));
        }
        let (outer, n, inner) = axis_extents(va.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out.extend_from_slice(&va.data()[s..s + len * inner]);
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = len;
        self.push("narrow", RealTensor::from_parts(shape, out), vec![a], Box::new(move |c| {
            let mut g = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let s = (o * n + start) * inner;
                g[s..s + len * inner].copy_from_slice(&c.grad.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(RealTensor::from_parts(c.inputs[0].shape().to_vec(), g))]
        }))
    }

    /// 2-D convolution, stride 1, zero padding `pad`:
    /// `x[B, Ci, H, W] * w[Co, Ci, kh, kw] -> [B, Co, H', W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 4 || vw.rank() != 4 || vx.shape()[1] != vw.shape()[1] {
            return Err(Error::shape("conv2d", format!("x {:?}, w {:?}", vx.shape(), vw.shape())));
        }
        let geo = ConvGeom::new(vx.shape(), vw.shape(), pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {:?} too large for {:?}", vw.shape(), vx.shape())))?;
        let mut out = vec![0.0; geo.b * geo.co * geo.hw_out()];
        let mut cols = vec![0.0; geo.col_rows() * geo.hw_out()];
        for bi in 0..geo.b {
            geo.im2col(&vx.data()[bi * geo.in_item()..(bi + 1) * geo.in_item()], &mut cols);
            let dst = &mut out[bi * geo.co * geo.hw_out()..(bi + 1) * geo.co * geo.hw_out()];
            gemm(geo.co, geo.col_rows(), geo.hw_out(), vw.data(), false, &cols, false, dst, false);
        }
        let shape = vec![geo.b, geo.co, geo.ho, geo.wo];
        self.push("conv2d", RealTensor::from_parts(shape, out), vec![x, w], Box::new(move |c| {
            let (xd, wd, gd) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
            let per_out = geo.co * geo.hw_out();
            let mut gw = c.needs[1].then(|| vec![0.0; wd.len()]);
            let mut gx = c.needs[0].then(|| vec![0.0; xd.len()]);
            let mut cols = vec![0.0; geo.col_rows() * geo.hw_out()];
            for bi in 0..geo.b {
                let g = &gd[bi * per_out..(bi + 1) * per_out];
                if let Some(gw) = gw.as_mut() {
                    geo.im2col(&xd[bi * geo.in_item()..(bi + 1) * geo.in_item()], &mut cols);
                    gemm(geo.co, geo.hw_out(), geo.col_rows(), g, false, &cols, true, gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(geo.col_rows(), geo.co, geo.hw_out(), wd, true, g, false, &mut cols, false);
                    geo.col2im(&cols, &mut gx[bi * geo.in_item()..(bi + 1) * geo.in_item()]);
                }
            }
            vec![
                gx.map(|g| RealTensor::from_parts(c.inputs[0].shape().to_vec(), g)),
                gw.map(|g| RealTensor::from_parts(c.inputs[1].shape().to_vec(), g)),
            ]
        }))
    }

    /// Non-overlapping `k×k` average pooling over the last two axes of `[B, C, H, W]`.
    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if vx.rank() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(Error::shape("avgpool2d", format!("window {} for {:?}", k, s)));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; bc * ho * wo];
        let d = vx.data();
        for p in 0..bc {
            for i in 0..h {
                for j in 0..w {
                    out[p * ho * wo + (i / k) * wo + j / k] += d[p * h * w + i * w + j] * inv;
                }
            }
        }
        let shape = vec![s[0], s[1], ho, wo];
        self.push("avgpool2d", RealTensor::from_parts(shape, out), vec![x], Box::new(move |c| {
            let g = c.grad.data();
            let mut gx = vec![0.0; bc * h * w];
            for p in 0..bc {
                for i in 0..h {
                    for j in 0..w {
                        gx[p * h * w + i * w + j] = g[p * ho * wo + (i / k) * wo + j / k] * inv;
                    }
                }
            }
            vec![Some(RealTensor::from_parts(c.inputs[0].shape().to_vec(), gx))]
        }))
    }

    /// Circular convolution of every fiber of `x` along `axis` with `key`.
    pub fn circular_conv(&mut self, x: Var, key: Var, axis: usize) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(key));
        if vk.rank() != 1 || axis >= vx.rank() || vx.shape()[axis] != vk.len() {
            return Err(Error::shape(
                "circular_conv",
                format!("x {:?} along axis {} with key {:?}", vx.shape(), axis, vk.shape()),
            ));
        }
        let shape = vx.shape().to_vec();
        let n = vk.len();
        let fibers = kernels::gather_fibers(vx.data(), &shape, axis);
        let conv = kernels::circ_conv(&fibers, vk.data());
        let out = RealTensor::from_parts(shape.clone(), kernels::scatter_fibers(&conv, &shape, axis));
        self.push("circular_conv", out, vec![x, key], Box::new(move |c| {
            let gf = kernels::gather_fibers(c.grad.data(), &shape, axis);
            let gx = c.needs[0].then(|| {
                let krev = kernels::reverse_circular(c.inputs[1].data());
                let d = kernels::circ_conv(&gf, &krev);
                RealTensor::from_parts(shape.clone(), kernels::scatter_fibers(&d, &shape, axis))
            });
            let gk = c.needs[1].then(|| {
                let xf = kernels::gather_fibers(c.inputs[0].data(), &shape, axis);
                RealTensor::from_parts(vec![n], kernels::circ_corr_sum(&gf, &xf, n))
            });
            vec![gx, gk]
        }))
    }

    /// Mean softmax cross-entropy of `logits[B, n]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 2 || vl.shape()[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} with {} labels", vl.shape(), labels.len()),
            ));
        }
        let (b, n) = (vl.shape()[0], vl.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("label {} out of range for {} classes", bad, n),
            ));
        }
        let mut probs = vec![0.0; b * n];
        let mut loss = 0.0;
        for (i, row) in vl.data().chunks_exact(n).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[labels[i]];
            for (p, v) in probs[i * n..(i + 1) * n].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let labels = labels.to_vec();
        let inv_b = 1.0 / b as f64;
        self.push("softmax_cross_entropy", RealTensor::scalar(loss * inv_b), vec![logits], Box::new(move |c| {
            let g = c.grad.item() * inv_b;
            let mut d = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                d[i * n + y] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= g);
            vec![Some(RealTensor::from_parts(vec![b, n], d))]
        }))
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], pad: usize) -> Option<Self> {
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        let ho = (h + 2 * pad).checked_sub(kh)? + 1;
        let wo = (w + 2 * pad).checked_sub(kw)? + 1;
        Some(Self { b: xs[0], ci: xs[1], h, w, co: ws[0], kh, kw, pad, ho, wo })
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn col_rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn in_item(&self) -> usize {
        self.ci * self.h * self.w
    }

    /// Iterates (col row, out position, input offset) for every valid tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let hw = self.hw_out();
        for c in 0..self.ci {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    for oi in 0..self.ho {
                        let ii = (oi + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        for oj in 0..self.wo {
                            let jj = (oj + kj) as isize - self.pad as isize;
                            if jj < 0 || jj >= self.w as isize {
                                continue;
                            }
                            let src = (c * self.h + ii as usize) * self.w + jj as usize;
                            f(row * hw + oi * self.wo + oj, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        cols.iter_mut().for_each(|v| *v = 0.0);
        self.for_each_tap(|dst, src| cols[dst] = x[src]);
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        self.for_each_tap(|dst, src| gx[src] += cols[dst]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = t.constant(RealTensor::from_slice(&[-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = RealTensor::new(&[3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let i = t.constant(RealTensor::eye(3));
        let av = t.constant(a.clone());
        let y = t.matmul(i, av).unwrap();
        assert_eq!(t.value(y), &a);
    }

    #[test]
    fn circular_conv_example() {
        let mut t = Tape::new();
        let x = t.constant(RealTensor::from_slice(&[1.0, 2.0, 3.0]));
        let k = t.constant(RealTensor::from_slice(&[0.0, 1.0, 0.0]));
        let y = t.circular_conv(x, k, 0).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 1.0, 2.0]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(RealTensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut t = Tape::new();
        let p = t.param(RealTensor::from_slice(&[1.0, 2.0]));
        let c = t.constant(RealTensor::scalar(5.0));
        let y = t.scale(c, 2.0).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(p).is_none());
        assert_eq!(g.wrt(&t, p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f(x) = 3x used twice: d/dx (f + 2f) = 9
        let mut t = Tape::new();
        let x = t.param(RealTensor::scalar(1.5));
        let f = t.scale(x, 3.0).unwrap();
        let f2 = t.scale(f, 2.0).unwrap();
        let y = t.add(f, f2).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 9.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(RealTensor::from_slice(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::InvalidLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::new();
        let a = t.constant(RealTensor::zeros(&[2, 3]));
        let b = t.constant(RealTensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn permute_round_trip() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = t.constant(RealTensor::new(&[2, 3, 4], data.clone()).unwrap());
        let p = t.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(t.shape(p), &[4, 2, 3]);
        // element (k=1, i=1, j=2) == x[1][2][1]
        assert_eq!(t.value(p).data()[6 + 3 + 2], data[12 + 8 + 1]);
        let back = t.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(t.value(back).data(), &data[..]);
    }

    #[test]
    fn cross_entropy_uniform() {
        let mut t = Tape::new();
        let l = t.constant(RealTensor::zeros(&[4, 10]));
        let y = t.softmax_cross_entropy(l, &[0, 3, 9, 1]).unwrap();
        assert!((t.value(y).item() - 10f64.ln()).abs() < 1e-12);
        assert!(t.softmax_cross_entropy(l, &[0, 3, 10, 1]).is_err());
    }
}
