//! Elementwise, reduction and shape primitives.
//!
//! Binary operations accept equal shapes or a one-element operand that is
//! broadcast against the other.

use super::{Tensor, Var};
use crate::error::{Error, Result};

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn binary<'t>(
    a: Var<'t>,
    b: Var<'t>,
    name: &'static str,
    fwd: fn(f32, f32) -> f32,
    da: fn(f32, f32) -> f32,
    db: fn(f32, f32) -> f32,
) -> Result<Var<'t>> {
    let (av, bv) = (a.value(), b.value());
    let shape = if av.shape() == bv.shape() || bv.len() == 1 {
        av.shape().to_vec()
    } else if av.len() == 1 {
        bv.shape().to_vec()
    } else {
        return Err(Error::Shape(format!(
            "{name}: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        )));
    };
    let n: usize = shape.iter().product();
    let (sa, sb) = (av.len() == 1 && n != 1, bv.len() == 1 && n != 1);
    let (ad, bd) = (av.data(), bv.data());
    let out: Vec<f32> = (0..n)
        .map(|i| fwd(ad[if sa { 0 } else { i }], bd[if sb { 0 } else { i }]))
        .collect();
    Ok(a.tape
        .push(Tensor::from_vec(shape, out), &[a, b], move |ctx| {
            let (ad, bd, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let grad_for = |scalar: bool, len: usize, shape: &[usize], d: fn(f32, f32) -> f32| {
                let mut acc = vec![0.0f32; len];
                if scalar {
                    let s: f64 = (0..g.len())
                        .map(|i| {
                            (g[i] * d(ad[if sa { 0 } else { i }], bd[if sb { 0 } else { i }]))
                                as f64
                        })
                        .sum();
                    acc[0] = s as f32;
                } else {
                    for i in 0..g.len() {
                        acc[i] = g[i] * d(ad[if sa { 0 } else { i }], bd[if sb { 0 } else { i }]);
                    }
                }
                Tensor::from_vec(shape.to_vec(), acc)
            };
            vec![
                ctx.needs[0].then(|| grad_for(sa, ad.len(), ctx.inputs[0].shape(), da)),
                ctx.needs[1].then(|| grad_for(sb, bd.len(), ctx.inputs[1].shape(), db)),
            ]
        }))
}

fn unary<'t>(
    a: Var<'t>,
    fwd: impl Fn(f32) -> f32,
    deriv: impl Fn(f32, f32) -> f32 + 'static,
) -> Var<'t> {
    let av = a.value();
    let out = av.map(fwd);
    a.tape.push(out, &[a], move |ctx| {
        let (x, y, g) = (ctx.inputs[0].data(), ctx.output.data(), ctx.grad.data());
        let d = (0..g.len()).map(|i| g[i] * deriv(x[i], y[i])).collect();
        vec![Some(Tensor::from_vec(ctx.inputs[0].shape().to_vec(), d))]
    })
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        binary(self, other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        binary(self, other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        binary(self, other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        binary(
            self,
            other,
            "div",
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    pub fn neg(self) -> Var<'t> {
        unary(self, |x| -x, |_, _| -1.0)
    }

    pub fn scale(self, c: f32) -> Var<'t> {
        unary(self, move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f32) -> Var<'t> {
        unary(self, move |x| x + c, |_, _| 1.0)
    }

    pub fn exp(self) -> Var<'t> {
        unary(self, f32::exp, |_, y| y)
    }

    /// `ln(x + eps)`; every `x + eps` must be positive.
    pub fn log(self, eps: f32) -> Result<Var<'t>> {
        if let Some(i) = self.value().data().iter().position(|&x| !(x + eps > 0.0)) {
            return Err(Error::Autograd(format!(
                "log of non-positive value at index {i}"
            )));
        }
        Ok(unary(
            self,
            move |x| (x + eps).ln(),
            move |x, _| 1.0 / (x + eps),
        ))
    }

    /// Square root; the derivative at zero is taken as zero.
    pub fn sqrt(self) -> Var<'t> {
        unary(self, f32::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn pow2(self) -> Var<'t> {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(self) -> Var<'t> {
        unary(self, f32::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(self) -> Var<'t> {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f32) -> Var<'t> {
        unary(
            self,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        unary(self, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        unary(self, f32::tanh, |_, y| 1.0 - y * y)
    }

    pub fn clamp_min(self, lo: f32) -> Var<'t> {
        unary(
            self,
            move |x| x.max(lo),
            move |x, _| if x > lo { 1.0 } else { 0.0 },
        )
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: f32, hi: f32) -> Var<'t> {
        unary(
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// Elementwise binary cross-entropy of logits against a constant target.
    pub fn bce_with_logits(self, target: f32) -> Var<'t> {
        unary(
            self,
            move |z| z.max(0.0) - z * target + (-z.abs()).exp().ln_1p(),
            move |z, _| sigmoid(z) - target,
        )
    }

    /// Sum of all elements (accumulated in `f64`), shape `[]`.
    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum_f64() as f32;
        self.tape.push(Tensor::scalar(s), &[self], |ctx| {
            let g = ctx.grad.item();
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let n = v.len().max(1);
        let s = (v.sum_f64() / n as f64) as f32;
        self.tape.push(Tensor::scalar(s), &[self], move |ctx| {
            let g = ctx.grad.item() / n as f32;
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        })
    }

    /// Mean over all axes but the first: `[N, ...]` to `[N]`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if shape.is_empty() || shape[0] == 0 {
            return Err(Error::Shape(format!("mean_rows on {shape:?}")));
        }
        let rows = shape[0];
        let inner = v.len() / rows;
        let out = v
            .data()
            .chunks_exact(inner.max(1))
            .map(|r| (r.iter().map(|&x| x as f64).sum::<f64>() / inner as f64) as f32)
            .collect();
        Ok(self
            .tape
            .push(Tensor::from_vec(vec![rows], out), &[self], move |ctx| {
                let gd = ctx.grad.data();
                let g = (0..rows * inner)
                    .map(|i| gd[i / inner] / inner as f32)
                    .collect();
                vec![Some(Tensor::from_vec(shape.clone(), g))]
            }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let out = (*v).clone().reshaped(shape.to_vec())?;
        Ok(self.tape.push(out, &[self], |ctx| {
            let g = ctx
                .grad
                .clone()
                .reshaped(ctx.inputs[0].shape().to_vec())
                .expect("same size");
            vec![Some(g)]
        }))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{} of axis {axis} in {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        Ok(self
            .tape
            .push(Tensor::from_vec(oshape, out), &[self], move |ctx| {
                let mut g = vec![0.0f32; outer * n * inner];
                let gd = ctx.grad.data();
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    g[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_vec(shape.clone(), g))]
            }))
    }

    /// Zero padding: `pads[k] = (before, after)` for every axis.
    pub fn pad(self, pads: &[(usize, usize)]) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if pads.len() != shape.len() {
            return Err(Error::Shape(format!(
                "pad spec for {} axes on {shape:?}",
                pads.len()
            )));
        }
        if pads.iter().all(|&(a, b)| a == 0 && b == 0) {
            return Ok(self);
        }
        let oshape: Vec<usize> = shape
            .iter()
            .zip(pads)
            .map(|(&n, &(a, b))| n + a + b)
            .collect();
        let offsets: Vec<usize> = pads.iter().map(|p| p.0).collect();
        let map = PadMap::new(&shape, &oshape, &offsets);
        let mut out = vec![0.0f32; oshape.iter().product()];
        map.for_each(|src, dst| out[dst] = v.data()[src]);
        Ok(self
            .tape
            .push(Tensor::from_vec(oshape, out), &[self], move |ctx| {
                let mut g = vec![0.0f32; shape.iter().product()];
                let gd = ctx.grad.data();
                map.for_each(|src, dst| g[src] = gd[dst]);
                vec![Some(Tensor::from_vec(shape.clone(), g))]
            }))
    }
}

/// Concatenation along `axis`; all other dims must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::Shape(format!("concat axis {axis} on {base:?}")));
    }
    for v in &values[1..] {
        let s = v.shape();
        let ok = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(k, (a, b))| k == axis || a == b);
        if !ok {
            return Err(Error::Shape(format!(
                "concat {:?} with {s:?} on axis {axis}",
                base
            )));
        }
    }
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = sizes.iter().sum();
    let (outer, _, inner) = split_axis(&base, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &n) in values.iter().zip(&sizes) {
            out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut oshape = base;
    oshape[axis] = total;
    Ok(first
        .tape
        .push(Tensor::from_vec(oshape, out), parts, move |ctx| {
            let gd = ctx.grad.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(sizes.len());
            for (k, &n) in sizes.iter().enumerate() {
                if ctx.needs[k] {
                    let mut g = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        g.extend_from_slice(&gd[start..start + n * inner]);
                    }
                    grads.push(Some(Tensor::from_vec(ctx.inputs[k].shape().to_vec(), g)));
                } else {
                    grads.push(None);
                }
                offset += n;
            }
            grads
        }))
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index correspondence between a tensor and its zero-padded version.
struct PadMap {
    shape: Vec<usize>,
    ostrides: Vec<usize>,
    offset: usize,
}

impl PadMap {
    fn new(shape: &[usize], oshape: &[usize], offsets: &[usize]) -> Self {
        let mut ostrides = vec![1usize; oshape.len()];
        for k in (0..oshape.len().saturating_sub(1)).rev() {
            ostrides[k] = ostrides[k + 1] * oshape[k + 1];
        }
        let offset = offsets.iter().zip(&ostrides).map(|(o, s)| o * s).sum();
        Self {
            shape: shape.to_vec(),
            ostrides,
            offset,
        }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let n: usize = self.shape.iter().product();
        if n == 0 {
            return;
        }
        let rank = self.shape.len();
        let last = self.shape[rank - 1];
        let mut idx = vec![0usize; rank];
        let mut src = 0;
        loop {
            let dst0 = self.offset
                + idx
                    .iter()
                    .zip(&self.ostrides)
                    .map(|(i, s)| i * s)
                    .sum::<usize>();
            for x in 0..last {
                f(src + x, dst0 + x);
            }
            src += last;
            if src == n {
                break;
            }
            let mut k = rank - 1;
            loop {
                if k == 0 {
                    return;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < self.shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
    }
}
