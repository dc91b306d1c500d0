//! Spatial operators on `[N, C, spatial...]` tensors (2 or 3 spatial axes).

use super::{Tensor, Var};
use crate::error::{Error, Result};

/// Boundary rule for [`Var::filter_axis`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    /// Samples outside the axis read as zero.
    Zero,
    /// Samples outside the axis read the nearest edge value.
    Clamp,
}

fn spatial(shape: &[usize], op: &str) -> Result<(usize, Vec<usize>)> {
    if shape.len() != 4 && shape.len() != 5 {
        return Err(Error::Shape(format!(
            "{op}: expected [N, C, spatial..], got {shape:?}"
        )));
    }
    Ok((shape[0] * shape[1], shape[2..].to_vec()))
}

/// `[D, H, W]` view of the spatial dims, with `D = 1` for 2D tensors.
fn dhw(sp: &[usize]) -> [usize; 3] {
    if sp.len() == 2 {
        [1, sp[0], sp[1]]
    } else {
        [sp[0], sp[1], sp[2]]
    }
}

/// Trilinear sample of one channel at continuous `(z, y, x)` with coordinates
/// clamped to the volume. Returns the value and, for each axis, the derivative
/// w.r.t. the unclamped coordinate (zero where clamping is active).
#[inline]
pub(crate) fn trilinear_sample(v: &[f32], dims: [usize; 3], c: [f32; 3]) -> (f32, [f32; 3]) {
    let (w, corners) = trilinear_weights(dims, c);
    let at = |k: usize| v[corners[k]];
    let val = (0..8).map(|k| w.weights[k] * at(k)).sum();
    let [wz, wy, wx] = w.frac;
    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
    // corners: bit 2 = z+1, bit 1 = y+1, bit 0 = x+1
    let dz = lerp(lerp(at(4), at(5), wx), lerp(at(6), at(7), wx), wy)
        - lerp(lerp(at(0), at(1), wx), lerp(at(2), at(3), wx), wy);
    let dy = lerp(lerp(at(2), at(3), wx), lerp(at(6), at(7), wx), wz)
        - lerp(lerp(at(0), at(1), wx), lerp(at(4), at(5), wx), wz);
    let dx = lerp(
        lerp(at(1) - at(0), at(3) - at(2), wy),
        lerp(at(5) - at(4), at(7) - at(6), wy),
        wz,
    );
    let g = [dz * w.live[0], dy * w.live[1], dx * w.live[2]];
    (val, g)
}

pub(crate) struct Weights {
    pub weights: [f32; 8],
    frac: [f32; 3],
    live: [f32; 3],
}

#[inline]
pub(crate) fn trilinear_weights(dims: [usize; 3], c: [f32; 3]) -> (Weights, [usize; 8]) {
    let mut base = [0usize; 3];
    let mut next = [0usize; 3];
    let mut frac = [0f32; 3];
    let mut live = [1f32; 3];
    for a in 0..3 {
        let n = dims[a];
        let hi = (n - 1) as f32;
        let mut p = c[a];
        if !(p > 0.0) {
            // also catches NaN
            if p < 0.0 || p.is_nan() {
                live[a] = 0.0;
            }
            p = 0.0;
        } else if p > hi {
            p = hi;
            live[a] = 0.0;
        }
        if n == 1 {
            live[a] = 0.0;
            continue;
        }
        let i0 = (p.floor() as usize).min(n - 2);
        base[a] = i0;
        next[a] = i0 + 1;
        frac[a] = p - i0 as f32;
    }
    let [fz, fy, fx] = frac;
    let mut weights = [0f32; 8];
    let mut corners = [0usize; 8];
    for k in 0..8 {
        let z = if k & 4 != 0 { next[0] } else { base[0] };
        let y = if k & 2 != 0 { next[1] } else { base[1] };
        let x = if k & 1 != 0 { next[2] } else { base[2] };
        let wz = if k & 4 != 0 { fz } else { 1.0 - fz };
        let wy = if k & 2 != 0 { fy } else { 1.0 - fy };
        let wx = if k & 1 != 0 { fx } else { 1.0 - fx };
        weights[k] = wz * wy * wx;
        corners[k] = (z * dims[1] + y) * dims[2] + x;
    }
    (
        Weights {
            weights,
            frac,
            live,
        },
        corners,
    )
}

/// Pull-warp of `src` (`[C, D, H, W]` flattened) by a channel-first field
/// (`[3, D, H, W]`, channels x, y, z in voxels): `out(p) = src(p + phi(p))`.
pub(crate) fn warp_forward(
    src: &[f32],
    channels: usize,
    dims: [usize; 3],
    phi: &[f32],
) -> Vec<f32> {
    let nv = dims.iter().product::<usize>();
    let mut out = vec![0.0f32; channels * nv];
    let [nz, ny, nx] = dims;
    let mut p = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let c = [
                    z as f32 + phi[2 * nv + p],
                    y as f32 + phi[nv + p],
                    x as f32 + phi[p],
                ];
                let (w, corners) = trilinear_weights(dims, c);
                for ch in 0..channels {
                    let s = &src[ch * nv..(ch + 1) * nv];
                    out[ch * nv + p] = (0..8).map(|k| w.weights[k] * s[corners[k]]).sum();
                }
                p += 1;
            }
        }
    }
    out
}

/// Linear resampling along one axis with aligned end points.
fn resize_axis_fwd(
    data: &[f32],
    outer: usize,
    n_in: usize,
    inner: usize,
    n_out: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; outer * n_out * inner];
    for o in 0..outer {
        for j in 0..n_out {
            let (i0, i1, t) = align_corners_src(j, n_in, n_out);
            let a = &data[(o * n_in + i0) * inner..][..inner];
            let b = &data[(o * n_in + i1) * inner..][..inner];
            let dst = &mut out[(o * n_out + j) * inner..][..inner];
            for k in 0..inner {
                dst[k] = a[k] + (b[k] - a[k]) * t;
            }
        }
    }
    out
}

fn align_corners_src(j: usize, n_in: usize, n_out: usize) -> (usize, usize, f32) {
    if n_in == 1 || n_out == 1 {
        return (0, 0, 0.0);
    }
    let pos = j as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
    let i0 = (pos.floor() as usize).min(n_in - 2);
    (i0, i0 + 1, (pos - i0 as f64) as f32)
}

impl<'t> Var<'t> {
    /// Nearest-neighbour upsampling by integer factors on the spatial axes.
    pub fn upsample_nearest(self, factors: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let (lead, sp) = spatial(v.shape(), "upsample_nearest")?;
        if factors.len() != sp.len() || factors.contains(&0) {
            return Err(Error::Shape(format!(
                "upsample_nearest: factors {factors:?} for {:?}",
                v.shape()
            )));
        }
        let [d, h, w] = dhw(&sp);
        let [fd, fh, fw] = dhw(factors);
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let mut out = vec![0.0f32; lead * od * oh * ow];
        let src_of = move |z: usize, y: usize, x: usize| ((z / fd) * h + y / fh) * w + x / fw;
        for l in 0..lead {
            let s = &v.data()[l * d * h * w..][..d * h * w];
            let dst = &mut out[l * od * oh * ow..][..od * oh * ow];
            let mut p = 0;
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        dst[p] = s[src_of(z, y, x)];
                        p += 1;
                    }
                }
            }
        }
        let mut oshape = v.shape()[..2].to_vec();
        oshape.extend(sp.iter().zip(factors).map(|(a, b)| a * b));
        Ok(self
            .tape
            .push(Tensor::from_vec(oshape, out), &[self], move |ctx| {
                let gd = ctx.grad.data();
                let mut g = vec![0.0f32; lead * d * h * w];
                for l in 0..lead {
                    let src = &gd[l * od * oh * ow..][..od * oh * ow];
                    let dst = &mut g[l * d * h * w..][..d * h * w];
                    let mut p = 0;
                    for z in 0..od {
                        for y in 0..oh {
                            for x in 0..ow {
                                dst[src_of(z, y, x)] += src[p];
                                p += 1;
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(ctx.inputs[0].shape().to_vec(), g))]
            }))
    }

    /// 2x2 average pooling over the last two axes (odd trailing rows/columns dropped).
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] < 2 || shape[shape.len() - 2] < 2 {
            return Err(Error::Shape(format!("avg_pool2 on {shape:?}")));
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (oh, ow) = (h / 2, w / 2);
        let lead: usize = shape[..r - 2].iter().product();
        let mut out = vec![0.0f32; lead * oh * ow];
        for l in 0..lead {
            let s = &v.data()[l * h * w..][..h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let i = 2 * y * w + 2 * x;
                    out[(l * oh + y) * ow + x] = 0.25 * (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]);
                }
            }
        }
        let mut oshape = shape.clone();
        oshape[r - 2] = oh;
        oshape[r - 1] = ow;
        Ok(self
            .tape
            .push(Tensor::from_vec(oshape, out), &[self], move |ctx| {
                let gd = ctx.grad.data();
                let mut g = vec![0.0f32; lead * h * w];
                for l in 0..lead {
                    for y in 0..oh {
                        for x in 0..ow {
                            let q = 0.25 * gd[(l * oh + y) * ow + x];
                            let i = l * h * w + 2 * y * w + 2 * x;
                            g[i] += q;
                            g[i + 1] += q;
                            g[i + w] += q;
                            g[i + w + 1] += q;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(shape.clone(), g))]
            }))
    }

    /// Per-sample, per-channel normalisation to zero mean and unit variance.
    pub fn instance_norm(self, eps: f32) -> Result<Var<'t>> {
        let v = self.value();
        let (lead, sp) = spatial(v.shape(), "instance_norm")?;
        let m: usize = sp.iter().product();
        let mut out = vec![0.0f32; lead * m];
        let mut inv_std = vec![0.0f32; lead];
        for l in 0..lead {
            let s = &v.data()[l * m..][..m];
            let mean = s.iter().map(|&x| x as f64).sum::<f64>() / m as f64;
            let var = s.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps as f64).sqrt();
            inv_std[l] = is as f32;
            for (o, &x) in out[l * m..][..m].iter_mut().zip(s) {
                *o = ((x as f64 - mean) * is) as f32;
            }
        }
        Ok(self.tape.push(
            Tensor::from_vec(v.shape().to_vec(), out),
            &[self],
            move |ctx| {
                let (gd, y) = (ctx.grad.data(), ctx.output.data());
                let mut g = vec![0.0f32; lead * m];
                for l in 0..lead {
                    let (gs, ys) = (&gd[l * m..][..m], &y[l * m..][..m]);
                    let gm = gs.iter().map(|&x| x as f64).sum::<f64>() / m as f64;
                    let gym = gs
                        .iter()
                        .zip(ys)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>()
                        / m as f64;
                    for k in 0..m {
                        g[l * m + k] =
                            (inv_std[l] as f64 * (gs[k] as f64 - gm - ys[k] as f64 * gym)) as f32;
                    }
                }
                vec![Some(Tensor::from_vec(ctx.inputs[0].shape().to_vec(), g))]
            },
        ))
    }

    /// "Same"-size correlation with an odd 1D kernel along `axis`.
    pub fn filter_axis(self, kernel: &[f32], axis: usize, boundary: Boundary) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axis >= shape.len() || kernel.len() % 2 == 0 {
            return Err(Error::Shape(format!(
                "filter_axis: axis {axis}, kernel {} on {shape:?}",
                kernel.len()
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let r = (kernel.len() / 2) as isize;
        let kernel = kernel.to_vec();
        // taps[i] = (source index, weight) pairs for output position i
        let taps: Vec<Vec<(usize, f32)>> = (0..n as isize)
            .map(|i| {
                kernel
                    .iter()
                    .enumerate()
                    .filter_map(|(k, &wk)| {
                        let j = i + k as isize - r;
                        match boundary {
                            Boundary::Zero => {
                                (j >= 0 && j < n as isize).then_some((j as usize, wk))
                            }
                            Boundary::Clamp => Some((j.clamp(0, n as isize - 1) as usize, wk)),
                        }
                    })
                    .collect()
            })
            .collect();
        let mut out = vec![0.0f32; v.len()];
        for o in 0..outer {
            for (i, ti) in taps.iter().enumerate() {
                let dst = &mut out[(o * n + i) * inner..][..inner];
                for &(j, wk) in ti {
                    let src = &v.data()[(o * n + j) * inner..][..inner];
                    for q in 0..inner {
                        dst[q] += wk * src[q];
                    }
                }
            }
        }
        Ok(self
            .tape
            .push(Tensor::from_vec(shape.clone(), out), &[self], move |ctx| {
                let gd = ctx.grad.data();
                let mut g = vec![0.0f32; gd.len()];
                for o in 0..outer {
                    for (i, ti) in taps.iter().enumerate() {
                        let src = &gd[(o * n + i) * inner..][..inner];
                        for &(j, wk) in ti {
                            let dst = &mut g[(o * n + j) * inner..][..inner];
                            for q in 0..inner {
                                dst[q] += wk * src[q];
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(shape.clone(), g))]
            }))
    }

    /// `[N, 1, D, H, W]` to `[N*D, 2r+1, H, W]`: each slice with its `r`
    /// neighbours on either side, repeating edge slices past the ends.
    pub fn slice_stack(self, r: usize) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.shape().to_vec();
        if s.len() != 5 || s[1] != 1 {
            return Err(Error::Shape(format!(
                "slice_stack: expected [N, 1, D, H, W], got {s:?}"
            )));
        }
        let (n, d, plane) = (s[0], s[2], s[3] * s[4]);
        let k = 2 * r + 1;
        let src_of = move |z: usize, j: usize| (z + j).saturating_sub(r).min(d - 1);
        let mut out = vec![0.0f32; n * d * k * plane];
        for b in 0..n {
            for z in 0..d {
                for j in 0..k {
                    let src = &v.data()[(b * d + src_of(z, j)) * plane..][..plane];
                    out[((b * d + z) * k + j) * plane..][..plane].copy_from_slice(src);
                }
            }
        }
        Ok(self.tape.push(
            Tensor::from_vec(vec![n * d, k, s[3], s[4]], out),
            &[self],
            move |ctx| {
                let gd = ctx.grad.data();
                let mut g = vec![0.0f32; n * d * plane];
                for b in 0..n {
                    for z in 0..d {
                        for j in 0..k {
                            let src = &gd[((b * d + z) * k + j) * plane..][..plane];
                            let dst = &mut g[(b * d + src_of(z, j)) * plane..][..plane];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                }
                vec![Some(Tensor::from_vec(s.clone(), g))]
            },
        ))
    }

    /// Pull-warp of `self` (`[N, C, D, H, W]`) through `phi` (`[N, 3, D, H, W]`,
    /// channels x, y, z in voxels) with trilinear sampling and border clamping.
    pub fn warp(self, phi: Var<'t>) -> Result<Var<'t>> {
        let (sv, pv) = (self.value(), phi.value());
        let (ss, ps) = (sv.shape().to_vec(), pv.shape().to_vec());
        if ss.len() != 5 || ps.len() != 5 || ps[1] != 3 || ss[0] != ps[0] || ss[2..] != ps[2..] {
            return Err(Error::Shape(format!("warp: source {ss:?}, field {ps:?}")));
        }
        let (n, c) = (ss[0], ss[1]);
        let dims = [ss[2], ss[3], ss[4]];
        let nv: usize = dims.iter().product();
        let mut out = Vec::with_capacity(n * c * nv);
        for b in 0..n {
            out.extend(warp_forward(
                &sv.data()[b * c * nv..][..c * nv],
                c,
                dims,
                &pv.data()[b * 3 * nv..][..3 * nv],
            ));
        }
        Ok(self.tape.push(
            Tensor::from_vec(ss.clone(), out),
            &[self, phi],
            move |ctx| {
                let (src, phi, gd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let mut gs = ctx.needs[0].then(|| vec![0.0f32; n * c * nv]);
                let mut gp = ctx.needs[1].then(|| vec![0.0f32; n * 3 * nv]);
                let [nz, ny, nx] = dims;
                for b in 0..n {
                    let sb = &src[b * c * nv..][..c * nv];
                    let pb = &phi[b * 3 * nv..][..3 * nv];
                    let mut p = 0;
                    for z in 0..nz {
                        for y in 0..ny {
                            for x in 0..nx {
                                let co = [
                                    z as f32 + pb[2 * nv + p],
                                    y as f32 + pb[nv + p],
                                    x as f32 + pb[p],
                                ];
                                if let Some(gs) = gs.as_mut() {
                                    let (w, corners) = trilinear_weights(dims, co);
                                    for ch in 0..c {
                                        let g = gd[(b * c + ch) * nv + p];
                                        let dst = &mut gs[(b * c + ch) * nv..][..nv];
                                        for k in 0..8 {
                                            dst[corners[k]] += w.weights[k] * g;
                                        }
                                    }
                                }
                                if let Some(gp) = gp.as_mut() {
                                    let mut acc = [0.0f32; 3];
                                    for ch in 0..c {
                                        let g = gd[(b * c + ch) * nv + p];
                                        if g == 0.0 {
                                            continue;
                                        }
                                        let (_, dv) =
                                            trilinear_sample(&sb[ch * nv..][..nv], dims, co);
                                        for a in 0..3 {
                                            acc[a] += g * dv[a];
                                        }
                                    }
                                    // field channels are x, y, z; derivative axes are z, y, x
                                    gp[b * 3 * nv + p] += acc[2];
                                    gp[(b * 3 + 1) * nv + p] += acc[1];
                                    gp[(b * 3 + 2) * nv + p] += acc[0];
                                }
                                p += 1;
                            }
                        }
                    }
                }
                vec![
                    gs.map(|g| Tensor::from_vec(ss.clone(), g)),
                    gp.map(|g| Tensor::from_vec(ps.clone(), g)),
                ]
            },
        ))
    }

    /// Linear resampling of spatial `axis` (0-based among the spatial axes) to
    /// `n_out` samples, aligning the first and last samples.
    pub fn resize_axis(self, axis: usize, n_out: usize) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let (_, sp) = spatial(&shape, "resize_axis")?;
        if axis >= sp.len() || n_out == 0 {
            return Err(Error::Shape(format!(
                "resize_axis: axis {axis} to {n_out} on {shape:?}"
            )));
        }
        let ax = axis + 2;
        let outer: usize = shape[..ax].iter().product();
        let n_in = shape[ax];
        let inner: usize = shape[ax + 1..].iter().product();
        if n_in == n_out {
            return Ok(self);
        }
        let out = resize_axis_fwd(v.data(), outer, n_in, inner, n_out);
        let mut oshape = shape.clone();
        oshape[ax] = n_out;
        Ok(self
            .tape
            .push(Tensor::from_vec(oshape, out), &[self], move |ctx| {
                let gd = ctx.grad.data();
                let mut g = vec![0.0f32; outer * n_in * inner];
                for o in 0..outer {
                    for j in 0..n_out {
                        let (i0, i1, t) = align_corners_src(j, n_in, n_out);
                        let src = &gd[(o * n_out + j) * inner..][..inner];
                        for k in 0..inner {
                            g[(o * n_in + i0) * inner + k] += (1.0 - t) * src[k];
                            g[(o * n_in + i1) * inner + k] += t * src[k];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(shape.clone(), g))]
            }))
    }

    /// Separable linear resampling of all spatial axes to `dims` (aligned corners).
    pub fn resample_linear(self, dims: &[usize]) -> Result<Var<'t>> {
        let mut out = self;
        for (a, &n) in dims.iter().enumerate() {
            out = out.resize_axis(a, n)?;
        }
        let s = out.shape();
        if s[2..] != *dims {
            return Err(Error::Shape(format!("resample_linear: {s:?} to {dims:?}")));
        }
        Ok(out)
    }

    /// `gamma[c] * x + beta[c]` per channel, with learnable `gamma` and `beta` of shape `[C]`.
    pub fn channel_affine(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let (v, g, b) = (self.value(), gamma.value(), beta.value());
        let s = v.shape().to_vec();
        if s.len() < 2 || g.len() != s[1] || b.len() != s[1] {
            return Err(Error::Shape(format!(
                "channel_affine: {} / {} params for {s:?}",
                g.len(),
                b.len()
            )));
        }
        let (c, inner) = (s[1], s[2..].iter().product::<usize>());
        let ch = move |i: usize| (i / inner) % c;
        let out = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| g.data()[ch(i)] * x + b.data()[ch(i)])
            .collect();
        Ok(self.tape.push(
            Tensor::from_vec(s.clone(), out),
            &[self, gamma, beta],
            move |ctx| {
                let (x, gm, gd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let gx = ctx.needs[0].then(|| {
                    let d = gd.iter().enumerate().map(|(i, &g)| g * gm[ch(i)]).collect();
                    Tensor::from_vec(s.clone(), d)
                });
                let mut sg = vec![0.0f64; c];
                let mut sb = vec![0.0f64; c];
                for (i, (&g, &xv)) in gd.iter().zip(x).enumerate() {
                    sg[ch(i)] += g as f64 * xv as f64;
                    sb[ch(i)] += g as f64;
                }
                let to_t = |v: Vec<f64>| {
                    Tensor::from_vec(vec![c], v.into_iter().map(|a| a as f32).collect())
                };
                vec![
                    gx,
                    ctx.needs[1].then(|| to_t(sg)),
                    ctx.needs[2].then(|| to_t(sb)),
                ]
            },
        ))
    }

    /// Multiplies channel `k` by the constant `factors[k]`.
    pub fn scale_channels(self, factors: &[f32]) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.shape().to_vec();
        if s.len() < 2 || s[1] != factors.len() {
            return Err(Error::Shape(format!(
                "scale_channels: {} factors for {s:?}",
                factors.len()
            )));
        }
        let (c, inner) = (s[1], s[2..].iter().product::<usize>());
        let f = factors.to_vec();
        let apply = move |d: &[f32]| -> Vec<f32> {
            d.iter()
                .enumerate()
                .map(|(i, &x)| x * f[(i / inner) % c])
                .collect()
        };
        let out = apply(v.data());
        Ok(self
            .tape
            .push(Tensor::from_vec(s.clone(), out), &[self], move |ctx| {
                vec![Some(Tensor::from_vec(s.clone(), apply(ctx.grad.data())))]
            }))
    }
}
