//! 2D/3D cross-correlation through chunked im2col and `sgemm`.
//!
//! 2D inputs `[N, C, H, W]` run through the 3D path with a unit depth.

use super::{Tensor, Var};
use crate::error::{Error, Result};

/// Upper bound on the im2col scratch buffer, in floats.
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    cout: usize,
    inp: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl Geom {
    fn kdim(&self) -> usize {
        self.cin * self.k.iter().product::<usize>()
    }

    fn in_vol(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }

    fn plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    /// Output depth-planes handled per im2col chunk.
    fn chunk_planes(&self) -> usize {
        (COL_BUDGET / (self.kdim() * self.plane()).max(1)).clamp(1, self.out[0])
    }
}

fn im2col(g: &Geom, x: &[f32], z0: usize, z1: usize, col: &mut [f32]) {
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let pc = (z1 - z0) * oh * ow;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * g.in_vol()..(ci + 1) * g.in_vol()];
        for kz in 0..g.k[0] {
            for ky in 0..g.k[1] {
                for kx in 0..g.k[2] {
                    let dst = &mut col[row * pc..(row + 1) * pc];
                    let mut p = 0;
                    for oz in z0..z1 {
                        let iz = (oz * g.stride[0] + kz) as isize - g.pad[0] as isize;
                        if iz < 0 || iz >= g.inp[0] as isize {
                            dst[p..p + oh * ow].fill(0.0);
                            p += oh * ow;
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * g.stride[1] + ky) as isize - g.pad[1] as isize;
                            if iy < 0 || iy >= ih as isize {
                                dst[p..p + ow].fill(0.0);
                                p += ow;
                                continue;
                            }
                            let src = &xc[(iz as usize * ih + iy as usize) * iw..][..iw];
                            for ox in 0..ow {
                                let ix = (ox * g.stride[2] + kx) as isize - g.pad[2] as isize;
                                dst[p] = if ix >= 0 && (ix as usize) < iw {
                                    src[ix as usize]
                                } else {
                                    0.0
                                };
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im(g: &Geom, col: &[f32], z0: usize, z1: usize, gx: &mut [f32]) {
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let pc = (z1 - z0) * oh * ow;
    let mut row = 0;
    for ci in 0..g.cin {
        let in_vol = g.in_vol();
        let gxc = &mut gx[ci * in_vol..(ci + 1) * in_vol];
        for kz in 0..g.k[0] {
            for ky in 0..g.k[1] {
                for kx in 0..g.k[2] {
                    let src = &col[row * pc..(row + 1) * pc];
                    let mut p = 0;
                    for oz in z0..z1 {
                        let iz = (oz * g.stride[0] + kz) as isize - g.pad[0] as isize;
                        if iz < 0 || iz >= g.inp[0] as isize {
                            p += oh * ow;
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * g.stride[1] + ky) as isize - g.pad[1] as isize;
                            if iy < 0 || iy >= ih as isize {
                                p += ow;
                                continue;
                            }
                            let dst = &mut gxc[(iz as usize * ih + iy as usize) * iw..][..iw];
                            for ox in 0..ow {
                                let ix = (ox * g.stride[2] + kx) as isize - g.pad[2] as isize;
                                if ix >= 0 && (ix as usize) < iw {
                                    dst[ix as usize] += src[p];
                                }
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn forward(g: &Geom, x: &[f32], w: &[f32], b: Option<&[f32]>) -> Vec<f32> {
    let (kd, ov) = (g.kdim(), g.out_vol());
    let mut out = vec![0.0f32; g.n * g.cout * ov];
    let cp = g.chunk_planes();
    let mut col = vec![0.0f32; kd * cp * g.plane()];
    for s in 0..g.n {
        let xs = &x[s * g.cin * g.in_vol()..(s + 1) * g.cin * g.in_vol()];
        let os = &mut out[s * g.cout * ov..(s + 1) * g.cout * ov];
        let mut z0 = 0;
        while z0 < g.out[0] {
            let z1 = (z0 + cp).min(g.out[0]);
            let pc = (z1 - z0) * g.plane();
            im2col(g, xs, z0, z1, &mut col);
            let off = z0 * g.plane();
            gemm(
                g.cout,
                kd,
                pc,
                w,
                (kd, 1),
                &col[..kd * pc],
                (pc, 1),
                0.0,
                &mut os[off..],
                (ov, 1),
            );
            z0 = z1;
        }
        if let Some(b) = b {
            for (co, &bv) in b.iter().enumerate() {
                os[co * ov..(co + 1) * ov].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

fn backward(
    g: &Geom,
    x: &[f32],
    w: &[f32],
    gout: &[f32],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let (kd, ov) = (g.kdim(), g.out_vol());
    let mut gx = need_x.then(|| vec![0.0f32; g.n * g.cin * g.in_vol()]);
    let mut gw = need_w.then(|| vec![0.0f32; g.cout * kd]);
    let cp = g.chunk_planes();
    let mut col = vec![0.0f32; kd * cp * g.plane()];
    for s in 0..g.n {
        let xs = &x[s * g.cin * g.in_vol()..(s + 1) * g.cin * g.in_vol()];
        let gs = &gout[s * g.cout * ov..(s + 1) * g.cout * ov];
        let mut z0 = 0;
        while z0 < g.out[0] {
            let z1 = (z0 + cp).min(g.out[0]);
            let pc = (z1 - z0) * g.plane();
            let off = z0 * g.plane();
            if let Some(gw) = gw.as_mut() {
                im2col(g, xs, z0, z1, &mut col);
                // gw[cout x kd] += gout[cout x pc] * col^T[pc x kd]
                gemm(
                    g.cout,
                    pc,
                    kd,
                    &gs[off..],
                    (ov, 1),
                    &col[..kd * pc],
                    (1, pc),
                    1.0,
                    gw,
                    (kd, 1),
                );
            }
            if let Some(gx) = gx.as_mut() {
                // gcol[kd x pc] = w^T[kd x cout] * gout[cout x pc]
                gemm(
                    kd,
                    g.cout,
                    pc,
                    w,
                    (1, kd),
                    &gs[off..],
                    (ov, 1),
                    0.0,
                    &mut col[..kd * pc],
                    (pc, 1),
                );
                let gxs = &mut gx[s * g.cin * g.in_vol()..(s + 1) * g.cin * g.in_vol()];
                col2im(g, &col, z0, z1, gxs);
            }
            z0 = z1;
        }
    }
    (gx, gw)
}

fn conv_impl<'t>(
    x: Var<'t>,
    w: Var<'t>,
    b: Option<Var<'t>>,
    stride: [usize; 3],
    pad: [usize; 3],
    two_d: bool,
) -> Result<Var<'t>> {
    let (xv, wv) = (x.value(), w.value());
    let (xs, ws) = (xv.shape(), wv.shape());
    let rank = if two_d { 4 } else { 5 };
    if xs.len() != rank || ws.len() != rank {
        return Err(Error::Shape(format!(
            "conv{}d: input {xs:?}, weight {ws:?}",
            rank - 2
        )));
    }
    let lift = |s: &[usize]| -> [usize; 3] {
        if two_d {
            [1, s[2], s[3]]
        } else {
            [s[2], s[3], s[4]]
        }
    };
    let (inp, k) = (lift(xs), lift(ws));
    if ws[1] != xs[1] {
        return Err(Error::Shape(format!(
            "conv: weight expects {} channels, input has {}",
            ws[1], xs[1]
        )));
    }
    let mut out = [0usize; 3];
    for a in 0..3 {
        let padded = inp[a] + 2 * pad[a];
        if k[a] > padded || stride[a] == 0 {
            return Err(Error::Shape(format!(
                "conv: kernel {k:?} does not fit padded input {inp:?}"
            )));
        }
        out[a] = (padded - k[a]) / stride[a] + 1;
    }
    let g = Geom {
        n: xs[0],
        cin: xs[1],
        cout: ws[0],
        inp,
        k,
        stride,
        pad,
        out,
    };
    let bv = match b {
        Some(b) => {
            let bv = b.value();
            if bv.len() != g.cout {
                return Err(Error::Shape(format!(
                    "conv: bias has {} values for {} outputs",
                    bv.len(),
                    g.cout
                )));
            }
            Some(bv)
        }
        None => None,
    };
    let data = forward(&g, xv.data(), wv.data(), bv.as_ref().map(|t| t.data()));
    let oshape = if two_d {
        vec![g.n, g.cout, out[1], out[2]]
    } else {
        vec![g.n, g.cout, out[0], out[1], out[2]]
    };
    let mut parents = vec![x, w];
    parents.extend(b);
    Ok(x.tape
        .push(Tensor::from_vec(oshape, data), &parents, move |ctx| {
            let (xi, wi) = (&ctx.inputs[0], &ctx.inputs[1]);
            let gout = ctx.grad.data();
            let (gx, gw) = backward(&g, xi.data(), wi.data(), gout, ctx.needs[0], ctx.needs[1]);
            let mut grads = vec![
                gx.map(|d| Tensor::from_vec(xi.shape().to_vec(), d)),
                gw.map(|d| Tensor::from_vec(wi.shape().to_vec(), d)),
            ];
            if ctx.inputs.len() == 3 {
                let ov = g.out_vol();
                let gb: Vec<f32> = (0..g.cout)
                    .map(|co| {
                        (0..g.n)
                            .map(|s| {
                                gout[(s * g.cout + co) * ov..][..ov]
                                    .iter()
                                    .map(|&v| v as f64)
                                    .sum::<f64>()
                            })
                            .sum::<f64>() as f32
                    })
                    .collect();
                grads.push(Some(Tensor::from_vec(vec![g.cout], gb)));
            }
            grads
        }))
}

impl<'t> Var<'t> {
    /// 3D cross-correlation: input `[N, Cin, D, H, W]`, weight `[Cout, Cin, kd, kh, kw]`.
    pub fn conv3d(
        self,
        w: Var<'t>,
        b: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        conv_impl(self, w, b, [stride; 3], [pad; 3], false)
    }

    /// 2D cross-correlation: input `[N, Cin, H, W]`, weight `[Cout, Cin, kh, kw]`.
    pub fn conv2d(
        self,
        w: Var<'t>,
        b: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        conv_impl(self, w, b, [1, stride, stride], [0, pad, pad], true)
    }
}
