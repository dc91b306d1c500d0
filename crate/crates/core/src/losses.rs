//! Training objectives: local NCC, diffusion smoothness, SSIM / MS-SSIM,
//! conditional-GAN terms and the three stage losses.

use crate::autograd::{Boundary, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::warp::gaussian_kernel;

const NCC_EPS: f32 = 1e-5;

/// Number of in-bounds samples of a centred window of width `w` at each position.
fn window_counts(n: usize, w: usize) -> Vec<f32> {
    let r = (w / 2) as isize;
    (0..n as isize)
        .map(|i| ((i + r).min(n as isize - 1) - (i - r).max(0) + 1) as f32)
        .collect()
}

fn box_sum<'t>(x: Var<'t>, window: usize) -> Result<Var<'t>> {
    let ones = vec![1.0f32; window];
    let mut out = x;
    for axis in 2..x.shape().len() {
        out = out.filter_axis(&ones, axis, Boundary::Zero)?;
    }
    Ok(out)
}

/// Mean local Pearson correlation over `window`-wide cubes (windows truncated
/// at the border). Inputs are `[N, C, D, H, W]` or `[N, C, H, W]`.
pub fn ncc<'t>(a: Var<'t>, b: Var<'t>, window: usize) -> Result<Var<'t>> {
    let shape = a.shape();
    if shape != b.shape() {
        return Err(Error::Shape(format!("ncc: {:?} vs {:?}", shape, b.shape())));
    }
    if window % 2 == 0 || !(4..=5).contains(&shape.len()) {
        return Err(Error::InvalidArgument(format!(
            "ncc: window {window} on {shape:?}"
        )));
    }
    let tape = a.tape();
    let counts: Vec<Vec<f32>> = shape[2..]
        .iter()
        .map(|&n| window_counts(n, window))
        .collect();
    let (outer, sp) = (shape[0] * shape[1], &shape[2..]);
    let plane: usize = sp.iter().product();
    let mut n = Vec::with_capacity(outer * plane);
    for _ in 0..outer {
        for i in 0..plane {
            let mut rem = i;
            let mut c = 1.0f32;
            for (ax, &len) in sp.iter().enumerate().rev() {
                c *= counts[ax][rem % len];
                rem /= len;
            }
            n.push(c);
        }
    }
    let inv_n = tape.constant(Tensor::from_vec(
        shape.clone(),
        n.into_iter().map(|c| 1.0 / c).collect(),
    ));
    let s_a = box_sum(a, window)?;
    let s_b = box_sum(b, window)?;
    let s_aa = box_sum(a.mul(a)?, window)?;
    let s_bb = box_sum(b.mul(b)?, window)?;
    let s_ab = box_sum(a.mul(b)?, window)?;
    let cross = s_ab.sub(s_a.mul(s_b)?.mul(inv_n)?)?;
    let var_a = s_aa.sub(s_a.mul(s_a)?.mul(inv_n)?)?;
    let var_b = s_bb.sub(s_b.mul(s_b)?.mul(inv_n)?)?;
    let denom = var_a
        .mul(var_b)?
        .add_scalar(NCC_EPS)
        .clamp_min(NCC_EPS)
        .sqrt();
    Ok(cross.div(denom)?.mean())
}

/// Mean squared forward difference of a `[N, 3, D, H, W]` field, averaged over the three axes.
pub fn smooth<'t>(phi: Var<'t>) -> Result<Var<'t>> {
    let shape = phi.shape();
    if shape.len() != 5 || shape[1] != 3 {
        return Err(Error::Shape(format!(
            "smooth: expected [N, 3, D, H, W], got {shape:?}"
        )));
    }
    let mut total: Option<Var<'t>> = None;
    for axis in 2..5 {
        let n = shape[axis];
        if n < 2 {
            continue;
        }
        let d = phi.slice(axis, 1, n - 1)?.sub(phi.slice(axis, 0, n - 1)?)?;
        let term = d.pow2().mean();
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t.scale(1.0 / 3.0),
        None => phi.tape().constant(Tensor::scalar(0.0)),
    })
}

/// Mean squared norm of `phi_ab ∘ phi_ba` (zero for mutually inverse fields).
pub fn inverse_consistency<'t>(phi_ab: Var<'t>, phi_ba: Var<'t>) -> Result<Var<'t>> {
    let composed = phi_ba.add(phi_ab.warp(phi_ba)?)?;
    Ok(composed.pow2().mean())
}

/// Terms of the bidirectional coarse registration loss.
pub struct CoarseLoss<'t> {
    pub total: Var<'t>,
    pub ncc_m2f: Var<'t>,
    pub ncc_f2m: Var<'t>,
    pub smooth: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct CoarseWeights {
    pub smooth: f32,
    pub inverse_consistency: f32,
    pub window: usize,
}

/// `-ncc(f, m∘m2f) - ncc(m, f∘f2m) + smooth_w (smooth(m2f) + smooth(f2m))`,
/// plus an optional inverse-consistency penalty.
pub fn coarse_loss<'t>(
    m: Var<'t>,
    f: Var<'t>,
    m2f: Var<'t>,
    f2m: Var<'t>,
    w: CoarseWeights,
) -> Result<CoarseLoss<'t>> {
    let ncc_m2f = ncc(f, m.warp(m2f)?, w.window)?;
    let ncc_f2m = ncc(m, f.warp(f2m)?, w.window)?;
    let smooth_sum = smooth(m2f)?.add(smooth(f2m)?)?;
    let mut total = ncc_m2f
        .add(ncc_f2m)?
        .neg()
        .add(smooth_sum.scale(w.smooth))?;
    if w.inverse_consistency > 0.0 {
        let ic = inverse_consistency(m2f, f2m)?.add(inverse_consistency(f2m, m2f)?)?;
        total = total.add(ic.scale(w.inverse_consistency))?;
    }
    Ok(CoarseLoss {
        total,
        ncc_m2f,
        ncc_f2m,
        smooth: smooth_sum,
    })
}

const SSIM_K1: f32 = 0.01;
const SSIM_K2: f32 = 0.03;
const MS_SSIM_WEIGHTS: [f32; 3] = [0.0448, 0.2856, 0.3001];

/// Mean SSIM and mean contrast-structure term of 2D images `[N, C, H, W]`
/// (11-tap Gaussian window, sigma 1.5, edge-replicating, data range 1).
pub fn ssim_terms<'t>(a: Var<'t>, b: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let shape = a.shape();
    if shape != b.shape() || shape.len() != 4 {
        return Err(Error::Shape(format!(
            "ssim: {:?} vs {:?}",
            shape,
            b.shape()
        )));
    }
    let k = gaussian_kernel(1.5, 5);
    let blur = |x: Var<'t>| -> Result<Var<'t>> {
        x.filter_axis(&k, 2, Boundary::Clamp)?
            .filter_axis(&k, 3, Boundary::Clamp)
    };
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mu_a = blur(a)?;
    let mu_b = blur(b)?;
    let mu_aa = mu_a.mul(mu_a)?;
    let mu_bb = mu_b.mul(mu_b)?;
    let mu_ab = mu_a.mul(mu_b)?;
    let var_a = blur(a.mul(a)?)?.sub(mu_aa)?;
    let var_b = blur(b.mul(b)?)?.sub(mu_bb)?;
    let cov = blur(a.mul(b)?)?.sub(mu_ab)?;
    let lum = mu_ab
        .scale(2.0)
        .add_scalar(c1)
        .div(mu_aa.add(mu_bb)?.add_scalar(c1))?;
    let cs = cov
        .scale(2.0)
        .add_scalar(c2)
        .div(var_a.add(var_b)?.add_scalar(c2))?;
    Ok((lum.mul(cs)?.mean(), cs.mean()))
}

pub fn ssim<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(ssim_terms(a, b)?.0)
}

/// Three-scale MS-SSIM with the standard first three weights renormalised to sum to one.
pub fn ms_ssim<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let shape = a.shape();
    let scales = MS_SSIM_WEIGHTS.len();
    if shape.len() != 4 || shape[2].min(shape[3]) >> (scales - 1) < 8 {
        return Err(Error::InvalidArgument(format!(
            "ms_ssim: image {shape:?} too small for {scales} scales"
        )));
    }
    let wsum: f32 = MS_SSIM_WEIGHTS.iter().sum();
    let (mut a, mut b) = (a, b);
    let mut acc: Option<Var<'t>> = None;
    for (s, &w) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (full, cs) = ssim_terms(a, b)?;
        let base = if s + 1 == scales { full } else { cs };
        let term = base.clamp_min(1e-6).log(0.0)?.scale(w / wsum);
        acc = Some(match acc {
            Some(t) => t.add(term)?,
            None => term,
        });
        if s + 1 < scales {
            a = a.avg_pool2()?;
            b = b.avg_pool2()?;
        }
    }
    Ok(acc.expect("at least one scale").exp())
}

/// Binary cross-entropy of the per-sample mean patch logit against a constant label.
pub fn patch_bce<'t>(logits: Var<'t>, target: f32) -> Result<Var<'t>> {
    Ok(logits.mean_rows()?.bce_with_logits(target).mean())
}

/// `(d_loss, g_adv)` from discriminator logits on real and generated pairs.
pub fn gan_losses<'t>(real: Var<'t>, fake: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let d = patch_bce(real, 1.0)?.add(patch_bce(fake, 0.0)?)?;
    Ok((d, patch_bce(fake, 1.0)?))
}

pub struct SrLoss<'t> {
    pub total: Var<'t>,
    pub adversarial: Var<'t>,
    pub l1: Var<'t>,
    pub ms_ssim: Var<'t>,
}

/// `g_adv + l1_w mean|target - output| + ssim_w (1 - ms_ssim(target, output))`.
pub fn sr_loss<'t>(
    output: Var<'t>,
    target: Var<'t>,
    g_adv: Var<'t>,
    l1_w: f32,
    ssim_w: f32,
) -> Result<SrLoss<'t>> {
    let l1 = target.sub(output)?.abs().mean();
    let ms = ms_ssim(target, output)?;
    let total = g_adv
        .add(l1.scale(l1_w))?
        .add(ms.neg().add_scalar(1.0).scale(ssim_w))?;
    Ok(SrLoss {
        total,
        adversarial: g_adv,
        l1,
        ms_ssim: ms,
    })
}

pub struct FineLoss<'t> {
    pub total: Var<'t>,
    pub ncc_moving: Var<'t>,
    pub ncc_prior: Option<Var<'t>>,
    pub smooth: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct FineWeights {
    pub alpha: f32,
    pub smooth: f32,
    pub window: usize,
    /// Whether the prior similarity term is included.
    pub use_prior: bool,
}

/// `-alpha ncc(f, m∘phi) - (1 - alpha) ncc(f, p∘phi) + smooth_w smooth(phi)`.
pub fn fine_loss<'t>(
    fixed: Var<'t>,
    moving: Var<'t>,
    prior: Var<'t>,
    phi_star: Var<'t>,
    w: FineWeights,
) -> Result<FineLoss<'t>> {
    let ncc_moving = ncc(fixed, moving.warp(phi_star)?, w.window)?;
    let sm = smooth(phi_star)?;
    let mut total = ncc_moving.scale(-w.alpha).add(sm.scale(w.smooth))?;
    let ncc_prior = if w.use_prior {
        let t = ncc(fixed, prior.warp(phi_star)?, w.window)?;
        total = total.add(t.scale(-(1.0 - w.alpha)))?;
        Some(t)
    } else {
        None
    };
    Ok(FineLoss {
        total,
        ncc_moving,
        ncc_prior,
        smooth: sm,
    })
}

/// Evaluates a scalar loss on plain tensors (no gradients).
pub fn eval_scalar<F>(inputs: &[&Tensor], f: F) -> Result<f32>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    Ok(f(&tape, &vars)?.item())
}
