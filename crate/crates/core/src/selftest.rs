//! Built-in invariant suite: gradient checks, warp identities, loss extrema
//! and metric sanity on small random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{check_gradient, concat, Boundary, Tape, Tensor, Var};
use crate::error::Result;
use crate::losses::{
    coarse_loss, fine_loss, gan_losses, inverse_consistency, ms_ssim, ncc, smooth, sr_loss, ssim,
    CoarseWeights, FineWeights,
};
use crate::metrics::{nmi, psnr_from_mse, rmse, NMI_BINS};
use crate::volume::{DisplacementField, Grid3, Volume};
use crate::warp::{residual_update, split_residual, warp_volume};

const GRAD_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn rand_t(seed: u64, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
}

/// Displacements whose sample points avoid voxel boundaries.
fn off_grid_field(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n)
            .map(|_| rng.random_range(-2i32..2) as f32 + rng.random_range(0.15..0.85))
            .collect(),
    )
}

fn project<'t>(tape: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
    let r = tape.constant(rand_t(99, &y.shape(), -1.0, 1.0));
    Ok(y.mul(r)?.sum())
}

fn grad<F>(name: &'static str, inputs: &[Tensor], h: f32, f: F) -> CheckResult
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    match check_gradient(inputs, h, 0, f) {
        Ok(c) => CheckResult {
            name,
            passed: c.passes(GRAD_TOL),
            detail: format!("relative error {:.2e}", c.rel_error),
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn exact(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult {
            name,
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Values at least 0.05 away from every kink at -0.5, 0 and 0.5.
fn off_kinks(seed: u64, shape: &[usize]) -> Tensor {
    rand_t(seed, shape, -1.0, 1.0).map(|v| {
        let k = (v * 2.0).round() / 2.0;
        if (v - k).abs() < 0.05 {
            k + 0.1
        } else {
            v
        }
    })
}

fn primitive_checks() -> Vec<CheckResult> {
    let a = rand_t(40, &[3, 4], 0.2, 1.5);
    let b = rand_t(41, &[3, 4], 0.2, 1.5);
    let k = off_kinks(42, &[3, 4]);
    let t3 = rand_t(43, &[2, 3, 4], -1.0, 1.0);
    let t3b = rand_t(44, &[2, 2, 4], -1.0, 1.0);
    let x = rand_t(1, &[1, 2, 5, 6, 7], -1.0, 1.0);
    let w = rand_t(2, &[3, 2, 3, 3, 3], -0.5, 0.5);
    let bias = rand_t(45, &[3], -0.5, 0.5);
    let x2 = rand_t(46, &[2, 5, 8, 8], -1.0, 1.0);
    let w2 = rand_t(47, &[4, 5, 3, 3], -0.5, 0.5);
    let x4 = rand_t(48, &[1, 2, 4, 6, 6], -1.0, 1.0);
    let gamma = rand_t(49, &[2], 0.5, 1.5);
    let beta = rand_t(50, &[2], -0.5, 0.5);
    let stack = rand_t(51, &[2, 1, 4, 5, 5], -1.0, 1.0);
    let s = Tensor::scalar(0.7);
    let binary = |name, f: for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>>| {
        grad(name, &[a.clone(), b.clone()], 1e-3, move |t, v| {
            project(t, f(v[0], v[1])?)
        })
    };
    let unary = |name, input: &Tensor, f: for<'t> fn(Var<'t>) -> Result<Var<'t>>| {
        grad(name, &[input.clone()], 1e-3, move |t, v| {
            project(t, f(v[0])?)
        })
    };
    vec![
        binary("grad add", |x, y| x.add(y)),
        binary("grad sub", |x, y| x.sub(y)),
        binary("grad mul", |x, y| x.mul(y)),
        binary("grad div", |x, y| x.div(y)),
        grad("grad broadcast", &[a.clone(), s], 1e-3, |t, v| {
            project(t, v[0].mul(v[1])?)
        }),
        unary("grad neg", &a, |x| Ok(x.neg())),
        unary("grad scale", &a, |x| Ok(x.scale(-1.7))),
        unary("grad add_scalar", &a, |x| Ok(x.add_scalar(0.3))),
        unary("grad exp", &a, |x| Ok(x.exp())),
        unary("grad log", &a, |x| x.log(1e-6)),
        unary("grad sqrt", &a, |x| Ok(x.sqrt())),
        unary("grad pow2", &a, |x| Ok(x.pow2())),
        unary("grad sigmoid", &a, |x| Ok(x.sigmoid())),
        unary("grad tanh", &a, |x| Ok(x.tanh())),
        unary("grad relu", &k, |x| Ok(x.relu())),
        unary("grad leaky_relu", &k, |x| Ok(x.leaky_relu(0.2))),
        unary("grad abs", &k, |x| Ok(x.abs())),
        unary("grad clamp", &k, |x| Ok(x.clamp(-0.5, 0.5))),
        unary("grad clamp_min", &k, |x| Ok(x.clamp_min(0.0))),
        grad("grad bce_with_logits", &[k.clone()], 1e-3, |_, v| {
            Ok(v[0].bce_with_logits(1.0).mean())
        }),
        grad("grad sum", &[a.clone()], 1e-3, |_, v| Ok(v[0].pow2().sum())),
        grad("grad mean", &[a.clone()], 1e-3, |_, v| {
            Ok(v[0].pow2().mean())
        }),
        unary("grad mean_rows", &t3, |x| x.mean_rows()),
        grad("grad concat", &[t3.clone(), t3b], 1e-3, |t, v| {
            project(t, concat(&[v[0], v[1]], 1)?)
        }),
        unary("grad slice", &t3, |x| x.slice(2, 1, 2)),
        unary("grad pad", &t3, |x| x.pad(&[(0, 0), (1, 2), (0, 1)])),
        unary("grad reshape", &t3, |x| x.reshape(&[6, 4])),
        grad(
            "grad conv3d",
            &[x.clone(), w.clone(), bias.clone()],
            1e-2,
            |t, v| project(t, v[0].conv3d(v[1], Some(v[2]), 1, 1)?),
        ),
        grad("grad conv3d stride 2", &[x.clone(), w], 1e-2, |t, v| {
            project(t, v[0].conv3d(v[1], None, 2, 1)?)
        }),
        grad("grad conv2d", &[x2, w2], 1e-2, |t, v| {
            project(t, v[0].conv2d(v[1], None, 2, 1)?)
        }),
        unary("grad upsample_nearest", &x, |x| {
            x.upsample_nearest(&[1, 2, 2])
        }),
        unary("grad avg_pool2", &x, |x| x.avg_pool2()),
        unary("grad instance_norm", &x, |x| x.instance_norm(1e-5)),
        unary("grad resample_linear", &x, |x| {
            x.resample_linear(&[6, 11, 9])
        }),
        unary("grad resize_axis", &x, |x| x.resize_axis(1, 9)),
        unary("grad filter_axis", &x4, |x| {
            x.filter_axis(&[0.2, 0.5, 1.0, 0.5, 0.2], 3, Boundary::Clamp)
        }),
        unary("grad scale_channels", &x, |x| {
            x.scale_channels(&[2.0, -0.5])
        }),
        grad(
            "grad channel_affine",
            &[x.clone(), gamma, beta],
            1e-3,
            |t, v| project(t, v[0].channel_affine(v[1], v[2])?),
        ),
        unary("grad slice_stack", &stack, |x| x.slice_stack(2)),
    ]
}

fn gradient_checks() -> Vec<CheckResult> {
    let img = |s| rand_t(s, &[1, 1, 6, 7, 8], 0.0, 1.0);
    let field = |s| off_grid_field(s, &[1, 3, 6, 7, 8]);
    let cw = CoarseWeights {
        smooth: 4.0,
        inverse_consistency: 0.5,
        window: 5,
    };
    let fw = FineWeights {
        alpha: 0.35,
        smooth: 5.0,
        window: 5,
        use_prior: true,
    };
    let a2 = rand_t(3, &[1, 1, 32, 32], 0.2, 0.8);
    let b2 = a2.map(|v| 0.8 * v + 0.15);
    let logits = rand_t(52, &[2, 1, 4, 4], -1.0, 1.0);
    let mut out = primitive_checks();
    out.extend([
        grad(
            "grad warp",
            &[rand_t(4, &[1, 2, 6, 7, 8], 0.0, 1.0), field(5)],
            1e-3,
            |t, v| project(t, v[0].warp(v[1])?),
        ),
        grad("grad ncc", &[img(6), img(7)], 1e-3, |_, v| {
            ncc(v[0], v[1], 5)
        }),
        grad(
            "grad smooth",
            &[rand_t(8, &[1, 3, 5, 6, 7], -1.0, 1.0)],
            1e-2,
            |_, v| smooth(v[0]),
        ),
        grad(
            "grad inverse_consistency",
            &[field(17), field(18)],
            1e-3,
            |_, v| inverse_consistency(v[0], v[1]),
        ),
        grad(
            "grad coarse_loss",
            &[img(9), img(10), field(11), field(12)],
            1e-3,
            move |_, v| Ok(coarse_loss(v[0], v[1], v[2], v[3], cw)?.total),
        ),
        grad(
            "grad fine_loss",
            &[img(13), img(14), img(15), field(16)],
            1e-3,
            move |_, v| Ok(fine_loss(v[0], v[1], v[2], v[3], fw)?.total),
        ),
        grad("grad ssim", &[a2.clone(), b2.clone()], 1e-3, |_, v| {
            ssim(v[0], v[1])
        }),
        grad("grad ms_ssim", &[a2.clone(), b2.clone()], 1e-3, |_, v| {
            ms_ssim(v[0], v[1])
        }),
        grad(
            "grad discriminator loss",
            &[logits.clone(), logits.map(|v| -v)],
            1e-2,
            |_, v| Ok(gan_losses(v[0], v[1])?.0),
        ),
        grad(
            "grad generator adversarial loss",
            &[logits.clone(), logits.map(|v| -v)],
            1e-2,
            |_, v| Ok(gan_losses(v[0], v[1])?.1),
        ),
        grad(
            "grad sr_loss",
            &[a2.map(|v| 0.9 * v + 0.12), a2, logits],
            1e-3,
            |_, v| Ok(sr_loss(v[0], v[1], v[2].mean(), 10.0, 10.0)?.total),
        ),
    ]);
    out
}

fn warp_checks() -> Vec<CheckResult> {
    let g = Grid3::new([9, 8, 7], [1.0; 3]).expect("valid grid");
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let v = Volume::from_fn(g, |_, _, _| rng.random_range(0.0..1.0)).expect("finite");
    let v2 = v.clone();
    vec![
        exact("warp by zero field is exact", move || {
            Ok((
                warp_volume(&v, &DisplacementField::zeros(g))? == v,
                String::new(),
            ))
        }),
        exact("integer translation matches indexing", move || {
            let w = warp_volume(&v2, &DisplacementField::constant(g, [1.0, 2.0, -1.0]))?;
            let mut ok = true;
            for z in 1..7 {
                for y in 0..6 {
                    for x in 0..8 {
                        ok &= w.at(x, y, z) == v2.at(x + 1, y + 2, z - 1);
                    }
                }
            }
            Ok((ok, String::new()))
        }),
        exact("residual split is exact", move || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut f = || {
                DisplacementField::from_fn(g, |_, _, _| {
                    std::array::from_fn(|_| rng.random_range(-3.0..3.0))
                })
            };
            let (r, t) = (f()?, f()?);
            let (r, star) = split_residual(&r, &t)?;
            Ok((residual_update(&r, &t)? == star, String::new()))
        }),
    ]
}

fn loss_and_metric_checks() -> Vec<CheckResult> {
    let img = rand_t(30, &[1, 1, 8, 9, 10], 0.0, 1.0);
    let img2 = img.clone();
    let g = Grid3::new([16, 16, 16], [1.0; 3]).expect("valid grid");
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let v = Volume::from_fn(g, |_, _, _| rng.random_range(0.0..1.0)).expect("finite");
    vec![
        exact("coarse loss minimum", move || {
            let tape = Tape::new();
            let m = tape.constant(img.clone());
            let z = tape.constant(Tensor::zeros(&[1, 3, 8, 9, 10]));
            let cw = CoarseWeights {
                smooth: 4.0,
                inverse_consistency: 0.0,
                window: 9,
            };
            let l = coarse_loss(m, m, z, z, cw)?.total.item();
            Ok(((l + 2.0).abs() < 1e-4, format!("{l}")))
        }),
        exact("fine loss minimum", move || {
            let tape = Tape::new();
            let m = tape.constant(img2.clone());
            let z = tape.constant(Tensor::zeros(&[1, 3, 8, 9, 10]));
            let fw = FineWeights {
                alpha: 0.35,
                smooth: 5.0,
                window: 9,
                use_prior: true,
            };
            let l = fine_loss(m, m, m, z, fw)?.total.item();
            Ok(((l + 1.0).abs() < 1e-4, format!("{l}")))
        }),
        exact("metric identities", move || {
            let n = nmi(&v, &v, NMI_BINS)?;
            let ok =
                rmse(&v, &v)? == 0.0 && (n - 2.0).abs() < 1e-9 && psnr_from_mse(0.01, 1.0) == 20.0;
            Ok((ok, format!("nmi(x, x) = {n}")))
        }),
    ]
}

/// Runs every check; never panics.
pub fn run() -> Vec<CheckResult> {
    let mut out = gradient_checks();
    out.extend(warp_checks());
    out.extend(loss_and_metric_checks());
    out
}
