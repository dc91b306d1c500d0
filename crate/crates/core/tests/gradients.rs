use cosf_core::autograd::{check_gradient, concat, Boundary, Tape, Tensor, Var};
use cosf_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;

fn rand_t(seed: u64, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
}

/// Values bounded away from zero, for kinked activations.
fn away_from_zero(seed: u64, shape: &[usize]) -> Tensor {
    rand_t(seed, shape, -1.0, 1.0).map(|v| {
        if v.abs() < 0.05 {
            v + 0.1 * v.signum() + 0.1
        } else {
            v
        }
    })
}

/// `<r, y>` for a fixed random `r`.
fn project<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let r = tape.constant(rand_t(seed, &y.shape(), -1.0, 1.0));
    Ok(y.mul(r)?.sum())
}

fn assert_check<F>(name: &str, inputs: &[Tensor], h: f32, f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    for seed in 0..3 {
        let c = check_gradient(inputs, h, seed, &f).unwrap();
        assert!(c.passes(TOL), "{name} seed {seed}: {c:?}");
    }
}

#[test]
fn elementwise_ops() {
    let a = rand_t(1, &[3, 4], 0.2, 1.5);
    let b = rand_t(2, &[3, 4], 0.2, 1.5);
    assert_check("add", &[a.clone(), b.clone()], 1e-2, |t, v| {
        project(t, v[0].add(v[1])?, 9)
    });
    assert_check("sub", &[a.clone(), b.clone()], 1e-2, |t, v| {
        project(t, v[0].sub(v[1])?, 9)
    });
    assert_check("mul", &[a.clone(), b.clone()], 1e-2, |t, v| {
        project(t, v[0].mul(v[1])?, 9)
    });
    assert_check("div", &[a.clone(), b.clone()], 1e-3, |t, v| {
        project(t, v[0].div(v[1])?, 9)
    });
    assert_check("exp", &[a.clone()], 1e-3, |t, v| project(t, v[0].exp(), 9));
    assert_check("log", &[a.clone()], 1e-3, |t, v| {
        project(t, v[0].log(1e-6)?, 9)
    });
    assert_check("sqrt", &[a.clone()], 1e-3, |t, v| {
        project(t, v[0].sqrt(), 9)
    });
    assert_check("pow2", &[a.clone()], 1e-2, |t, v| {
        project(t, v[0].pow2(), 9)
    });
    assert_check("sigmoid", &[a.clone()], 1e-3, |t, v| {
        project(t, v[0].sigmoid(), 9)
    });
    assert_check("tanh", &[a.clone()], 1e-3, |t, v| {
        project(t, v[0].tanh(), 9)
    });
    let s = Tensor::scalar(0.7);
    assert_check("broadcast", &[a.clone(), s], 1e-2, |t, v| {
        project(t, v[0].mul(v[1])?, 9)
    });
    let k = away_from_zero(3, &[3, 4]);
    assert_check("relu", &[k.clone()], 1e-3, |t, v| {
        project(t, v[0].relu(), 9)
    });
    assert_check("leaky_relu", &[k.clone()], 1e-3, |t, v| {
        project(t, v[0].leaky_relu(0.2), 9)
    });
    assert_check("abs", &[k.clone()], 1e-3, |t, v| project(t, v[0].abs(), 9));
    assert_check("bce", &[k], 1e-2, |_, v| {
        Ok(v[0].bce_with_logits(1.0).mean())
    });
}

#[test]
fn shape_ops() {
    let a = rand_t(4, &[2, 3, 4], -1.0, 1.0);
    let b = rand_t(5, &[2, 2, 4], -1.0, 1.0);
    assert_check("concat", &[a.clone(), b], 1e-2, |t, v| {
        project(t, concat(&[v[0], v[1]], 1)?, 9)
    });
    assert_check("slice", &[a.clone()], 1e-2, |t, v| {
        project(t, v[0].slice(2, 1, 2)?, 9)
    });
    assert_check("pad", &[a.clone()], 1e-2, |t, v| {
        project(t, v[0].pad(&[(0, 0), (1, 2), (0, 1)])?, 9)
    });
    assert_check("reshape", &[a.clone()], 1e-2, |t, v| {
        project(t, v[0].reshape(&[6, 4])?, 9)
    });
    assert_check("mean", &[a], 1e-2, |_, v| Ok(v[0].pow2().mean()));
}

#[test]
fn convolutions() {
    let x = rand_t(6, &[2, 2, 5, 6, 7], -1.0, 1.0);
    let w = rand_t(7, &[3, 2, 3, 3, 3], -0.5, 0.5);
    let b = rand_t(8, &[3], -0.5, 0.5);
    for stride in [1, 2] {
        assert_check(
            "conv3d",
            &[x.clone(), w.clone(), b.clone()],
            1e-2,
            move |t, v| project(t, v[0].conv3d(v[1], Some(v[2]), stride, 1)?, 9),
        );
    }
    let x2 = rand_t(9, &[2, 5, 8, 8], -1.0, 1.0);
    let w2 = rand_t(10, &[4, 5, 3, 3], -0.5, 0.5);
    assert_check("conv2d", &[x2, w2], 1e-2, |t, v| {
        project(t, v[0].conv2d(v[1], None, 2, 1)?, 9)
    });
}

#[test]
fn spatial_ops() {
    let x = rand_t(11, &[1, 2, 4, 6, 6], -1.0, 1.0);
    assert_check("upsample", &[x.clone()], 1e-2, |t, v| {
        project(t, v[0].upsample_nearest(&[1, 2, 2])?, 9)
    });
    assert_check("avg_pool2", &[x.clone()], 1e-2, |t, v| {
        project(t, v[0].avg_pool2()?, 9)
    });
    assert_check("instance_norm", &[x.clone()], 1e-2, |t, v| {
        project(t, v[0].instance_norm(1e-5)?, 9)
    });
    assert_check("resample", &[x.clone()], 1e-2, |t, v| {
        project(t, v[0].resample_linear(&[7, 11, 5])?, 9)
    });
    assert_check("scale_channels", &[x.clone()], 1e-2, |t, v| {
        project(t, v[0].scale_channels(&[2.0, -0.5])?, 9)
    });
    for (axis, bnd) in [
        (2, Boundary::Zero),
        (3, Boundary::Clamp),
        (4, Boundary::Zero),
    ] {
        assert_check("filter_axis", &[x.clone()], 1e-2, move |t, v| {
            project(
                t,
                v[0].filter_axis(&[0.2, 0.5, 1.0, 0.5, 0.2], axis, bnd)?,
                9,
            )
        });
    }
    let (g, b) = (rand_t(15, &[2], 0.5, 1.5), rand_t(16, &[2], -0.5, 0.5));
    assert_check("channel_affine", &[x.clone(), g, b], 1e-2, |t, v| {
        project(t, v[0].channel_affine(v[1], v[2])?, 9)
    });
    let s = rand_t(12, &[2, 1, 4, 5, 5], -1.0, 1.0);
    assert_check("slice_stack", &[s], 1e-2, |t, v| {
        project(t, v[0].slice_stack(2)?, 9)
    });
}

/// Field whose sample points stay away from voxel boundaries, where
/// trilinear interpolation has kinks.
fn smooth_field(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n)
            .map(|_| rng.random_range(-2i32..2) as f32 + rng.random_range(0.15..0.85))
            .collect(),
    )
}

#[test]
fn warp_operator() {
    let src = rand_t(13, &[1, 2, 6, 7, 8], 0.0, 1.0);
    let phi = smooth_field(14, &[1, 3, 6, 7, 8]);
    assert_check("warp", &[src, phi], 1e-3, |t, v| {
        project(t, v[0].warp(v[1])?, 9)
    });
}

mod loss_terms {
    use super::*;
    use cosf_core::losses::{
        coarse_loss, fine_loss, gan_losses, inverse_consistency, ms_ssim, ncc, smooth, sr_loss,
        ssim, CoarseWeights, FineWeights,
    };

    #[test]
    fn ncc_and_smooth() {
        let a = rand_t(20, &[1, 1, 6, 7, 8], 0.0, 1.0);
        let b = rand_t(21, &[1, 1, 6, 7, 8], 0.0, 1.0);
        assert_check("ncc", &[a, b], 1e-3, |_, v| ncc(v[0], v[1], 5));
        let phi = rand_t(22, &[1, 3, 5, 6, 7], -1.0, 1.0);
        assert_check("smooth", &[phi], 1e-2, |_, v| smooth(v[0]));
    }

    #[test]
    fn coarse_objective() {
        let m = rand_t(23, &[1, 1, 6, 7, 8], 0.0, 1.0);
        let f = rand_t(24, &[1, 1, 6, 7, 8], 0.0, 1.0);
        let p1 = smooth_field(25, &[1, 3, 6, 7, 8]);
        let p2 = smooth_field(26, &[1, 3, 6, 7, 8]);
        let w = CoarseWeights {
            smooth: 4.0,
            inverse_consistency: 0.0,
            window: 5,
        };
        assert_check(
            "coarse_loss",
            &[m, f, p1.clone(), p2.clone()],
            1e-3,
            move |_, v| Ok(coarse_loss(v[0], v[1], v[2], v[3], w)?.total),
        );
        assert_check("inverse_consistency", &[p1, p2], 1e-3, |_, v| {
            inverse_consistency(v[0], v[1])
        });
    }

    #[test]
    fn fine_objective() {
        let f = rand_t(27, &[1, 1, 5, 8, 8], 0.0, 1.0);
        let m = rand_t(28, &[1, 1, 5, 8, 8], 0.0, 1.0);
        let p = rand_t(29, &[1, 1, 5, 8, 8], 0.0, 1.0);
        let phi = smooth_field(30, &[1, 3, 5, 8, 8]);
        let w = FineWeights {
            alpha: 0.35,
            smooth: 5.0,
            window: 5,
            use_prior: true,
        };
        assert_check("fine_loss", &[f, m, p, phi], 1e-3, move |_, v| {
            Ok(fine_loss(v[0], v[1], v[2], v[3], w)?.total)
        });
    }

    #[test]
    fn structural_similarity() {
        let a = rand_t(31, &[1, 1, 12, 13], 0.0, 1.0);
        let b = rand_t(32, &[1, 1, 12, 13], 0.0, 1.0);
        assert_check("ssim", &[a, b], 1e-3, |_, v| ssim(v[0], v[1]));
        let a = rand_t(33, &[1, 1, 32, 32], 0.2, 0.8);
        let b = a.map(|x| x * 0.8 + 0.1);
        let b = Tensor::from_vec(
            b.shape().to_vec(),
            b.data()
                .iter()
                .zip(rand_t(34, &[1, 1, 32, 32], -0.1, 0.1).data())
                .map(|(x, n)| x + n)
                .collect(),
        );
        assert_check("ms_ssim", &[a, b], 1e-3, |_, v| ms_ssim(v[0], v[1]));
    }

    #[test]
    fn adversarial_and_sr() {
        let real = rand_t(35, &[3, 1, 4, 4], -2.0, 2.0);
        let fake = rand_t(36, &[3, 1, 4, 4], -2.0, 2.0);
        assert_check("d_loss", &[real.clone(), fake.clone()], 1e-2, |_, v| {
            Ok(gan_losses(v[0], v[1])?.0)
        });
        assert_check("g_adv", &[real.clone(), fake.clone()], 1e-2, |_, v| {
            Ok(gan_losses(v[0], v[1])?.1)
        });
        // the generator term ignores the real branch
        let tape = Tape::new();
        let r = tape.leaf(real);
        let f = tape.leaf(fake);
        let (_, g) = gan_losses(r, f).unwrap();
        let grads = tape.backward(g).unwrap();
        assert!(grads
            .get(r)
            .map_or(true, |t| t.data().iter().all(|&x| x == 0.0)));
        let out = rand_t(37, &[2, 1, 32, 32], 0.2, 0.8);
        // correlated pair keeps every contrast-structure term well above its floor
        let noise = rand_t(38, &[2, 1, 32, 32], -0.1, 0.1);
        let target = Tensor::from_vec(
            out.shape().to_vec(),
            out.data()
                .iter()
                .zip(noise.data())
                .map(|(o, n)| 0.8 * o + 0.1 + n)
                .collect(),
        );
        let logits = rand_t(39, &[2, 1, 4, 4], -1.0, 1.0);
        // keep |out - target| away from the L1 kink
        let out = Tensor::from_vec(
            out.shape().to_vec(),
            out.data()
                .iter()
                .zip(target.data())
                .map(|(&o, &t)| if (o - t).abs() < 0.01 { t + 0.02 } else { o })
                .collect(),
        );
        assert_check("sr_loss", &[out, target, logits], 1e-3, |_, v| {
            let g_adv = gan_losses(v[2], v[2])?.1;
            Ok(sr_loss(v[0], v[1], g_adv, 10.0, 10.0)?.total)
        });
    }
}
