//! Volume-level warping, field resampling, composition and the residual update.
//!
//! These share their kernels with the differentiable tensor operators, so a
//! volume warped here is bitwise equal to the same warp recorded on a tape.

use crate::autograd::{trilinear_sample, warp_forward, Boundary, Tape, Tensor};
use crate::error::{Error, Result};
use crate::volume::{DisplacementField, Grid3, Volume};

/// `out(x) = src(x + phi(x))`, trilinear, clamped at the border.
pub fn warp_volume(src: &Volume, phi: &DisplacementField) -> Result<Volume> {
    src.grid().ensure_same(phi.grid(), "warp")?;
    let g = *src.grid();
    let dims = [g.nz(), g.ny(), g.nx()];
    let out = warp_forward(src.data(), 1, dims, phi.to_tensor().data());
    Volume::new(g, out)
}

fn check_upsampling(from: &Grid3, to: &Grid3) -> Result<()> {
    if from.dims().iter().zip(to.dims()).any(|(&a, b)| b < a) {
        return Err(Error::InvalidArgument(format!(
            "cannot downsample from {:?} to {:?}",
            from.dims(),
            to.dims()
        )));
    }
    Ok(())
}

/// Per-axis factor `(target - 1) / (source - 1)` in field channel order (x, y, z).
pub fn dvf_scale(from: &Grid3, to: &Grid3) -> [f32; 3] {
    let f = |a: usize, b: usize| {
        if a > 1 {
            (b - 1) as f32 / (a - 1) as f32
        } else {
            1.0
        }
    };
    let (s, t) = (from.dims(), to.dims());
    [f(s[0], t[0]), f(s[1], t[1]), f(s[2], t[2])]
}

/// Trilinear (aligned corners) resampling of a volume onto `target`.
pub fn resample_volume(v: &Volume, target: &Grid3) -> Result<Volume> {
    let tape = Tape::new();
    let out =
        tape.constant(v.to_tensor())
            .resample_linear(&[target.nz(), target.ny(), target.nx()])?;
    Volume::from_tensor(*target, &out.value())
}

/// Trilinear upsampling of each component, then scaling so voxel-unit
/// displacements keep their physical length on the finer grid.
pub fn upsample_dvf(phi: &DisplacementField, target: &Grid3) -> Result<DisplacementField> {
    check_upsampling(phi.grid(), target)?;
    let tape = Tape::new();
    let out = tape
        .constant(phi.to_tensor())
        .resample_linear(&[target.nz(), target.ny(), target.nx()])?
        .scale_channels(&dvf_scale(phi.grid(), target))?;
    DisplacementField::from_tensor(*target, &out.value())
}

/// `(a ∘ b)(x) = b(x) + a(x + b(x))`.
pub fn compose(a: &DisplacementField, b: &DisplacementField) -> Result<DisplacementField> {
    a.grid().ensure_same(b.grid(), "compose")?;
    let g = *a.grid();
    let dims = [g.nz(), g.ny(), g.nx()];
    let at = a.to_tensor();
    let sampled = warp_forward(at.data(), 3, dims, b.to_tensor().data());
    let sampled = DisplacementField::from_tensor(g, &Tensor::from_vec(g.tensor_shape(3), sampled))?;
    let data = b
        .data()
        .iter()
        .zip(sampled.data())
        .map(|(x, y)| x + y)
        .collect();
    DisplacementField::new(g, data)
}

/// `phi* = v + phi_tilde`, componentwise.
pub fn residual_update(
    v: &DisplacementField,
    phi_tilde: &DisplacementField,
) -> Result<DisplacementField> {
    v.grid().ensure_same(phi_tilde.grid(), "residual_update")?;
    let data = v
        .data()
        .iter()
        .zip(phi_tilde.data())
        .map(|(a, b)| a + b)
        .collect();
    DisplacementField::new(*v.grid(), data)
}

/// `(r, phi*)` with `phi* = v + phi_tilde`, where `r` is the residual snapped
/// to the nearest value satisfying both `phi* - phi_tilde == r` and
/// `r + phi_tilde == phi*` exactly in `f32`. `r` differs from `v` by at most
/// a few units in the last place.
pub fn split_residual(
    v: &DisplacementField,
    phi_tilde: &DisplacementField,
) -> Result<(DisplacementField, DisplacementField)> {
    v.grid().ensure_same(phi_tilde.grid(), "split_residual")?;
    let mut r = Vec::with_capacity(v.data().len());
    let mut total = Vec::with_capacity(v.data().len());
    for (&a, &b) in v.data().iter().zip(phi_tilde.data()) {
        let mut s = a + b;
        let mut d = s - b;
        for _ in 0..8 {
            let s2 = d + b;
            if s2 == s {
                break;
            }
            s = s2;
            d = s - b;
        }
        r.push(d);
        total.push(s);
    }
    let g = *v.grid();
    Ok((
        DisplacementField::new(g, r)?,
        DisplacementField::new(g, total)?,
    ))
}

/// `a - b`, componentwise.
pub fn field_difference(a: &DisplacementField, b: &DisplacementField) -> Result<DisplacementField> {
    a.grid().ensure_same(b.grid(), "field_difference")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    DisplacementField::new(*a.grid(), data)
}

/// Per-voxel Euclidean norm.
pub fn dvf_magnitude(phi: &DisplacementField) -> Volume {
    let data = phi
        .vectors()
        .map(|[x, y, z]| (x * x + y * y + z * z).sqrt())
        .collect();
    Volume::new(*phi.grid(), data).expect("norms of finite vectors are finite")
}

/// Samples a field at a continuous position `(x, y, z)` in voxels (clamped).
pub fn sample_field(phi: &DisplacementField, p: [f32; 3]) -> [f32; 3] {
    let g = phi.grid();
    let t = phi.to_tensor();
    let dims = [g.nz(), g.ny(), g.nx()];
    let nv = g.len();
    let c = [p[2], p[1], p[0]];
    std::array::from_fn(|k| trilinear_sample(&t.data()[k * nv..(k + 1) * nv], dims, c).0)
}

/// Normalised Gaussian taps with standard deviation `sigma` (in voxels).
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f32> {
    let w: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| (v / s) as f32).collect()
}

/// Separable in-plane Gaussian blur with the given FWHM in voxels (edge-replicating).
pub fn blur_in_plane(v: &Volume, fwhm: f64) -> Result<Volume> {
    if fwhm <= 0.0 {
        return Ok(v.clone());
    }
    let sigma = fwhm / (8.0 * 2f64.ln()).sqrt();
    let k = gaussian_kernel(sigma, (3.0 * sigma).ceil() as usize);
    let tape = Tape::new();
    let out = tape
        .constant(v.to_tensor())
        .filter_axis(&k, 4, Boundary::Clamp)?
        .filter_axis(&k, 3, Boundary::Clamp)?;
    Volume::from_tensor(*v.grid(), &out.value())
}
