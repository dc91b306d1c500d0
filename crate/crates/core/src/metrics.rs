//! Image similarity and displacement accuracy measures.

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::losses;
use crate::volume::{DisplacementField, Volume};

pub const NMI_BINS: usize = 64;

fn same_grid(a: &Volume, b: &Volume, what: &str) -> Result<()> {
    if a.grid().dims() != b.grid().dims() {
        return Err(Error::GridMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.grid().dims(),
            b.grid().dims()
        )));
    }
    Ok(())
}

fn mse(a: &Volume, b: &Volume) -> f64 {
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    s / a.data().len() as f64
}

pub fn rmse(a: &Volume, b: &Volume) -> Result<f64> {
    same_grid(a, b, "rmse")?;
    Ok(mse(a, b).sqrt())
}

/// `10 log10(peak^2 / mse)`, `+inf` at zero error.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr(a: &Volume, b: &Volume, peak: f64) -> Result<f64> {
    same_grid(a, b, "psnr")?;
    Ok(psnr_from_mse(mse(a, b), peak))
}

/// Transversal slices as a `[nz, 1, ny, nx]` batch.
fn slices(v: &Volume) -> Tensor {
    let [nx, ny, nz] = v.grid().dims();
    Tensor::from_vec(vec![nz, 1, ny, nx], v.data().to_vec())
}

/// 2D SSIM of every transversal slice, averaged over z.
pub fn ssim_volume(a: &Volume, b: &Volume) -> Result<f64> {
    same_grid(a, b, "ssim")?;
    Ok(losses::eval_scalar(&[&slices(a), &slices(b)], |_, v| losses::ssim(v[0], v[1]))? as f64)
}

/// Mean local NCC over cubic windows.
pub fn ncc_volume(a: &Volume, b: &Volume, window: usize) -> Result<f64> {
    same_grid(a, b, "ncc")?;
    Ok(
        losses::eval_scalar(&[&a.to_tensor(), &b.to_tensor()], |_, v| {
            losses::ncc(v[0], v[1], window)
        })? as f64,
    )
}

fn bin_of(v: f32, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) as f64 * bins as f64) as usize).min(bins - 1)
}

fn entropy(counts: &[u64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// `(H(A) + H(B)) / H(A, B)` from a joint histogram of equal-width bins over
/// `[0, 1]`, the last bin closed on the right. Two constant inputs give 2.
pub fn nmi(a: &Volume, b: &Volume, bins: usize) -> Result<f64> {
    same_grid(a, b, "nmi")?;
    if bins == 0 {
        return Err(Error::InvalidArgument("nmi needs at least one bin".into()));
    }
    let mut joint = vec![0u64; bins * bins];
    let (mut ha, mut hb) = (vec![0u64; bins], vec![0u64; bins]);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (i, j) = (bin_of(x, bins), bin_of(y, bins));
        joint[i * bins + j] += 1;
        ha[i] += 1;
        hb[j] += 1;
    }
    let n = a.data().len() as f64;
    let term = |c: u64| {
        if c == 0 {
            0.0
        } else {
            -(c as f64 / n) * (c as f64 / n).ln()
        }
    };
    // visit (i, j) and (j, i) together so swapping the inputs gives the same sum
    let mut hj = 0.0;
    for i in 0..bins {
        hj += term(joint[i * bins + i]);
        for j in i + 1..bins {
            hj += term(joint[i * bins + j]) + term(joint[j * bins + i]);
        }
    }
    if hj == 0.0 {
        return Ok(2.0);
    }
    Ok((entropy(&ha, n) + entropy(&hb, n)) / hj)
}

/// Mean and max Euclidean distance between displacement vectors, over the
/// voxels where `mask` is set (all voxels without a mask).
pub fn endpoint_error(
    phi: &DisplacementField,
    truth: &DisplacementField,
    mask: Option<&[bool]>,
) -> Result<(f64, f64)> {
    if phi.grid().dims() != truth.grid().dims() {
        return Err(Error::GridMismatch(format!(
            "endpoint_error: {:?} vs {:?}",
            phi.grid().dims(),
            truth.grid().dims()
        )));
    }
    if let Some(m) = mask {
        if m.len() != phi.grid().len() {
            return Err(Error::Shape(format!(
                "mask of {} voxels for {}",
                m.len(),
                phi.grid().len()
            )));
        }
    }
    let (mut sum, mut max, mut n) = (0.0f64, 0.0f64, 0usize);
    for (k, (a, b)) in phi.vectors().zip(truth.vectors()).enumerate() {
        if mask.is_some_and(|m| !m[k]) {
            continue;
        }
        let d = (0..3)
            .map(|c| (a[c] as f64 - b[c] as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        sum += d;
        max = max.max(d);
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("endpoint_error: empty mask".into()));
    }
    Ok((sum / n as f64, max))
}

/// Mean vector norm over the masked voxels.
pub fn mean_magnitude(phi: &DisplacementField, mask: Option<&[bool]>) -> Result<f64> {
    endpoint_error(phi, &DisplacementField::zeros(*phi.grid()), mask).map(|(m, _)| m)
}
