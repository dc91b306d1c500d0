use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::unet::{widths_of, UNet, UNetSpec};
use crate::autograd::{concat, BoundParams, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::volume::{DisplacementField, Volume};
use crate::warp::split_residual;

const PREFIX: &str = "fine";
pub const FINE_KIND: &str = "fine_dir";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineArch {
    /// Widths of the path fed with the registration pair.
    pub widths: [usize; 4],
    /// Widths of the path fed with the aligned prior image.
    pub prior_widths: [usize; 4],
}

impl Default for FineArch {
    fn default() -> Self {
        Self {
            widths: [16, 32, 32, 32],
            prior_widths: [8, 16, 16, 16],
        }
    }
}

/// Residual registration network with separate encoders for the
/// `(fixed, coarsely warped moving)` pair and for the prior image.
#[derive(Clone, Debug, PartialEq)]
pub struct FineDirNet {
    pub params: ParamSet,
    arch: FineArch,
    net: UNet,
}

impl FineDirNet {
    pub fn new(arch: FineArch, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = UNetSpec {
            prefix: PREFIX,
            in_channels: 2,
            widths: arch.widths,
            aux: Some((1, arch.prior_widths)),
            out_channels: 3,
        };
        let net = UNet::new(&mut params, &spec, &mut rng)?;
        Ok(Self { params, arch, net })
    }

    pub fn arch(&self) -> FineArch {
        self.arch
    }

    /// Residual field `[1, 3, D, H, W]` from the fixed image, the moving image
    /// already warped by the coarse field, and the aligned prior.
    pub fn forward<'t>(
        &self,
        p: &BoundParams<'t>,
        fixed: Var<'t>,
        warped: Var<'t>,
        prior: Var<'t>,
    ) -> Result<Var<'t>> {
        let s = fixed.shape();
        if warped.shape() != s || prior.shape() != s {
            return Err(Error::GridMismatch(format!(
                "fine: fixed {s:?}, warped {:?}, prior {:?}",
                warped.shape(),
                prior.shape()
            )));
        }
        self.net
            .forward(p, concat(&[fixed, warped], 1)?, Some(prior))
    }

    /// `(v, v + phi_coarse)` for volumes on the high-resolution grid, with `v`
    /// snapped so the sum inverts exactly.
    pub fn refine(
        &self,
        fixed: &Volume,
        moving: &Volume,
        prior: &Volume,
        phi_coarse: &DisplacementField,
    ) -> Result<(DisplacementField, DisplacementField)> {
        let g = *fixed.grid();
        for other in [moving.grid(), prior.grid(), phi_coarse.grid()] {
            g.ensure_same(other, "fine_forward")?;
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let warped = tape
            .constant(moving.to_tensor())
            .warp(tape.constant(phi_coarse.to_tensor()))?;
        let v = self.forward(
            &p,
            tape.constant(fixed.to_tensor()),
            warped,
            tape.constant(prior.to_tensor()),
        )?;
        split_residual(&DisplacementField::from_tensor(g, &v.value())?, phi_coarse)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, FINE_KIND)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let loaded = ParamSet::load(path, FINE_KIND)?;
        let missing = || Error::Checkpoint(format!("{}: missing encoder weights", path.display()));
        let widths = widths_of(&loaded, PREFIX, "enc").ok_or_else(missing)?;
        let prior_widths = widths_of(&loaded, PREFIX, "aux").ok_or_else(missing)?;
        let mut net = Self::new(
            FineArch {
                widths,
                prior_widths,
            },
            0,
        )?;
        net.params.assign(loaded)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid3;

    #[test]
    fn zero_head_keeps_the_coarse_field() {
        let net = FineDirNet::new(
            FineArch {
                widths: [4, 4, 4, 4],
                prior_widths: [2, 2, 2, 2],
            },
            3,
        )
        .unwrap();
        let g = Grid3::new([12, 10, 4], [1.0; 3]).unwrap();
        let img = Volume::from_fn(g, |x, y, z| ((x + 2 * y + z) % 7) as f32 / 7.0).unwrap();
        let phi = DisplacementField::from_fn(g, |x, _, _| [0.1 * x as f32, -0.5, 0.25]).unwrap();
        let (v, star) = net.refine(&img, &img, &img, &phi).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert_eq!(star, phi);
        let dir = tempfile::tempdir().unwrap();
        net.save(&dir.path().join("f.ckpt")).unwrap();
        let back = FineDirNet::load(&dir.path().join("f.ckpt")).unwrap();
        assert_eq!(back.arch(), net.arch());
        assert_eq!(back.params, net.params);
    }
}
