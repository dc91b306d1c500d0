use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::unet::{widths_of, UNet, UNetSpec};
use crate::autograd::{concat, BoundParams, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::volume::{DisplacementField, PhiPair, Volume};

const PREFIX: &str = "coarse";
pub const COARSE_KIND: &str = "coarse_dir";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseArch {
    /// Encoder widths, coarsest last; the decoder mirrors them.
    pub widths: [usize; 4],
}

impl Default for CoarseArch {
    fn default() -> Self {
        Self {
            widths: [16, 32, 32, 32],
        }
    }
}

/// Bidirectional registration network: `(moving, fixed)` in, six field channels out.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseDirNet {
    pub params: ParamSet,
    arch: CoarseArch,
    net: UNet,
}

impl CoarseDirNet {
    pub fn new(arch: CoarseArch, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = UNetSpec {
            prefix: PREFIX,
            in_channels: 2,
            widths: arch.widths,
            aux: None,
            out_channels: 6,
        };
        let net = UNet::new(&mut params, &spec, &mut rng)?;
        Ok(Self { params, arch, net })
    }

    pub fn arch(&self) -> CoarseArch {
        self.arch
    }

    /// `[1, 6, D, H, W]`: channels 0..3 are the moving-to-fixed field, 3..6 the reverse.
    pub fn forward<'t>(
        &self,
        p: &BoundParams<'t>,
        moving: Var<'t>,
        fixed: Var<'t>,
    ) -> Result<Var<'t>> {
        if moving.shape() != fixed.shape() {
            return Err(Error::GridMismatch(format!(
                "coarse: {:?} vs {:?}",
                moving.shape(),
                fixed.shape()
            )));
        }
        self.net.forward(p, concat(&[moving, fixed], 1)?, None)
    }

    /// Splits the six-channel output into `(m2f, f2m)`.
    pub fn split<'t>(out: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        Ok((out.slice(1, 0, 3)?, out.slice(1, 3, 3)?))
    }

    /// Inference on volumes.
    pub fn register(&self, fixed: &Volume, moving: &Volume) -> Result<PhiPair> {
        fixed.grid().ensure_same(moving.grid(), "coarse_forward")?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward(
            &p,
            tape.constant(moving.to_tensor()),
            tape.constant(fixed.to_tensor()),
        )?;
        let (m2f, f2m) = Self::split(out)?;
        let g = *fixed.grid();
        PhiPair::new(
            DisplacementField::from_tensor(g, &m2f.value())?,
            DisplacementField::from_tensor(g, &f2m.value())?,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, COARSE_KIND)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let loaded = ParamSet::load(path, COARSE_KIND)?;
        let widths = widths_of(&loaded, PREFIX, "enc").ok_or_else(|| {
            Error::Checkpoint(format!("{}: missing encoder weights", path.display()))
        })?;
        let mut net = Self::new(CoarseArch { widths }, 0)?;
        net.params.assign(loaded)?;
        Ok(net)
    }
}
