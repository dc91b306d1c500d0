//! The three trainable models: a bidirectional coarse registration U-Net, a
//! 2.5D super-resolution generator with its patch discriminator, and the
//! dual-encoder residual registration network.

mod coarse;
mod fine;
mod sr;
mod unet;

pub use coarse::{CoarseArch, CoarseDirNet};
pub use fine::{FineArch, FineDirNet};
pub use sr::{sr_input_stack, SrArch, SrDiscriminator, SrGenerator, STACK_RADIUS};

use rand::Rng;

use crate::autograd::{BoundParams, ParamSet, Var};
use crate::error::Result;

pub const LEAKY_SLOPE: f32 = 0.2;
const NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
    spatial: usize,
}

impl Conv {
    /// Randomly initialised `k^spatial` convolution with "same" padding.
    pub(crate) fn new(
        p: &mut ParamSet,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        stride: usize,
        spatial: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let (w, b) = p.add_conv(name, cout, cin, &vec![k; spatial], rng);
        Self {
            w,
            b,
            stride,
            pad: k / 2,
            spatial,
        }
    }

    pub(crate) fn zero(
        p: &mut ParamSet,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        spatial: usize,
    ) -> Self {
        let (w, b) = p.add_zero_conv(name, cout, cin, &vec![k; spatial]);
        Self {
            w,
            b,
            stride: 1,
            pad: k / 2,
            spatial,
        }
    }

    pub(crate) fn apply<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (w, b) = (p.get(self.w), Some(p.get(self.b)));
        if self.spatial == 3 {
            x.conv3d(w, b, self.stride, self.pad)
        } else {
            x.conv2d(w, b, self.stride, self.pad)
        }
    }

    /// Output channels, read back from the weight shape.
    pub(crate) fn out_channels(p: &ParamSet, name: &str) -> Option<usize> {
        let key = format!("{name}.weight");
        let i = p.names().iter().position(|n| *n == key)?;
        Some(p.get(i).shape()[0])
    }
}

/// Instance normalisation followed by a learnable per-channel affine map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Norm {
    gamma: usize,
    beta: usize,
}

impl Norm {
    pub(crate) fn new(p: &mut ParamSet, name: &str, channels: usize) -> Self {
        let (gamma, beta) = p.add_norm(name, channels);
        Self { gamma, beta }
    }

    pub(crate) fn apply<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.instance_norm(NORM_EPS)?
            .channel_affine(p.get(self.gamma), p.get(self.beta))
    }
}
