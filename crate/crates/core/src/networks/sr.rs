use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Conv, Norm, LEAKY_SLOPE};
use crate::autograd::{concat, BoundParams, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::Volume;

pub const GENERATOR_KIND: &str = "sr_generator";
pub const DISCRIMINATOR_KIND: &str = "sr_discriminator";
/// Neighbouring slices on each side of the centre slice in the generator input.
pub const STACK_RADIUS: usize = 2;
const STACK: usize = 2 * STACK_RADIUS + 1;
/// Slices pushed through the generator at once during volume enhancement.
const ENHANCE_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrArch {
    pub generator_width: usize,
    pub discriminator_width: usize,
}

impl Default for SrArch {
    fn default() -> Self {
        Self {
            generator_width: 32,
            discriminator_width: 32,
        }
    }
}

/// `[nz, 5, ny, nx]` stacks of each transversal slice with two neighbours per side
/// (edge slices repeated).
pub fn sr_input_stack(v: &Volume) -> Result<Tensor> {
    let tape = Tape::new();
    Ok((*tape
        .constant(v.to_tensor())
        .slice_stack(STACK_RADIUS)?
        .value())
    .clone())
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Block {
    conv: Conv,
    norm: Norm,
}

impl Block {
    fn new(
        p: &mut ParamSet,
        name: &str,
        cout: usize,
        cin: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv::new(p, name, cout, cin, 3, stride, 2, rng),
            norm: Norm::new(p, &format!("{name}.norm"), cout),
        }
    }

    fn apply<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.norm.apply(p, self.conv.apply(p, x)?)
    }
}

fn crop2<'t>(x: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    x.slice(2, 0, h)?.slice(3, 0, w)
}

/// 2.5D generator: seven conv-norm-ReLU blocks, 2x in-plane output, added
/// to the linearly upsampled centre slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SrGenerator {
    pub params: ParamSet,
    blocks: Vec<Block>,
    head: Conv,
}

impl SrGenerator {
    pub fn new(width: usize, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidArgument(
                "generator width must be positive".into(),
            ));
        }
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = width;
        let shapes = [
            (g, STACK, 1),
            (2 * g, g, 2),
            (2 * g, 2 * g, 1),
            (g, 3 * g, 1),
            (g, g, 1),
            (g, g, 1),
            (g, g, 1),
        ];
        let blocks = shapes
            .iter()
            .enumerate()
            .map(|(i, &(cout, cin, s))| {
                Block::new(&mut p, &format!("gen.block{i}"), cout, cin, s, &mut rng)
            })
            .collect();
        let head = Conv::zero(&mut p, "gen.head", 1, g, 3, 2);
        Ok(Self {
            params: p,
            blocks,
            head,
        })
    }

    pub fn width(&self) -> usize {
        self.params.get(0).shape()[0]
    }

    /// `[B, 5, h, w]` to `[B, 1, 2h, 2w]` (not clamped).
    pub fn forward<'t>(&self, p: &BoundParams<'t>, stack: Var<'t>) -> Result<Var<'t>> {
        let s = stack.shape();
        if s.len() != 4 || s[1] != STACK {
            return Err(Error::Shape(format!(
                "generator expects [B, {STACK}, H, W], got {s:?}"
            )));
        }
        let (h, w) = (s[2], s[3]);
        let b = &self.blocks;
        let x1 = b[0].apply(p, stack)?.relu();
        let x = b[1].apply(p, x1)?.relu();
        let x = b[2].apply(p, x)?.relu();
        let up = crop2(x.upsample_nearest(&[2, 2])?, h, w)?;
        let x = b[3].apply(p, concat(&[up, x1], 1)?)?.relu();
        let x = b[4].apply(p, x)?.relu();
        let x = b[5].apply(p, x.upsample_nearest(&[2, 2])?)?.relu();
        let x = b[6].apply(p, x)?.relu();
        let base = stack
            .slice(1, STACK_RADIUS, 1)?
            .resample_linear(&[2 * h, 2 * w])?;
        self.head.apply(p, x)?.add(base)
    }

    /// High-resolution centre slices for a batch of stacks, clamped to `[0, 1]`.
    pub fn enhance_slices(&self, stack: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self
            .forward(&p, tape.constant(stack.clone()))?
            .clamp(0.0, 1.0);
        Ok((*out.value()).clone())
    }

    /// Replaces every transversal slice by its super-resolved version; the
    /// result lives on the grid refined by 2 in-plane.
    pub fn enhance_volume(&self, v: &Volume) -> Result<Volume> {
        let g = v.grid();
        let target = g.refined_in_plane(2);
        let stack = sr_input_stack(v)?;
        let (nz, h, w) = (g.nz(), g.ny(), g.nx());
        let per = STACK * h * w;
        let mut data = Vec::with_capacity(target.len());
        for z0 in (0..nz).step_by(ENHANCE_CHUNK) {
            let n = ENHANCE_CHUNK.min(nz - z0);
            let chunk = Tensor::from_vec(
                vec![n, STACK, h, w],
                stack.data()[z0 * per..(z0 + n) * per].to_vec(),
            );
            data.extend_from_slice(self.enhance_slices(&chunk)?.data());
        }
        Volume::new(target, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, GENERATOR_KIND)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let loaded = ParamSet::load(path, GENERATOR_KIND)?;
        let width = Conv::out_channels(&loaded, "gen.block0").ok_or_else(|| {
            Error::Checkpoint(format!("{}: missing generator weights", path.display()))
        })?;
        let mut net = Self::new(width, 0)?;
        net.params.assign(loaded)?;
        Ok(net)
    }
}

/// Patch discriminator on `(condition stack upsampled, candidate slice)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SrDiscriminator {
    pub params: ParamSet,
    blocks: Vec<Block>,
    head: Conv,
}

impl SrDiscriminator {
    pub fn new(width: usize, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidArgument(
                "discriminator width must be positive".into(),
            ));
        }
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [width, 2 * width, 4 * width, 4 * width, 4 * width];
        let mut cin = STACK + 1;
        let mut blocks = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            blocks.push(Block::new(
                &mut p,
                &format!("disc.block{i}"),
                w,
                cin,
                2,
                &mut rng,
            ));
            cin = w;
        }
        let head = Conv::new(&mut p, "disc.head", 1, cin, 1, 1, 2, &mut rng);
        Ok(Self {
            params: p,
            blocks,
            head,
        })
    }

    /// Patch logits `[B, 1, h', w']` for LR stacks `[B, 5, h, w]` and candidates `[B, 1, 2h, 2w]`.
    pub fn forward<'t>(
        &self,
        p: &BoundParams<'t>,
        stack: Var<'t>,
        candidate: Var<'t>,
    ) -> Result<Var<'t>> {
        let (s, c) = (stack.shape(), candidate.shape());
        if s.len() != 4 || s[1] != STACK || c.len() != 4 || c[1] != 1 || c[0] != s[0] {
            return Err(Error::Shape(format!(
                "discriminator: stack {s:?}, candidate {c:?}"
            )));
        }
        let cond = stack.resample_linear(&c[2..])?;
        let mut x = concat(&[cond, candidate], 1)?;
        for b in &self.blocks {
            x = b.apply(p, x)?.leaky_relu(LEAKY_SLOPE);
        }
        self.head.apply(p, x)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, DISCRIMINATOR_KIND)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let loaded = ParamSet::load(path, DISCRIMINATOR_KIND)?;
        let width = Conv::out_channels(&loaded, "disc.block0").ok_or_else(|| {
            Error::Checkpoint(format!("{}: missing discriminator weights", path.display()))
        })?;
        let mut net = Self::new(width, 0)?;
        net.params.assign(loaded)?;
        Ok(net)
    }
}
