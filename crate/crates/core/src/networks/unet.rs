use rand::Rng;

use super::{Conv, LEAKY_SLOPE};
use crate::autograd::{concat, BoundParams, ParamSet, Var};
use crate::error::{Error, Result};

/// Number of stride-2 levels; inputs are zero-padded to a multiple of `2^LEVELS`.
pub(crate) const LEVELS: usize = 4;

/// 3D U-Net with stride-2 encoders, nearest upsampling and skip
/// concatenation. An optional second encoder runs on its own input and its
/// features join the skips at every scale.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct UNet {
    enc: Vec<Conv>,
    aux: Vec<Conv>,
    bottleneck: Conv,
    dec: Vec<Conv>,
    refine: Conv,
    head: Conv,
}

pub(crate) struct UNetSpec<'a> {
    pub prefix: &'a str,
    pub in_channels: usize,
    pub widths: [usize; LEVELS],
    /// `(input channels, widths)` of the second encoder.
    pub aux: Option<(usize, [usize; LEVELS])>,
    pub out_channels: usize,
}

impl UNet {
    pub(crate) fn new(p: &mut ParamSet, s: &UNetSpec, rng: &mut impl Rng) -> Result<Self> {
        if s.widths.contains(&0) || s.aux.is_some_and(|(_, w)| w.contains(&0)) {
            return Err(Error::InvalidArgument(format!(
                "network widths must be positive: {:?}",
                s.widths
            )));
        }
        let name = |part: &str| format!("{}.{part}", s.prefix);
        let encoder = |p: &mut ParamSet, tag: &str, cin: usize, w: [usize; LEVELS], rng: &mut _| {
            (0..LEVELS)
                .map(|k| {
                    let c = if k == 0 { cin } else { w[k - 1] };
                    Conv::new(p, &name(&format!("{tag}{k}")), w[k], c, 3, 2, 3, rng)
                })
                .collect::<Vec<_>>()
        };
        let enc = encoder(p, "enc", s.in_channels, s.widths, rng);
        let aux = match s.aux {
            Some((cin, w)) => encoder(p, "aux", cin, w, rng),
            None => Vec::new(),
        };
        let aw = |k: usize| s.aux.map_or(0, |(_, w)| w[k]);
        let a_in = s.aux.map_or(0, |(c, _)| c);
        let w = s.widths;
        let bottleneck = Conv::new(p, &name("bottleneck"), w[3], w[3] + aw(3), 3, 1, 3, rng);
        // decoder level k sits at scale 1/2^(3-k) and joins skip level 2-k (or the raw inputs)
        let mut dec = Vec::with_capacity(LEVELS);
        let mut cur = w[3];
        for k in 0..LEVELS {
            let (skip, out) = if k < LEVELS - 1 {
                (w[2 - k] + aw(2 - k), w[2 - k])
            } else {
                (s.in_channels + a_in, w[0])
            };
            dec.push(Conv::new(
                p,
                &name(&format!("dec{k}")),
                out,
                cur + skip,
                3,
                1,
                3,
                rng,
            ));
            cur = out;
        }
        let refine = Conv::new(p, &name("refine"), w[0], w[0], 3, 1, 3, rng);
        let head = Conv::zero(p, &name("head"), s.out_channels, w[0], 1, 3);
        Ok(Self {
            enc,
            aux,
            bottleneck,
            dec,
            refine,
            head,
        })
    }

    pub(crate) fn forward<'t>(
        &self,
        p: &BoundParams<'t>,
        x: Var<'t>,
        aux: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 5 {
            return Err(Error::Shape(format!(
                "expected [N, C, D, H, W], got {shape:?}"
            )));
        }
        let m = 1 << LEVELS;
        let padded: Vec<usize> = shape[2..].iter().map(|&n| n.div_ceil(m) * m).collect();
        let pads: Vec<(usize, usize)> = [(0, 0), (0, 0)]
            .into_iter()
            .chain(shape[2..].iter().zip(&padded).map(|(&n, &q)| (0, q - n)))
            .collect();
        let x = x.pad(&pads)?;
        let aux = aux.map(|a| a.pad(&pads)).transpose()?;
        if aux.is_some() != !self.aux.is_empty() {
            return Err(Error::InvalidArgument(
                "auxiliary input does not match the architecture".into(),
            ));
        }
        let act = |v: Var<'t>| v.leaky_relu(LEAKY_SLOPE);
        let mut skips = vec![match aux {
            Some(a) => concat(&[x, a], 1)?,
            None => x,
        }];
        let (mut h, mut ha) = (x, aux);
        for k in 0..LEVELS {
            h = act(self.enc[k].apply(p, h)?);
            if let Some(a) = ha {
                let a = act(self.aux[k].apply(p, a)?);
                ha = Some(a);
                skips.push(concat(&[h, a], 1)?);
            } else {
                skips.push(h);
            }
        }
        let mut d = act(self.bottleneck.apply(p, skips[LEVELS])?);
        for k in 0..LEVELS {
            let up = d.upsample_nearest(&[2, 2, 2])?;
            d = act(self.dec[k].apply(p, concat(&[up, skips[LEVELS - 1 - k]], 1)?)?);
        }
        let d = act(self.refine.apply(p, d)?);
        let out = self.head.apply(p, d)?;
        let mut out = out;
        for (ax, &n) in shape[2..].iter().enumerate() {
            out = out.slice(ax + 2, 0, n)?;
        }
        Ok(out)
    }
}

/// Encoder widths of a U-Net built under `prefix`, read from parameter shapes.
pub(crate) fn widths_of(p: &ParamSet, prefix: &str, tag: &str) -> Option<[usize; LEVELS]> {
    let mut w = [0; LEVELS];
    for (k, slot) in w.iter_mut().enumerate() {
        *slot = Conv::out_channels(p, &format!("{prefix}.{tag}{k}"))?;
    }
    Some(w)
}
