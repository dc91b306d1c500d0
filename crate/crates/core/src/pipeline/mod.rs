//! The coarse, super-resolution and fine cascade: model directories,
//! prior pre-alignment, inference, training and evaluation.

mod evaluate;
mod train;

pub use evaluate::{
    evaluate_pairs, metrics_csv, parse_metrics_csv, summarize, write_metrics_csv, Method,
    MetricRow, Reference, Stat, Summary, SummaryGroup,
};
pub use train::{
    coarse_pairs, joint_finetune, joint_loss_at_start, pretrain_coarse, pretrain_sr, JointModels,
    SliceSet, TrainLog,
};

use std::path::{Path, PathBuf};

use crate::config::{AblationMode, PriorAlignment};
use crate::error::{Error, Result};
use crate::io;
use crate::networks::{CoarseDirNet, FineDirNet, SrGenerator};
use crate::volume::{DisplacementField, Grid3, PhiPair, Volume};
use crate::warp::{dvf_magnitude, field_difference, resample_volume, upsample_dvf, warp_volume};

pub const COARSE_FILE: &str = "coarse.ckpt";
pub const GENERATOR_FILE: &str = "sr_generator.ckpt";
pub const DISCRIMINATOR_FILE: &str = "sr_discriminator.ckpt";
pub const FINE_FILE: &str = "fine.ckpt";

/// Checkpoint locations inside a model directory. Pretrained models sit at
/// the top level; the joint stage writes one subdirectory per mode.
pub fn model_path(dir: &Path, mode: Option<AblationMode>, file: &str) -> PathBuf {
    match mode {
        Some(m) => dir.join(m.as_str()).join(file),
        None => dir.join(file),
    }
}

/// Models needed to run one mode of the cascade.
#[derive(Clone, Debug)]
pub struct ModelSet {
    pub coarse: CoarseDirNet,
    /// Pretrained coarse network used for prior pre-alignment.
    pub aligner: CoarseDirNet,
    pub generator: Option<SrGenerator>,
    pub fine: Option<FineDirNet>,
}

fn load_required<T>(
    path: PathBuf,
    mode: AblationMode,
    load: impl Fn(&Path) -> Result<T>,
) -> Result<T> {
    load(&path).map_err(|e| match e {
        Error::MissingModel(_) => {
            Error::MissingModel(format!("mode {mode} needs {}", path.display()))
        }
        other => other,
    })
}

impl ModelSet {
    pub fn load(dir: &Path, mode: AblationMode) -> Result<Self> {
        let aligner = load_required(model_path(dir, None, COARSE_FILE), mode, CoarseDirNet::load)?;
        if mode == AblationMode::CoarseOnly {
            return Ok(Self {
                coarse: aligner.clone(),
                aligner,
                generator: None,
                fine: None,
            });
        }
        let coarse = load_required(
            model_path(dir, Some(mode), COARSE_FILE),
            mode,
            CoarseDirNet::load,
        )?;
        let fine = Some(load_required(
            model_path(dir, Some(mode), FINE_FILE),
            mode,
            FineDirNet::load,
        )?);
        let generator = if mode.uses_sr() {
            Some(load_required(
                model_path(dir, Some(mode), GENERATOR_FILE),
                mode,
                SrGenerator::load,
            )?)
        } else {
            None
        };
        Ok(Self {
            coarse,
            aligner,
            generator,
            fine,
        })
    }

    /// Pretrained models as they stand before joint tuning; the generator
    /// is loaded only when `mode` super-resolves.
    pub fn pretrained(
        dir: &Path,
        mode: AblationMode,
    ) -> Result<(CoarseDirNet, Option<SrGenerator>)> {
        let coarse = load_required(model_path(dir, None, COARSE_FILE), mode, CoarseDirNet::load)?;
        let generator = if mode.uses_sr() {
            Some(load_required(
                model_path(dir, None, GENERATOR_FILE),
                mode,
                SrGenerator::load,
            )?)
        } else {
            None
        };
        Ok((coarse, generator))
    }
}

/// Enhances a low-resolution volume with the generator, or by linear
/// upsampling when none is given.
pub fn enhance(generator: Option<&SrGenerator>, v: &Volume) -> Result<Volume> {
    match generator {
        Some(g) => g.enhance_volume(v),
        None => resample_volume(v, &v.grid().refined_in_plane(2)),
    }
}

/// Warps the prior `p` toward `target` with one pass of the coarse network on
/// the low-resolution grid, the field upsampled back. Returns the aligned
/// prior and the field used.
pub fn prealign_prior(
    coarse: &CoarseDirNet,
    prior: &Volume,
    target: &Volume,
    grid_lr: &Grid3,
) -> Result<(Volume, DisplacementField)> {
    prior.grid().ensure_same(target.grid(), "prealign_prior")?;
    let p_lr = resample_volume(prior, grid_lr)?;
    let t_lr = resample_volume(target, grid_lr)?;
    let phi = upsample_dvf(&coarse.register(&t_lr, &p_lr)?.m2f, prior.grid())?;
    Ok((warp_volume(prior, &phi)?, phi))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegisterOptions {
    pub prior_alignment: PriorAlignment,
    /// Use linear upsampling even when the mode has a generator.
    pub linear_upsampling: bool,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        Self {
            prior_alignment: PriorAlignment::Coarse,
            linear_upsampling: false,
        }
    }
}

/// Every intermediate of one registration.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub mode: AblationMode,
    /// Coarse fields on the low-resolution grid.
    pub phi_coarse: PhiPair,
    /// Upsampled moving-to-fixed coarse field.
    pub phi_tilde: DisplacementField,
    pub phi_tilde_f2m: DisplacementField,
    /// Residual field; `phi_star = v + phi_tilde` exactly.
    pub v: DisplacementField,
    pub phi_star: DisplacementField,
    pub moving_enhanced: Volume,
    pub fixed_enhanced: Volume,
    /// Coarse warp of the enhanced moving image.
    pub moving_coarse: Volume,
    /// Enhanced moving image warped by the final field.
    pub moving_warped: Volume,
    /// Enhanced fixed image warped toward the moving image.
    pub fixed_warped: Volume,
    pub prior_aligned: Option<Volume>,
}

impl Bundle {
    /// `(name, magnitude volume)` of the final, coarse and residual fields.
    pub fn heatmaps(&self) -> Result<Vec<(&'static str, Volume)>> {
        Ok(vec![
            ("phi_star_magnitude", dvf_magnitude(&self.phi_star)),
            ("phi_tilde_magnitude", dvf_magnitude(&self.phi_tilde)),
            (
                "residual_magnitude",
                dvf_magnitude(&field_difference(&self.phi_star, &self.phi_tilde)?),
            ),
        ])
    }

    /// Writes every volume and field of the bundle into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let mut vol = |name: &str, v: &Volume| -> Result<()> {
            let p = dir.join(format!("{name}.mvol"));
            io::write_volume(v, &p)?;
            written.push(p);
            Ok(())
        };
        vol("moving_enhanced", &self.moving_enhanced)?;
        vol("fixed_enhanced", &self.fixed_enhanced)?;
        vol("moving_coarse", &self.moving_coarse)?;
        vol("moving_warped", &self.moving_warped)?;
        vol("fixed_warped", &self.fixed_warped)?;
        if let Some(p) = &self.prior_aligned {
            vol("prior_aligned", p)?;
        }
        for (name, h) in self.heatmaps()? {
            vol(name, &h)?;
        }
        let fields = [
            ("phi_coarse_m2f", &self.phi_coarse.m2f),
            ("phi_coarse_f2m", &self.phi_coarse.f2m),
            ("phi_tilde", &self.phi_tilde),
            ("phi_tilde_f2m", &self.phi_tilde_f2m),
            ("residual", &self.v),
            ("phi_star", &self.phi_star),
        ];
        for (name, f) in fields {
            let p = dir.join(format!("{name}.mdvf"));
            io::write_dvf(f, &p)?;
            written.push(p);
        }
        Ok(written)
    }
}

/// Runs the cascade for one `(moving, fixed)` pair of low-resolution volumes
/// with the high-resolution `prior`.
pub fn register(
    models: &ModelSet,
    moving: &Volume,
    fixed: &Volume,
    prior: &Volume,
    mode: AblationMode,
    opts: RegisterOptions,
) -> Result<Bundle> {
    moving.grid().ensure_same(fixed.grid(), "register")?;
    let grid_lr = *moving.grid();
    let grid_hr = grid_lr.refined_in_plane(2);
    prior.grid().ensure_same(&grid_hr, "register prior")?;
    let phi_coarse = models.coarse.register(fixed, moving)?;
    let phi_tilde = upsample_dvf(&phi_coarse.m2f, &grid_hr)?;
    let phi_tilde_f2m = upsample_dvf(&phi_coarse.f2m, &grid_hr)?;
    let generator = if mode.uses_sr() && !opts.linear_upsampling {
        Some(
            models
                .generator
                .as_ref()
                .ok_or_else(|| Error::MissingModel(format!("mode {mode} needs a generator")))?,
        )
    } else {
        None
    };
    let moving_enhanced = enhance(generator, moving)?;
    let fixed_enhanced = enhance(generator, fixed)?;
    let moving_coarse = warp_volume(&moving_enhanced, &phi_tilde)?;
    let (v, phi_star, prior_aligned) = if mode.uses_fine() {
        let fine = models
            .fine
            .as_ref()
            .ok_or_else(|| Error::MissingModel(format!("mode {mode} needs a fine model")))?;
        let prior_aligned = if mode.uses_prior() {
            Some(match opts.prior_alignment {
                PriorAlignment::Coarse => {
                    prealign_prior(&models.aligner, prior, &moving_enhanced, &grid_lr)?.0
                }
                PriorAlignment::Identity => prior.clone(),
            })
        } else {
            None
        };
        let prior_input = prior_aligned
            .clone()
            .unwrap_or_else(|| Volume::zeros(grid_hr));
        let (v, star) = fine.refine(&fixed_enhanced, &moving_enhanced, &prior_input, &phi_tilde)?;
        (v, star, prior_aligned)
    } else {
        (DisplacementField::zeros(grid_hr), phi_tilde.clone(), None)
    };
    Ok(Bundle {
        mode,
        moving_warped: warp_volume(&moving_enhanced, &phi_star)?,
        fixed_warped: warp_volume(&fixed_enhanced, &phi_tilde_f2m)?,
        phi_coarse,
        phi_tilde,
        phi_tilde_f2m,
        v,
        phi_star,
        moving_enhanced,
        fixed_enhanced,
        moving_coarse,
        prior_aligned,
    })
}
