//! Training configuration and ablation modes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{CoarseArch, FineArch, SrArch};

pub const CONFIG_SCHEMA: u32 = 1;

/// Cascade variants compared in the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Upsampled coarse field only, linear upsampling instead of SR.
    CoarseOnly,
    /// Coarse plus residual refinement on linearly upsampled images, no prior.
    CoarseFine,
    /// Full cascade with super-resolution but without the prior image.
    CosfNoPrior,
    /// Full cascade with super-resolution and the aligned prior.
    CosfFull,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::CoarseOnly,
        AblationMode::CoarseFine,
        AblationMode::CosfNoPrior,
        AblationMode::CosfFull,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::CoarseOnly => "coarse_only",
            AblationMode::CoarseFine => "coarse_fine",
            AblationMode::CosfNoPrior => "cosf_no_prior",
            AblationMode::CosfFull => "cosf_full",
        }
    }

    pub fn uses_sr(self) -> bool {
        matches!(self, AblationMode::CosfNoPrior | AblationMode::CosfFull)
    }

    pub fn uses_fine(self) -> bool {
        self != AblationMode::CoarseOnly
    }

    pub fn uses_prior(self) -> bool {
        self == AblationMode::CosfFull
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {s:?}; expected one of coarse_only, coarse_fine, cosf_no_prior, cosf_full")))
    }
}

/// How the prior image is brought into the moving image's phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorAlignment {
    /// One pass of the coarse network.
    Coarse,
    /// No alignment.
    Identity,
}

/// Step decay: `base * factor^(epoch / every)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub every: usize,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f32 {
        (self.base * self.factor.powi((epoch / self.every) as i32)) as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    /// Smoothness weight of the coarse loss.
    pub coarse_smooth_weight: f32,
    /// L1 weight of the SR loss.
    pub sr_l1_weight: f32,
    /// MS-SSIM weight of the SR loss.
    pub sr_ms_ssim_weight: f32,
    /// Smoothness weight of the fine loss.
    pub fine_smooth_weight: f32,
    /// Share of the moving-image similarity in the fine loss (the prior gets the rest).
    pub alpha: f32,
    pub inverse_consistency_weight: f32,
    pub ncc_window: usize,
    pub epochs_coarse: usize,
    pub epochs_sr: usize,
    pub epochs_joint: usize,
    pub batch_sr: usize,
    pub batch_dir: usize,
    /// Registration pairs whose gradients are averaged per update.
    pub accumulate_dir: usize,
    pub lr_pretrain: LrSchedule,
    pub lr_joint: LrSchedule,
    pub seed: u64,
    pub augment_rotations: bool,
    pub prior_alignment: PriorAlignment,
    /// Variant trained by the joint stage.
    pub joint_mode: AblationMode,
    /// Keeps the discriminator out of joint tuning. When false, the SR modes
    /// add the generator's adversarial term and keep updating the discriminator.
    pub freeze_discriminator: bool,
    /// Consecutive epochs above twice the initial loss before training aborts.
    pub divergence_patience: usize,
    pub coarse_arch: CoarseArch,
    pub sr_arch: SrArch,
    pub fine_arch: FineArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA,
            coarse_smooth_weight: 4.0,
            sr_l1_weight: 10.0,
            sr_ms_ssim_weight: 10.0,
            fine_smooth_weight: 5.0,
            alpha: 0.35,
            inverse_consistency_weight: 0.0,
            ncc_window: 9,
            epochs_coarse: 500,
            epochs_sr: 500,
            epochs_joint: 200,
            batch_sr: 15,
            batch_dir: 1,
            accumulate_dir: 4,
            lr_pretrain: LrSchedule {
                base: 4e-5,
                factor: 0.9,
                every: 30,
            },
            lr_joint: LrSchedule {
                base: 5e-5,
                factor: 0.9,
                every: 10,
            },
            seed: 0,
            augment_rotations: true,
            prior_alignment: PriorAlignment::Coarse,
            joint_mode: AblationMode::CosfFull,
            freeze_discriminator: true,
            divergence_patience: 10,
            coarse_arch: CoarseArch::default(),
            sr_arch: SrArch::default(),
            fine_arch: FineArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.schema_version != CONFIG_SCHEMA {
            return bad(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA})",
                self.schema_version
            ));
        }
        let weights = [
            ("coarse_smooth_weight", self.coarse_smooth_weight),
            ("sr_l1_weight", self.sr_l1_weight),
            ("sr_ms_ssim_weight", self.sr_ms_ssim_weight),
            ("fine_smooth_weight", self.fine_smooth_weight),
            (
                "inverse_consistency_weight",
                self.inverse_consistency_weight,
            ),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {w}"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        for (name, s) in [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_joint", self.lr_joint),
        ] {
            if !(s.base > 0.0 && s.base.is_finite()) || !(s.factor > 0.0) || s.every == 0 {
                return bad(format!("{name} needs base > 0, factor > 0 and every >= 1"));
            }
        }
        if self.ncc_window % 2 == 0 {
            return bad(format!("ncc_window must be odd, got {}", self.ncc_window));
        }
        if self.batch_sr == 0 || self.batch_dir == 0 || self.accumulate_dir == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.divergence_patience == 0 {
            return bad("divergence_patience must be positive".into());
        }
        Ok(())
    }

    /// Reads and validates a JSON config; missing fields take their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_defaults() {
        let c = TrainConfig::default();
        assert_eq!(
            (
                c.coarse_smooth_weight,
                c.sr_l1_weight,
                c.sr_ms_ssim_weight,
                c.fine_smooth_weight,
                c.alpha
            ),
            (4.0, 10.0, 10.0, 5.0, 0.35)
        );
        assert_eq!(
            c.lr_pretrain,
            LrSchedule {
                base: 4e-5,
                factor: 0.9,
                every: 30
            }
        );
        assert_eq!(
            c.lr_joint,
            LrSchedule {
                base: 5e-5,
                factor: 0.9,
                every: 10
            }
        );
        assert_eq!(
            (c.epochs_coarse, c.epochs_sr, c.batch_sr, c.seed),
            (500, 500, 15, 0)
        );
        c.validate().unwrap();
    }

    #[test]
    fn schedule_steps() {
        let s = LrSchedule {
            base: 1.0,
            factor: 0.9,
            every: 10,
        };
        assert_eq!(s.at(0), 1.0);
        assert_eq!(s.at(9), 1.0);
        assert!((s.at(10) - 0.9).abs() < 1e-7);
        assert!((s.at(25) - 0.81).abs() < 1e-7);
    }

    #[test]
    fn json_partial_and_rejections() {
        let c = TrainConfig::from_json(r#"{"epochs_coarse": 3, "seed": 7}"#).unwrap();
        assert_eq!((c.epochs_coarse, c.seed, c.alpha), (3, 7, 0.35));
        assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(TrainConfig::from_json(r#"{"alpha": 1.5}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"learning_rate": 1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"schema_version": 2}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"sr_l1_weight": -1}"#).is_err());
    }

    #[test]
    fn modes_parse_and_print() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("full".parse::<AblationMode>().is_err());
    }
}
