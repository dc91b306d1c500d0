use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::csv_err;
use super::{register, ModelSet, RegisterOptions};
use crate::config::AblationMode;
use crate::error::{Error, Result};
use crate::metrics::{endpoint_error, ncc_volume, nmi, psnr, rmse, ssim_volume, NMI_BINS};
use crate::phantom::{grade_pair, Phantom};
use crate::volume::{DisplacementField, Volume};
use crate::warp::resample_volume;

/// Window of the NCC column.
const NCC_WINDOW: usize = 9;

/// A row source in the metrics table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Linearly upsampled moving image, no deformation.
    Identity,
    Mode(AblationMode),
    /// Full-cascade models with linear upsampling in place of the generator.
    TrilinearSrBaseline,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Identity => "identity",
            Method::Mode(m) => m.as_str(),
            Method::TrilinearSrBaseline => "trilinear_sr_baseline",
        }
    }

    /// Mode whose checkpoints this method runs.
    pub fn models_mode(self) -> Option<AblationMode> {
        match self {
            Method::Identity => None,
            Method::Mode(m) => Some(m),
            Method::TrilinearSrBaseline => Some(AblationMode::CosfFull),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Method::Identity),
            "trilinear_sr_baseline" => Ok(Method::TrilinearSrBaseline),
            other => other.parse().map(Method::Mode).map_err(|_| {
                Error::InvalidArgument(format!(
                    "unknown method {s:?}; expected identity, trilinear_sr_baseline or a mode name"
                ))
            }),
        }
    }
}

/// Image the registered moving image is scored against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reference {
    /// High-resolution ground truth of the fixed phase.
    Fixed,
    /// The high-resolution prior volume.
    Prior,
}

impl Reference {
    pub const ALL: [Reference; 2] = [Reference::Fixed, Reference::Prior];

    pub fn as_str(self) -> &'static str {
        match self {
            Reference::Fixed => "fixed",
            Reference::Prior => "prior",
        }
    }
}

impl FromStr for Reference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown reference {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub pair_id: usize,
    pub phase_i: usize,
    pub phase_j: usize,
    pub grade: u8,
    pub method: Method,
    pub reference: Reference,
    pub rmse: f64,
    /// `f64::INFINITY` for identical images.
    pub psnr: f64,
    pub ssim: f64,
    pub nmi: f64,
    pub ncc: f64,
    pub epe_mean: f64,
    pub epe_max: f64,
}

const COLUMNS: [&str; 13] = [
    "pair_id",
    "phase_i",
    "phase_j",
    "grade",
    "method",
    "reference",
    "rmse",
    "psnr",
    "ssim",
    "nmi",
    "ncc",
    "epe_mean",
    "epe_max",
];

fn pair_index(k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

/// Final warped moving image and field of one method on one pair.
fn run_method(
    method: Method,
    models: Option<&ModelSet>,
    phantom: &Phantom,
    i: usize,
    j: usize,
) -> Result<(Volume, DisplacementField)> {
    let grid_hr = phantom.spec.grid_hr();
    let (moving, fixed) = (phantom.lr.phase(i), phantom.lr.phase(j));
    let Some(mode) = method.models_mode() else {
        return Ok((
            resample_volume(moving, &grid_hr)?,
            DisplacementField::zeros(grid_hr),
        ));
    };
    let models = models.ok_or_else(|| {
        Error::MissingModel(format!("method {method} needs models for mode {mode}"))
    })?;
    let opts = RegisterOptions {
        linear_upsampling: method == Method::TrilinearSrBaseline,
        ..Default::default()
    };
    let b = register(models, moving, fixed, &phantom.prior, mode, opts)?;
    Ok((b.moving_warped, b.phi_star))
}

/// Scores every ordered phase pair of `phantom` for each method, against both
/// references. Rows come out ordered by pair, then method, then reference,
/// whatever the thread count.
pub fn evaluate_pairs(
    phantom: &Phantom,
    methods: &[(Method, Option<ModelSet>)],
    threads: usize,
) -> Result<Vec<MetricRow>> {
    let k = phantom.lr.len();
    let grid_hr = phantom.spec.grid_hr();
    let mask = phantom.spec.body_mask(&grid_hr);
    let pairs = pair_index(k);
    let score = |(pair_id, &(i, j)): (usize, &(usize, usize))| -> Result<Vec<MetricRow>> {
        let grade = grade_pair(i, j, k)?;
        let truth = phantom.spec.pair_truth(&grid_hr, i, j)?;
        let mut rows = Vec::new();
        for (method, models) in methods {
            let (image, phi) = run_method(*method, models.as_ref(), phantom, i, j)?;
            let (epe_mean, epe_max) = endpoint_error(&phi, &truth, Some(&mask))?;
            for reference in Reference::ALL {
                let r = match reference {
                    Reference::Fixed => phantom.hr.phase(j),
                    Reference::Prior => &phantom.prior,
                };
                rows.push(MetricRow {
                    pair_id,
                    phase_i: i,
                    phase_j: j,
                    grade,
                    method: *method,
                    reference,
                    rmse: rmse(r, &image)?,
                    psnr: psnr(r, &image, 1.0)?,
                    ssim: ssim_volume(r, &image)?,
                    nmi: nmi(r, &image, NMI_BINS)?,
                    ncc: ncc_volume(r, &image, NCC_WINDOW)?,
                    epe_mean,
                    epe_max,
                });
            }
        }
        Ok(rows)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let per_pair: Vec<Result<Vec<MetricRow>>> =
        pool.install(|| pairs.par_iter().enumerate().map(score).collect());
    let mut rows = Vec::new();
    for r in per_pair {
        rows.extend(r?);
    }
    Ok(rows)
}

fn fmt_metric(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else {
        x.to_string()
    }
}

/// CSV text of the metrics table; infinite PSNR is written as `inf`.
pub fn metrics_csv(rows: &[MetricRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS).map_err(csv_err)?;
    for r in rows {
        let metrics = [r.rmse, r.psnr, r.ssim, r.nmi, r.ncc, r.epe_mean, r.epe_max].map(fmt_metric);
        let mut rec = vec![
            r.pair_id.to_string(),
            r.phase_i.to_string(),
            r.phase_j.to_string(),
            r.grade.to_string(),
            r.method.to_string(),
            r.reference.as_str().to_string(),
        ];
        rec.extend(metrics);
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)?).map_err(|e| Error::io(path, e))
}

/// Parses a table written by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().ne(COLUMNS) {
        return Err(Error::InvalidArgument(format!(
            "unexpected metrics header {header:?}"
        )));
    }
    let bad =
        |what: &str, v: &str| Error::InvalidArgument(format!("metrics csv: bad {what} {v:?}"));
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let int = |k: usize| {
            rec[k]
                .parse::<usize>()
                .map_err(|_| bad(COLUMNS[k], &rec[k]))
        };
        let num = |k: usize| rec[k].parse::<f64>().map_err(|_| bad(COLUMNS[k], &rec[k]));
        rows.push(MetricRow {
            pair_id: int(0)?,
            phase_i: int(1)?,
            phase_j: int(2)?,
            grade: rec[3].parse().map_err(|_| bad("grade", &rec[3]))?,
            method: rec[4].parse()?,
            reference: rec[5].parse()?,
            rmse: num(6)?,
            psnr: num(7)?,
            ssim: num(8)?,
            nmi: num(9)?,
            ncc: num(10)?,
            epe_mean: num(11)?,
            epe_max: num(12)?,
        });
    }
    Ok(rows)
}

/// Mean and standard deviation of one metric over a group. Non-finite
/// values (infinite PSNR) are left out and counted separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryGroup {
    pub method: String,
    pub reference: String,
    pub grade: u8,
    pub count: usize,
    pub metrics: BTreeMap<String, Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub groups: Vec<SummaryGroup>,
}

impl Summary {
    pub fn group(&self, method: Method, reference: Reference, grade: u8) -> Option<&SummaryGroup> {
        self.groups.iter().find(|g| {
            g.method == method.as_str() && g.reference == reference.as_str() && g.grade == grade
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serialises")
    }
}

fn stat(values: impl Iterator<Item = f64>) -> Stat {
    let (finite, excluded): (Vec<f64>, Vec<f64>) = values.partition(|v| v.is_finite());
    let n = finite.len().max(1) as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Stat {
        mean,
        std: var.sqrt(),
        excluded: excluded.len(),
    }
}

/// Per-(method, reference, grade) means and population standard deviations.
pub fn summarize(rows: &[MetricRow]) -> Summary {
    let mut groups: BTreeMap<(Method, Reference, u8), Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.method, r.reference, r.grade))
            .or_default()
            .push(r);
    }
    let metrics: [(&str, fn(&MetricRow) -> f64); 7] = [
        ("rmse", |r| r.rmse),
        ("psnr", |r| r.psnr),
        ("ssim", |r| r.ssim),
        ("nmi", |r| r.nmi),
        ("ncc", |r| r.ncc),
        ("epe_mean", |r| r.epe_mean),
        ("epe_max", |r| r.epe_max),
    ];
    Summary {
        schema_version: 1,
        groups: groups
            .into_iter()
            .map(|((method, reference, grade), rs)| SummaryGroup {
                method: method.to_string(),
                reference: reference.as_str().into(),
                grade,
                count: rs.len(),
                metrics: metrics
                    .iter()
                    .map(|(name, f)| (name.to_string(), stat(rs.iter().map(|r| f(r)))))
                    .collect(),
            })
            .collect(),
    }
}
