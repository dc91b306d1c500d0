//! Synthetic 4D breathing phantoms with known ground-truth motion.
//!
//! The scene is analytic, defined in physical millimetres over the LR field of
//! view. Phase `k` samples it through `x + a_k b(x)`, where `b` is a smooth
//! superior-inferior bump centred on the diaphragm.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::volume::{
    rotate_volume, DisplacementField, Grid3, RegistrationPair, Sequence4D, Volume,
};
use crate::warp::{blur_in_plane, resample_volume};

/// Elliptic cylinder along z: centre and radii in normalised in-plane coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub center: [f64; 2],
    pub radii: [f64; 2],
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tumor {
    /// Normalised `(x, y, z)` in `[0, 1]`.
    pub center: [f64; 3],
    /// Radius in millimetres.
    pub radius_mm: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vessel {
    pub from: [f64; 3],
    pub to: [f64; 3],
    pub radius_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub grid_lr: Grid3,
    /// In-plane refinement of the HR grid.
    pub hr_factor: usize,
    pub phases: usize,
    /// Peak diaphragm displacement in voxels.
    pub amplitude_max: f64,
    pub body: Body,
    pub tumor: Tumor,
    pub vessels: Vec<Vessel>,
    pub vessel_intensity: f64,
    pub lung_intensity: f64,
    pub liver_intensity: f64,
    /// Normalised height of the diaphragm plane.
    pub diaphragm_z: f64,
    pub noise_sigma: f64,
    /// LR degradation blur, FWHM in HR voxels.
    pub blur_fwhm: f64,
    /// Amplitude of the smooth tissue texture.
    pub texture: f64,
    /// Phase offset of the tissue texture (varies between subjects).
    pub texture_phase: f64,
    /// Width (mm) of the logistic ramp at every tissue boundary.
    pub edge_mm: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid_lr: Grid3::new([40, 32, 16], [2.7, 2.7, 3.0]).expect("valid default grid"),
            hr_factor: 2,
            phases: 10,
            amplitude_max: 3.0,
            body: Body {
                center: [0.5, 0.5],
                radii: [0.44, 0.40],
                intensity: 0.35,
            },
            tumor: Tumor {
                center: [0.34, 0.5, 0.62],
                radius_mm: 6.0,
                intensity: 0.9,
            },
            vessels: vec![
                Vessel {
                    from: [0.28, 0.42, 0.98],
                    to: [0.36, 0.58, 0.55],
                    radius_mm: 1.8,
                },
                Vessel {
                    from: [0.72, 0.55, 0.98],
                    to: [0.64, 0.42, 0.6],
                    radius_mm: 1.8,
                },
                Vessel {
                    from: [0.58, 0.6, 0.42],
                    to: [0.76, 0.4, 0.05],
                    radius_mm: 2.2,
                },
            ],
            vessel_intensity: 0.8,
            lung_intensity: 0.1,
            liver_intensity: 0.6,
            diaphragm_z: 0.5,
            noise_sigma: 0.03,
            blur_fwhm: 2.0,
            texture: 0.05,
            edge_mm: 0.6,
            texture_phase: 0.0,
            seed: 0,
        }
    }
}

/// `a_k = A sin^2(pi k / K)` for `k = 0..K`.
pub fn amplitude_profile(phases: usize, amplitude_max: f64) -> Result<Vec<f64>> {
    if phases < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 phases, got {phases}"
        )));
    }
    Ok((0..phases)
        .map(|k| amplitude_max * (PI * k as f64 / phases as f64).sin().powi(2))
        .collect())
}

/// Circular phase distance capped at 4.
pub fn grade_pair(i: usize, j: usize, phases: usize) -> Result<u8> {
    if i == j || i >= phases || j >= phases {
        return Err(Error::InvalidArgument(format!(
            "grade of phases ({i}, {j}) out of {phases}"
        )));
    }
    let d = i.abs_diff(j);
    Ok(d.min(phases - d).min(4) as u8)
}

fn taper(t: f64) -> f64 {
    if t >= 1.0 {
        1.0
    } else if t <= 0.0 {
        0.0
    } else {
        0.5 * (1.0 - (PI * t).cos())
    }
}

/// Unit superior-inferior motion bump on a grid, evaluable at continuous positions.
#[derive(Clone, Copy, Debug)]
pub struct MotionBasis {
    dims: [usize; 3],
    center_z: f64,
    sigma: f64,
}

impl MotionBasis {
    const Z_MARGIN: f64 = 3.0;

    pub fn new(grid: &Grid3, diaphragm_z: f64) -> Self {
        let dims = grid.dims();
        let nz = dims[2];
        let center_z = (diaphragm_z * (nz - 1) as f64)
            .round()
            .clamp(0.0, (nz - 1) as f64);
        Self {
            dims,
            center_z,
            sigma: nz as f64 / 6.0,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn center_z(&self) -> f64 {
        self.center_z
    }

    /// z displacement (voxels) at continuous voxel position `(x, y, z)`.
    pub fn at(&self, p: [f64; 3]) -> f64 {
        let [nx, ny, nz] = self.dims.map(|n| (n - 1) as f64);
        let inplane = |v: f64, n: f64| {
            let u = (v / n).clamp(0.0, 1.0);
            taper(u.min(1.0 - u) / 0.25)
        };
        let zc = p[2].clamp(0.0, nz);
        let tz = taper(zc.min(nz - zc) / Self::Z_MARGIN);
        let d = p[2] - self.center_z;
        (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            * tz
            * inplane(p[0], nx)
            * inplane(p[1], ny)
    }

    pub fn field(&self, grid: &Grid3, scale: f64) -> DisplacementField {
        DisplacementField::from_fn(*grid, |x, y, z| {
            [
                0.0,
                0.0,
                (scale * self.at([x as f64, y as f64, z as f64])) as f32,
            ]
        })
        .expect("finite basis")
    }
}

/// Unit motion field `b` on `grid`.
pub fn motion_basis(grid: &Grid3, diaphragm_z: f64) -> DisplacementField {
    MotionBasis::new(grid, diaphragm_z).field(grid, 1.0)
}

/// Field `phi` with `moving(x + phi(x)) = fixed(x)` for phases with amplitudes
/// `a_moving`, `a_fixed`: the solution of `phi = a_f b(x) - a_m b(x + phi)`.
pub fn pair_ground_truth(
    grid: &Grid3,
    diaphragm_z: f64,
    a_moving: f64,
    a_fixed: f64,
) -> DisplacementField {
    let basis = MotionBasis::new(grid, diaphragm_z);
    DisplacementField::from_fn(*grid, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        let target = a_fixed * basis.at(p);
        let mut dz = target - a_moving * basis.at(p);
        for _ in 0..50 {
            let next = target - a_moving * basis.at([p[0], p[1], p[2] + dz]);
            let done = (next - dz).abs() < 1e-12;
            dz = next;
            if done {
                break;
            }
        }
        [0.0, 0.0, dz as f32]
    })
    .expect("finite field")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub amplitudes: Vec<f64>,
    /// `a_k b` on the LR grid, one per phase.
    pub fields_lr: Vec<DisplacementField>,
    /// `a_k b` on the HR grid, one per phase.
    pub fields_hr: Vec<DisplacementField>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub lr: Sequence4D,
    pub hr: Sequence4D,
    pub prior: Volume,
    pub truth: GroundTruth,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Scene<'a> {
    spec: &'a PhantomSpec,
    extent: [f64; 3],
}

impl<'a> Scene<'a> {
    fn new(spec: &'a PhantomSpec) -> Self {
        let g = &spec.grid_lr;
        let (d, s) = (g.dims(), g.spacing());
        Self {
            spec,
            extent: std::array::from_fn(|a| (d[a] - 1) as f64 * s[a]),
        }
    }

    fn mm(&self, u: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| u[a] * self.extent[a])
    }

    fn inside(&self, sd: f64) -> f64 {
        sigmoid(-sd / self.spec.edge_mm)
    }

    /// Approximate signed distance (mm) to an axis-aligned ellipsoid.
    fn ellipsoid_sd(&self, p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
        let c = self.mm(c);
        let r = self.mm(r);
        let q: f64 = (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum();
        (q.sqrt() - 1.0) * r.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    fn body_sd(&self, p: [f64; 3]) -> f64 {
        let b = &self.spec.body;
        let c = self.mm([b.center[0], b.center[1], 0.0]);
        let r = self.mm([b.radii[0], b.radii[1], 0.0]);
        let q = ((p[0] - c[0]) / r[0]).powi(2) + ((p[1] - c[1]) / r[1]).powi(2);
        (q.sqrt() - 1.0) * r[0].min(r[1])
    }

    /// Height of the domed diaphragm (mm) above `(x, y)`.
    fn dome(&self, p: [f64; 3]) -> f64 {
        let u = [p[0] / self.extent[0], p[1] / self.extent[1]];
        let r2 = ((u[0] - 0.5) / 0.4).powi(2) + ((u[1] - 0.5) / 0.4).powi(2);
        (self.spec.diaphragm_z + 0.08 * (1.0 - r2)) * self.extent[2]
    }

    fn texture(&self, p: [f64; 3], f: [f64; 3]) -> f64 {
        let u: [f64; 3] = std::array::from_fn(|a| p[a] / self.extent[a]);
        let ph = self.spec.texture_phase;
        self.spec.texture
            * (2.0 * PI * f[0] * u[0] + ph).sin()
            * (2.0 * PI * f[1] * u[1] + 0.7 * ph).sin()
            * (2.0 * PI * f[2] * u[2] + 0.3).cos()
    }

    fn segment_sd(&self, p: [f64; 3], v: &Vessel) -> f64 {
        let (a, b) = (self.mm(v.from), self.mm(v.to));
        let ab: [f64; 3] = std::array::from_fn(|k| b[k] - a[k]);
        let ap: [f64; 3] = std::array::from_fn(|k| p[k] - a[k]);
        let len2: f64 = ab.iter().map(|x| x * x).sum();
        let t = (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0);
        let d2: f64 = (0..3).map(|k| (ap[k] - t * ab[k]).powi(2)).sum();
        d2.sqrt() - v.radius_mm
    }

    /// Intensity at a position in mm.
    fn value(&self, p: [f64; 3]) -> f64 {
        let s = self.spec;
        let blend = |v: f64, c: f64, alpha: f64| v + (c - v) * alpha;
        let body = self.inside(self.body_sd(p));
        let mut v = blend(
            0.0,
            s.body.intensity + self.texture(p, [3.0, 2.0, 1.5]),
            body,
        );
        let above = self.inside(self.dome(p) - p[2]);
        let lungs = [
            ([0.31, 0.5, 0.72], [0.15, 0.24, 0.5]),
            ([0.69, 0.5, 0.72], [0.15, 0.24, 0.5]),
        ];
        for (c, r) in lungs {
            let a = self.inside(self.ellipsoid_sd(p, c, r)) * above * body;
            v = blend(
                v,
                s.lung_intensity + 0.5 * self.texture(p, [5.0, 4.0, 2.0]),
                a,
            );
        }
        let liver = self.inside(self.ellipsoid_sd(p, [0.58, 0.5, 0.28], [0.32, 0.3, 0.5]))
            * (1.0 - above)
            * body;
        v = blend(
            v,
            s.liver_intensity + self.texture(p, [4.0, 3.0, 2.5]),
            liver,
        );
        for vessel in &s.vessels {
            v = blend(
                v,
                s.vessel_intensity,
                self.inside(self.segment_sd(p, vessel)) * body,
            );
        }
        let t = &s.tumor;
        let tc = self.mm(t.center);
        let d = (0..3).map(|a| (p[a] - tc[a]).powi(2)).sum::<f64>().sqrt() - t.radius_mm;
        v = blend(v, t.intensity, self.inside(d));
        v.clamp(0.0, 1.0)
    }
}

impl PhantomSpec {
    pub fn grid_hr(&self) -> Grid3 {
        self.grid_lr.refined_in_plane(self.hr_factor)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.phases < 2 {
            return bad(format!("phases must be at least 2, got {}", self.phases));
        }
        if self.hr_factor < 1 {
            return bad("hr_factor must be at least 1".into());
        }
        if !(self.amplitude_max >= 0.0) {
            return bad(format!(
                "amplitude_max must be non-negative, got {}",
                self.amplitude_max
            ));
        }
        if !(0.0..0.2).contains(&self.noise_sigma) {
            return bad(format!(
                "noise_sigma must lie in [0, 0.2), got {}",
                self.noise_sigma
            ));
        }
        if !(self.blur_fwhm >= 0.0) {
            return bad(format!(
                "blur_fwhm must be non-negative, got {}",
                self.blur_fwhm
            ));
        }
        if !(self.edge_mm > 0.0 && self.edge_mm.is_finite()) {
            return bad(format!("edge_mm must be positive, got {}", self.edge_mm));
        }
        let scene = Scene::new(self);
        let t = &self.tumor;
        let c = scene.mm(t.center);
        if !(0.0..=1.0).contains(&t.center[2]) || scene.body_sd(c) > -t.radius_mm {
            return bad("tumor must lie inside the body".into());
        }
        Ok(())
    }

    /// A distinct subject: the same anatomy with jittered geometry and texture.
    pub fn subject(&self, index: u64) -> PhantomSpec {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut s = self.clone();
        let mut j = |amount: f64| rng.random_range(-amount..amount);
        s.body.radii = [s.body.radii[0] + j(0.02), s.body.radii[1] + j(0.02)];
        s.tumor.center = [
            s.tumor.center[0] + j(0.03),
            s.tumor.center[1] + j(0.04),
            s.tumor.center[2] + j(0.04),
        ];
        s.tumor.radius_mm += j(1.0);
        for v in &mut s.vessels {
            for k in 0..3 {
                v.from[k] += j(0.03);
                v.to[k] += j(0.03);
            }
        }
        s.diaphragm_z += j(0.03);
        s.texture_phase = j(PI);
        s.seed = self.seed.wrapping_add(1 + index);
        s
    }

    /// Normalised `(x, y)` inside the body cylinder.
    pub fn in_body(&self, u: [f64; 2]) -> bool {
        let b = &self.body;
        ((u[0] - b.center[0]) / b.radii[0]).powi(2) + ((u[1] - b.center[1]) / b.radii[1]).powi(2)
            <= 1.0
    }

    /// Body mask on a grid (the body is a z-cylinder, so it is phase independent).
    pub fn body_mask(&self, grid: &Grid3) -> Vec<bool> {
        let [nx, ny, nz] = grid.dims();
        let mut m = Vec::with_capacity(grid.len());
        for _ in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    m.push(self.in_body([x as f64 / (nx - 1) as f64, y as f64 / (ny - 1) as f64]));
                }
            }
        }
        m
    }

    /// Scene sampled on `grid` through `x + scale * b(x)`.
    fn render(&self, grid: &Grid3, scale: f64) -> Result<Volume> {
        let scene = Scene::new(self);
        let basis = MotionBasis::new(grid, self.diaphragm_z);
        let [nx, ny, nz] = grid.dims().map(|n| (n - 1) as f64);
        Volume::from_fn(*grid, |x, y, z| {
            let p = [x as f64, y as f64, z as f64];
            let pz = p[2] + scale * basis.at(p);
            let u = [p[0] / nx, p[1] / ny, pz / nz];
            scene.value(scene.mm(u)) as f32
        })
    }

    /// Ground-truth field taking `moving` phase coordinates onto the `fixed` phase.
    pub fn pair_truth(
        &self,
        grid: &Grid3,
        moving: usize,
        fixed: usize,
    ) -> Result<DisplacementField> {
        let a = amplitude_profile(self.phases, self.amplitude_max)?;
        if moving >= a.len() || fixed >= a.len() {
            return Err(Error::InvalidArgument(format!(
                "phase out of range 0..{}",
                a.len()
            )));
        }
        Ok(pair_ground_truth(
            grid,
            self.diaphragm_z,
            a[moving],
            a[fixed],
        ))
    }
}

/// LR degradation of an HR volume: in-plane blur, resampling to `grid_lr`, then noise.
pub fn degrade(
    hr: &Volume,
    grid_lr: &Grid3,
    blur_fwhm: f64,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<Volume> {
    let blurred = blur_in_plane(hr, blur_fwhm)?;
    let lr = resample_volume(&blurred, grid_lr)?;
    if noise_sigma == 0.0 {
        return Ok(lr);
    }
    let normal =
        Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let data = lr
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Volume::new(*grid_lr, data)
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let amplitudes = amplitude_profile(spec.phases, spec.amplitude_max)?;
    let (glr, ghr) = (spec.grid_lr, spec.grid_hr());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut hr = Vec::with_capacity(spec.phases);
    let mut lr = Vec::with_capacity(spec.phases);
    for &a in &amplitudes {
        let h = spec.render(&ghr, a)?;
        lr.push(degrade(
            &h,
            &glr,
            spec.blur_fwhm,
            spec.noise_sigma,
            &mut rng,
        )?);
        hr.push(h);
    }
    let (blr, bhr) = (
        MotionBasis::new(&glr, spec.diaphragm_z),
        MotionBasis::new(&ghr, spec.diaphragm_z),
    );
    let truth = GroundTruth {
        fields_lr: amplitudes.iter().map(|&a| blr.field(&glr, a)).collect(),
        fields_hr: amplitudes.iter().map(|&a| bhr.field(&ghr, a)).collect(),
        amplitudes,
    };
    let prior = hr[0].clone();
    Ok(Phantom {
        spec: spec.clone(),
        lr: Sequence4D::new(lr)?,
        hr: Sequence4D::new(hr)?,
        prior,
        truth,
    })
}

#[derive(Serialize, Deserialize)]
struct PhaseEntry {
    lr: String,
    hr: String,
    truth_lr: String,
    truth_hr: String,
    amplitude: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    spec: PhantomSpec,
    prior: String,
    phases: Vec<PhaseEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Phantom {
    /// Writes volumes, fields and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut phases = Vec::new();
        for k in 0..self.lr.len() {
            let e = PhaseEntry {
                lr: format!("lr_{k:02}.mvol"),
                hr: format!("hr_{k:02}.mvol"),
                truth_lr: format!("truth_lr_{k:02}.mdvf"),
                truth_hr: format!("truth_hr_{k:02}.mdvf"),
                amplitude: self.truth.amplitudes[k],
            };
            io::write_volume(self.lr.phase(k), &dir.join(&e.lr))?;
            io::write_volume(self.hr.phase(k), &dir.join(&e.hr))?;
            io::write_dvf(&self.truth.fields_lr[k], &dir.join(&e.truth_lr))?;
            io::write_dvf(&self.truth.fields_hr[k], &dir.join(&e.truth_hr))?;
            phases.push(e);
        }
        io::write_volume(&self.prior, &dir.join("prior.mvol"))?;
        let m = Manifest {
            schema_version: 1,
            spec: self.spec.clone(),
            prior: "prior.mvol".into(),
            phases,
        };
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut lr = Vec::new();
        let mut hr = Vec::new();
        let mut truth = GroundTruth {
            amplitudes: Vec::new(),
            fields_lr: Vec::new(),
            fields_hr: Vec::new(),
        };
        for e in &m.phases {
            lr.push(io::read_volume(&dir.join(&e.lr))?);
            hr.push(io::read_volume(&dir.join(&e.hr))?);
            truth.fields_lr.push(io::read_dvf(&dir.join(&e.truth_lr))?);
            truth.fields_hr.push(io::read_dvf(&dir.join(&e.truth_hr))?);
            truth.amplitudes.push(e.amplitude);
        }
        Ok(Phantom {
            prior: io::read_volume(&dir.join(&m.prior))?,
            spec: m.spec,
            lr: Sequence4D::new(lr)?,
            hr: Sequence4D::new(hr)?,
            truth,
        })
    }
}

/// The pair itself plus its three in-plane quarter-turn rotations.
pub fn augment_rotations(pair: &RegistrationPair) -> Result<Vec<RegistrationPair>> {
    let g = pair.moving.grid();
    if g.nx() != g.ny() {
        return Err(Error::InvalidArgument(format!(
            "rotation augmentation needs square slices, got {}x{}",
            g.nx(),
            g.ny()
        )));
    }
    let mut out = vec![pair.clone()];
    for q in 1..4u8 {
        out.push(RegistrationPair {
            moving: rotate_volume(&pair.moving, q)?,
            fixed: rotate_volume(&pair.fixed, q)?,
            quarter_turns: (pair.quarter_turns + q) % 4,
            ..pair.clone()
        });
    }
    Ok(out)
}

/// All ordered phase pairs `(moving, fixed)`, graded, optionally rotation-augmented.
pub fn build_dataset(seq: &Sequence4D, rotations: bool) -> Result<Vec<RegistrationPair>> {
    let k = seq.len();
    let mut out = Vec::new();
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let pair = RegistrationPair {
                moving: seq.phase(i).clone(),
                fixed: seq.phase(j).clone(),
                phase_i: i,
                phase_j: j,
                grade: grade_pair(i, j, k)?,
                quarter_turns: 0,
            };
            if rotations {
                out.extend(augment_rotations(&pair)?);
            } else {
                out.push(pair);
            }
        }
    }
    Ok(out)
}
