//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (visible without `--nocapture`) and fails when its check fails.
//!
//! The training-based checks share models trained once per test binary at
//! desk scale on the default phantom.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use cosf_core::autograd::Tensor;
use cosf_core::config::{AblationMode, LrSchedule, TrainConfig};
use cosf_core::losses::{
    coarse_loss, eval_scalar, fine_loss, ms_ssim, smooth, CoarseWeights, FineWeights,
};
use cosf_core::metrics::{
    endpoint_error, mean_magnitude, ncc_volume, nmi, psnr, psnr_from_mse, rmse, NMI_BINS,
};
use cosf_core::networks::{CoarseArch, CoarseDirNet, FineArch, SrArch, SrGenerator};
use cosf_core::phantom::{generate, grade_pair, Phantom, PhantomSpec};
use cosf_core::pipeline::{
    coarse_pairs, joint_finetune, pretrain_coarse, pretrain_sr, register, Bundle, JointModels,
    ModelSet, RegisterOptions, SliceSet,
};
use cosf_core::selftest;
use cosf_core::volume::{DisplacementField, Grid3, Volume};
use cosf_core::warp::{
    dvf_magnitude, field_difference, resample_volume, residual_update, warp_volume,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAIN_SUBJECTS: u64 = 1;
const HELD_OUT_SUBJECTS: [u64; 1] = [1000];
const MINUTES: f64 = 60.0;

fn report(name: &str, passed: bool, detail: String) {
    let line = format!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(passed, "{line}");
}

/// Training configuration for the desk-scale runs.
fn desk_config() -> TrainConfig {
    TrainConfig {
        epochs_coarse: 36,
        epochs_sr: 30,
        epochs_joint: 2,
        batch_sr: 15,
        batch_dir: 1,
        accumulate_dir: 1,
        lr_pretrain: LrSchedule {
            base: 1e-3,
            factor: 0.7,
            every: 8,
        },
        lr_joint: LrSchedule {
            base: 1e-4,
            factor: 0.9,
            every: 1,
        },
        coarse_arch: CoarseArch {
            widths: [8, 16, 16, 16],
        },
        fine_arch: FineArch {
            widths: [8, 16, 16, 16],
            prior_widths: [4, 8, 8, 8],
        },
        sr_arch: SrArch {
            generator_width: 16,
            discriminator_width: 16,
        },
        ..TrainConfig::default()
    }
}

struct Data {
    train: Vec<Phantom>,
    held_out: Vec<Phantom>,
}

fn data() -> &'static Data {
    static DATA: OnceLock<Data> = OnceLock::new();
    DATA.get_or_init(|| {
        let spec = PhantomSpec::default();
        let make = |s: u64| generate(&spec.subject(s)).unwrap();
        Data {
            train: (0..TRAIN_SUBJECTS).map(make).collect(),
            held_out: HELD_OUT_SUBJECTS.into_iter().map(make).collect(),
        }
    })
}

fn coarse() -> &'static (CoarseDirNet, f64) {
    static COARSE: OnceLock<(CoarseDirNet, f64)> = OnceLock::new();
    COARSE.get_or_init(|| {
        let cfg = desk_config();
        let t = Instant::now();
        let pairs = coarse_pairs(&data().train, &cfg).unwrap();
        let (net, _) = pretrain_coarse(&cfg, &pairs).unwrap();
        (net, t.elapsed().as_secs_f64())
    })
}

fn sr() -> &'static (SrGenerator, f64) {
    static SR: OnceLock<(SrGenerator, f64)> = OnceLock::new();
    SR.get_or_init(|| {
        let cfg = desk_config();
        let t = Instant::now();
        let slices = SliceSet::from_phantoms(&data().train).unwrap();
        let (g, _, _) = pretrain_sr(&cfg, &slices).unwrap();
        (g, t.elapsed().as_secs_f64())
    })
}

fn joint() -> &'static (BTreeMap<AblationMode, JointModels>, f64) {
    static JOINT: OnceLock<(BTreeMap<AblationMode, JointModels>, f64)> = OnceLock::new();
    JOINT.get_or_init(|| {
        let cfg = desk_config();
        let (c, g) = (&coarse().0, &sr().0);
        let t = Instant::now();
        let models = [AblationMode::CoarseFine, AblationMode::CosfFull]
            .into_iter()
            .map(|mode| {
                let gen = mode.uses_sr().then_some(g);
                (
                    mode,
                    joint_finetune(&cfg, mode, c, gen, None, &data().train)
                        .unwrap()
                        .0,
                )
            })
            .collect();
        (models, t.elapsed().as_secs_f64())
    })
}

fn model_set(mode: AblationMode) -> ModelSet {
    let c = coarse().0.clone();
    match mode {
        AblationMode::CoarseOnly => ModelSet {
            coarse: c.clone(),
            aligner: c,
            generator: None,
            fine: None,
        },
        _ => {
            let j = &joint().0[&mode];
            ModelSet {
                coarse: j.coarse.clone(),
                aligner: c,
                generator: j.generator.clone(),
                fine: Some(j.fine.clone()),
            }
        }
    }
}

/// Every ordered pair of distinct phases of the held-out subjects.
fn held_out_pairs() -> Vec<(&'static Phantom, usize, usize)> {
    let mut out = Vec::new();
    for p in &data().held_out {
        let k = p.lr.len();
        for i in 0..k {
            for j in (0..k).filter(|&j| j != i) {
                out.push((p, i, j));
            }
        }
    }
    out
}

fn run(models: &ModelSet, mode: AblationMode, p: &Phantom, i: usize, j: usize) -> Bundle {
    register(
        models,
        p.lr.phase(i),
        p.lr.phase(j),
        &p.prior,
        mode,
        RegisterOptions::default(),
    )
    .unwrap()
}

fn epe(p: &Phantom, i: usize, j: usize, phi: &DisplacementField) -> (f64, f64) {
    let g = p.spec.grid_hr();
    let truth = p.spec.pair_truth(&g, i, j).unwrap();
    let mask = p.spec.body_mask(&g);
    (
        endpoint_error(phi, &truth, Some(&mask)).unwrap().0,
        mean_magnitude(&truth, Some(&mask)).unwrap(),
    )
}

fn random_volume(grid: Grid3, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::from_fn(grid, |_, _, _| rng.random_range(0.0..1.0)).unwrap()
}

#[test]
fn a01_gradient_suite() {
    let t = Instant::now();
    let checks: Vec<_> = selftest::run()
        .into_iter()
        .filter(|c| c.name.starts_with("grad "))
        .collect();
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<_> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} ({})", c.name, c.detail))
        .collect();
    report(
        "gradient suite",
        failed.is_empty() && secs < 2.0 * MINUTES && checks.len() >= 40,
        format!("{} finite-difference checks at relative error < 1e-3 in {secs:.2} s; failed: {failed:?}", checks.len()),
    );
}

#[test]
fn a02_warp_identities() {
    let g = Grid3::new([12, 11, 10], [1.0; 3]).unwrap();
    let v = random_volume(g, 1);
    let zero = warp_volume(&v, &DisplacementField::zeros(g)).unwrap() == v;
    let shift = [2i64, -1, 3];
    let w = warp_volume(&v, &DisplacementField::constant(g, shift.map(|s| s as f32))).unwrap();
    let mut translation = true;
    let [nx, ny, nz] = g.dims().map(|d| d as i64);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (sx, sy, sz) = (x + shift[0], y + shift[1], z + shift[2]);
                if (0..nx).contains(&sx) && (0..ny).contains(&sy) && (0..nz).contains(&sz) {
                    translation &= w.at(x as usize, y as usize, z as usize)
                        == v.at(sx as usize, sy as usize, sz as usize);
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut field = || {
        DisplacementField::from_fn(g, |_, _, _| {
            std::array::from_fn(|_| rng.random_range(-3.0..3.0))
        })
        .unwrap()
    };
    let (v_field, phi_tilde) = (field(), field());
    let star = residual_update(&v_field, &phi_tilde).unwrap();
    let algebra = star
        .data()
        .iter()
        .zip(v_field.data().iter().zip(phi_tilde.data()))
        .all(|(s, (a, b))| *s == a + b);
    report(
        "warp identities",
        zero && translation && algebra,
        format!("zero field exact {zero}, integer translation exact {translation}, residual update exact {algebra}"),
    );
}

#[test]
fn a03_loss_extrema() {
    let g = Grid3::new([10, 9, 8], [1.0; 3]).unwrap();
    let img = random_volume(g, 3).to_tensor();
    let zero = Tensor::zeros(&g.tensor_shape(3));
    let cw = CoarseWeights {
        smooth: 4.0,
        inverse_consistency: 0.0,
        window: 9,
    };
    let fw = FineWeights {
        alpha: 0.35,
        smooth: 5.0,
        window: 9,
        use_prior: true,
    };
    let c = eval_scalar(&[&img, &zero], |_, v| {
        Ok(coarse_loss(v[0], v[0], v[1], v[1], cw)?.total)
    })
    .unwrap();
    let f = eval_scalar(&[&img, &zero], |_, v| {
        Ok(fine_loss(v[0], v[0], v[0], v[1], fw)?.total)
    })
    .unwrap();
    let constant = Tensor::from_vec(g.tensor_shape(3), vec![1.25; 3 * g.len()]);
    let s = eval_scalar(&[&constant], |_, v| smooth(v[0])).unwrap();
    let slices = random_volume(Grid3::new([64, 64, 2], [1.0; 3]).unwrap(), 4);
    let x = Tensor::from_vec(vec![2, 1, 64, 64], slices.data().to_vec());
    let m = eval_scalar(&[&x], |_, v| ms_ssim(v[0], v[0])).unwrap();
    let ok =
        (c + 2.0).abs() <= 1e-4 && (f + 1.0).abs() <= 1e-4 && s == 0.0 && (m - 1.0).abs() <= 1e-6;
    report(
        "loss extrema",
        ok,
        format!("coarse {c:.6} (-2), fine {f:.6} (-1), smooth(constant) {s}, ms_ssim(x, x) {m:.7}"),
    );
}

#[test]
fn a04_metric_sanity() {
    let g = Grid3::new([16, 16, 16], [1.0; 3]).unwrap();
    let x = random_volume(g, 5);
    let r = rmse(&x, &x).unwrap();
    let p = psnr_from_mse(0.01, 1.0);
    let n = nmi(&x, &x, NMI_BINS).unwrap();
    let big = Grid3::new([64, 64, 64], [1.0; 3]).unwrap();
    let ind = nmi(&random_volume(big, 6), &random_volume(big, 7), NMI_BINS).unwrap();
    report(
        "metric sanity",
        r == 0.0 && p == 20.0 && (n - 2.0).abs() <= 1e-9 && ind < 1.05,
        format!("rmse(x, x) {r}, psnr at mse 0.01 {p} dB, nmi(x, x) {n}, nmi of independent noise at 64^3 {ind:.4}"),
    );
}

#[test]
fn a05_registration_efficacy() {
    let (net, secs) = coarse();
    let models = ModelSet {
        coarse: net.clone(),
        aligner: net.clone(),
        generator: None,
        fine: None,
    };
    let mut sums = [(0.0f64, 0.0f64, 0usize); 5];
    for (p, i, j) in held_out_pairs() {
        let b = run(&models, AblationMode::CoarseOnly, p, i, j);
        let (e, z) = epe(p, i, j, &b.phi_star);
        let g = grade_pair(i, j, p.lr.len()).unwrap() as usize;
        sums[g].0 += e;
        sums[g].1 += z;
        sums[g].2 += 1;
    }
    let ratios: Vec<f64> = (1..5).map(|g| sums[g].0 / sums[g].1).collect();
    let detail: Vec<String> = (1..5)
        .map(|g| {
            let n = sums[g].2 as f64;
            format!(
                "grade {g}: {:.3} vs {:.3} (x{:.2})",
                sums[g].0 / n,
                sums[g].1 / n,
                ratios[g - 1]
            )
        })
        .collect();
    report(
        "registration efficacy",
        ratios.iter().all(|&r| r <= 0.5) && *secs <= 30.0 * MINUTES,
        format!(
            "mean EPE coarse vs zero field, {}; training {:.1} min",
            detail.join(", "),
            secs / MINUTES
        ),
    );
}

#[test]
fn a06_ablation_ordering() {
    let t = Instant::now();
    let modes = [
        AblationMode::CoarseOnly,
        AblationMode::CoarseFine,
        AblationMode::CosfFull,
    ];
    let sets: Vec<ModelSet> = modes.iter().map(|&m| model_set(m)).collect();
    let mut ncc = [0.0f64; 3];
    let mut err = [0.0f64; 3];
    let pairs = held_out_pairs();
    for &(p, i, j) in &pairs {
        for (k, &mode) in modes.iter().enumerate() {
            let b = run(&sets[k], mode, p, i, j);
            ncc[k] += ncc_volume(&b.fixed_enhanced, &b.moving_warped, 9).unwrap();
            err[k] += epe(p, i, j, &b.phi_star).0;
        }
    }
    let n = pairs.len() as f64;
    let (ncc, err) = (ncc.map(|x| x / n), err.map(|x| x / n));
    let secs = joint().1 + t.elapsed().as_secs_f64();
    report(
        "ablation ordering",
        ncc[0] <= ncc[1] && ncc[1] <= ncc[2] && err[2] <= err[0] && secs <= 60.0 * MINUTES,
        format!(
            "NCC coarse_only {:.4}, coarse_fine {:.4}, cosf_full {:.4}; EPE cosf_full {:.3} vs coarse_only {:.3}; ladder {:.1} min",
            ncc[0], ncc[1], ncc[2], err[2], err[0], secs / MINUTES
        ),
    );
}

fn slice_ms_ssim(a: &Volume, b: &Volume) -> f64 {
    let g = a.grid();
    let t = |v: &Volume| Tensor::from_vec(vec![g.nz(), 1, g.ny(), g.nx()], v.data().to_vec());
    eval_scalar(&[&t(a), &t(b)], |_, v| ms_ssim(v[0], v[1])).unwrap() as f64
}

#[test]
fn a07_sr_efficacy() {
    let (gen, secs) = sr();
    let (mut p_sr, mut p_tri, mut m_sr, mut m_tri, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in &data().held_out {
        for k in 0..p.lr.len() {
            let hr = p.hr.phase(k);
            let out = gen.enhance_volume(p.lr.phase(k)).unwrap();
            let tri = resample_volume(p.lr.phase(k), hr.grid()).unwrap();
            p_sr += psnr(&out, hr, 1.0).unwrap();
            p_tri += psnr(&tri, hr, 1.0).unwrap();
            m_sr += slice_ms_ssim(&out, hr);
            m_tri += slice_ms_ssim(&tri, hr);
            n += 1.0;
        }
    }
    let (dp, dm) = ((p_sr - p_tri) / n, (m_sr - m_tri) / n);
    report(
        "SR efficacy",
        dp >= 1.0 && dm >= 0.02 && *secs <= 30.0 * MINUTES,
        format!(
            "PSNR {:.2} vs trilinear {:.2} dB (+{dp:.2}), MS-SSIM {:.4} vs {:.4} (+{dm:.4}); training {:.1} min",
            p_sr / n,
            p_tri / n,
            m_sr / n,
            m_tri / n,
            secs / MINUTES
        ),
    );
}

#[test]
fn a08_residual_decomposition() {
    let models = model_set(AblationMode::CosfFull);
    let dir = tempfile::tempdir().unwrap();
    let (mut exact, mut v_sum, mut t_sum) = (true, 0.0, 0.0);
    let pairs = held_out_pairs();
    for (n, &(p, i, j)) in pairs.iter().enumerate() {
        let b = run(&models, AblationMode::CosfFull, p, i, j);
        let residual = dvf_magnitude(&b.v);
        exact &= dvf_magnitude(&field_difference(&b.phi_star, &b.phi_tilde).unwrap()) == residual;
        let heatmaps = b.heatmaps().unwrap();
        exact &= heatmaps
            .iter()
            .any(|(name, h)| *name == "residual_magnitude" && *h == residual);
        if n % 15 == 0 {
            b.save(dir.path()).unwrap();
            let exported =
                cosf_core::io::read_volume(&dir.path().join("residual_magnitude.mvol")).unwrap();
            exact &= exported == residual;
        }
        let mask = p.spec.body_mask(&p.spec.grid_hr());
        v_sum += mean_magnitude(&b.v, Some(&mask)).unwrap();
        t_sum += mean_magnitude(&b.phi_tilde, Some(&mask)).unwrap();
    }
    report(
        "residual decomposition",
        exact && v_sum < t_sum,
        format!(
            "heatmaps bitwise equal {exact}; mean |v| {:.4} vs mean |phi_tilde| {:.4}",
            v_sum / pairs.len() as f64,
            t_sum / pairs.len() as f64
        ),
    );
}

fn cosf(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_cosf"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in walk(dir) {
        let name = e.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
        if name.ends_with(".ckpt") || name.ends_with(".csv") {
            out.insert(name, std::fs::read(&e).unwrap());
        }
    }
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn a09_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let spec = tmp.path().join("spec.json");
    std::fs::write(
        &spec,
        r#"{"grid_lr": {"dims": [20, 16, 8], "spacing_mm": [2.7, 2.7, 3.0]}, "phases": 4}"#,
    )
    .unwrap();
    let data = tmp.path().join("phantom");
    cosf(&["phantom", "--spec", &s(&spec), "--out", &s(&data)]);
    let cfg = tmp.path().join("config.json");
    let config = TrainConfig {
        epochs_coarse: 2,
        epochs_sr: 2,
        epochs_joint: 1,
        batch_sr: 4,
        accumulate_dir: 2,
        lr_pretrain: LrSchedule {
            base: 1e-3,
            factor: 0.9,
            every: 1,
        },
        lr_joint: LrSchedule {
            base: 1e-3,
            factor: 0.9,
            every: 1,
        },
        coarse_arch: CoarseArch {
            widths: [4, 4, 4, 4],
        },
        fine_arch: FineArch {
            widths: [4, 4, 4, 4],
            prior_widths: [2, 2, 2, 2],
        },
        sr_arch: SrArch {
            generator_width: 4,
            discriminator_width: 4,
        },
        ..TrainConfig::default()
    };
    std::fs::write(&cfg, serde_json::to_string(&config).unwrap()).unwrap();
    let mut runs = Vec::new();
    for r in 0..2 {
        let out = tmp.path().join(format!("run{r}"));
        for stage in ["coarse", "sr", "joint"] {
            cosf(&[
                "train",
                stage,
                "--config",
                &s(&cfg),
                "--data",
                &s(&data),
                "--out",
                &s(&out),
            ]);
        }
        let csv = out.join("metrics.csv");
        cosf(&[
            "evaluate",
            "--models",
            &s(&out),
            "--data",
            &s(&data),
            "--mode",
            "identity",
            "--mode",
            "cosf_full",
            "--out",
            &s(&csv),
        ]);
        runs.push(files(&out));
    }
    let names: Vec<&String> = runs[0].keys().collect();
    let identical = runs[0] == runs[1];
    report(
        "determinism",
        identical && names.len() >= 9,
        format!("two runs of train coarse/sr/joint and evaluate, {} files compared, identical {identical}", names.len()),
    );
}

#[test]
fn a10_default_config() {
    let c = TrainConfig::default();
    let lambdas = [
        c.coarse_smooth_weight,
        c.sr_l1_weight,
        c.sr_ms_ssim_weight,
        c.fine_smooth_weight,
    ];
    let ok = lambdas == [4.0, 10.0, 10.0, 5.0]
        && c.alpha == 0.35
        && c.lr_pretrain
            == LrSchedule {
                base: 4e-5,
                factor: 0.9,
                every: 30,
            }
        && c.lr_joint
            == LrSchedule {
                base: 5e-5,
                factor: 0.9,
                every: 10,
            };
    report(
        "default config",
        ok,
        format!(
            "lambdas {lambdas:?}, alpha {}, lr {:?} / {:?}",
            c.alpha, c.lr_pretrain, c.lr_joint
        ),
    );
}
