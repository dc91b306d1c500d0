use cosf_core::autograd::Tape;
use cosf_core::config::{AblationMode, TrainConfig};
use cosf_core::losses::{fine_loss, FineWeights};
use cosf_core::metrics::{ncc_volume, nmi, rmse};
use cosf_core::networks::{CoarseArch, CoarseDirNet, FineArch, FineDirNet, SrArch, SrGenerator};
use cosf_core::phantom::{generate, Phantom, PhantomSpec};
use cosf_core::pipeline::{
    coarse_pairs, evaluate_pairs, joint_finetune, joint_loss_at_start, model_path, pretrain_coarse,
    pretrain_sr, register, summarize, JointModels, Method, ModelSet, Reference, RegisterOptions,
    SliceSet, COARSE_FILE, FINE_FILE, GENERATOR_FILE,
};
use cosf_core::volume::{DisplacementField, Grid3};
use cosf_core::warp::{dvf_magnitude, resample_volume, upsample_dvf, warp_volume};
use cosf_core::Error;

fn tiny_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        grid_lr: Grid3::new([20, 16, 8], [2.7, 2.7, 3.0]).unwrap(),
        phases: 4,
        seed,
        ..PhantomSpec::default()
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs_coarse: 2,
        epochs_sr: 2,
        epochs_joint: 1,
        batch_sr: 6,
        accumulate_dir: 3,
        lr_pretrain: cosf_core::config::LrSchedule {
            base: 1e-3,
            factor: 0.9,
            every: 1,
        },
        lr_joint: cosf_core::config::LrSchedule {
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
    }
}

/// Randomly initialised models with non-zero heads so every stage moves something.
fn perturbed_models(seed: u64) -> (CoarseDirNet, SrGenerator, FineDirNet) {
    let cfg = tiny_config();
    let mut c = CoarseDirNet::new(cfg.coarse_arch, seed).unwrap();
    let mut g = SrGenerator::new(4, seed).unwrap();
    let mut f = FineDirNet::new(cfg.fine_arch, seed).unwrap();
    for params in [&mut c.params, &mut g.params, &mut f.params] {
        for i in 0..params.len() {
            if params.names()[i].contains("head") {
                for (k, w) in params.get_mut(i).data_mut().iter_mut().enumerate() {
                    *w = 0.05 * ((k * 7 + 3) % 11) as f32 / 11.0 - 0.02;
                }
            }
        }
    }
    (c, g, f)
}

fn full_set(seed: u64) -> ModelSet {
    let (c, g, f) = perturbed_models(seed);
    ModelSet {
        aligner: c.clone(),
        coarse: c,
        generator: Some(g),
        fine: Some(f),
    }
}

#[test]
fn cascade_matches_its_stages() {
    let ph = generate(&tiny_spec(1)).unwrap();
    let set = full_set(5);
    let (m, f) = (ph.lr.phase(0), ph.lr.phase(2));
    let b = register(
        &set,
        m,
        f,
        &ph.prior,
        AblationMode::CosfFull,
        RegisterOptions::default(),
    )
    .unwrap();
    let grid_hr = ph.spec.grid_hr();
    let pair = set.coarse.register(f, m).unwrap();
    assert_eq!(b.phi_coarse, pair);
    assert_eq!(b.phi_tilde, upsample_dvf(&pair.m2f, &grid_hr).unwrap());
    let gen = set.generator.as_ref().unwrap();
    assert_eq!(b.moving_enhanced, gen.enhance_volume(m).unwrap());
    assert_eq!(b.fixed_enhanced, gen.enhance_volume(f).unwrap());
    assert_eq!(
        b.moving_coarse,
        warp_volume(&b.moving_enhanced, &b.phi_tilde).unwrap()
    );
    let prior = b.prior_aligned.as_ref().unwrap();
    let (v, star) = set
        .fine
        .as_ref()
        .unwrap()
        .refine(&b.fixed_enhanced, &b.moving_enhanced, prior, &b.phi_tilde)
        .unwrap();
    assert_eq!((&b.v, &b.phi_star), (&v, &star));
    assert!(b.v.data().iter().any(|&x| x != 0.0));
    assert_eq!(
        b.moving_warped,
        warp_volume(&b.moving_enhanced, &b.phi_star).unwrap()
    );
    for (k, s) in b.phi_star.data().iter().enumerate() {
        assert_eq!(*s, b.v.data()[k] + b.phi_tilde.data()[k]);
        assert_eq!(*s - b.phi_tilde.data()[k], b.v.data()[k]);
    }
    let maps = b.heatmaps().unwrap();
    assert_eq!(maps[2].0, "residual_magnitude");
    assert_eq!(maps[2].1, dvf_magnitude(&b.v));
}

#[test]
fn ablation_modes_switch_stages() {
    let ph = generate(&tiny_spec(2)).unwrap();
    let set = full_set(6);
    let (m, f) = (ph.lr.phase(1), ph.lr.phase(3));
    let only = register(
        &set,
        m,
        f,
        &ph.prior,
        AblationMode::CoarseOnly,
        RegisterOptions::default(),
    )
    .unwrap();
    assert!(only.v.data().iter().all(|&x| x == 0.0));
    assert_eq!(only.phi_star, only.phi_tilde);
    assert_eq!(
        only.moving_enhanced,
        resample_volume(m, &ph.spec.grid_hr()).unwrap()
    );
    assert_eq!(only.moving_warped, only.moving_coarse);

    let cf = register(
        &set,
        m,
        f,
        &ph.prior,
        AblationMode::CoarseFine,
        RegisterOptions::default(),
    )
    .unwrap();
    assert_eq!(cf.moving_enhanced, only.moving_enhanced);
    assert!(cf.prior_aligned.is_none());

    let np = register(
        &set,
        m,
        f,
        &ph.prior,
        AblationMode::CosfNoPrior,
        RegisterOptions::default(),
    )
    .unwrap();
    assert_ne!(np.moving_enhanced, only.moving_enhanced);
    assert!(np.prior_aligned.is_none());

    let lin = RegisterOptions {
        linear_upsampling: true,
        ..Default::default()
    };
    let tri = register(&set, m, f, &ph.prior, AblationMode::CosfFull, lin).unwrap();
    assert_eq!(tri.moving_enhanced, only.moving_enhanced);
    assert!(tri.prior_aligned.is_some());
}

#[test]
fn missing_checkpoints_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = ModelSet::load(dir.path(), AblationMode::CosfFull).unwrap_err();
    assert!(
        matches!(err, Error::MissingModel(ref m) if m.contains("cosf_full") && m.contains(COARSE_FILE)),
        "{err}"
    );
    let (c, g, f) = perturbed_models(1);
    c.save(&model_path(dir.path(), None, COARSE_FILE)).unwrap();
    assert!(ModelSet::load(dir.path(), AblationMode::CoarseOnly).is_ok());
    std::fs::create_dir_all(dir.path().join("cosf_full")).unwrap();
    c.save(&model_path(
        dir.path(),
        Some(AblationMode::CosfFull),
        COARSE_FILE,
    ))
    .unwrap();
    f.save(&model_path(
        dir.path(),
        Some(AblationMode::CosfFull),
        FINE_FILE,
    ))
    .unwrap();
    let err = ModelSet::load(dir.path(), AblationMode::CosfFull).unwrap_err();
    assert!(
        matches!(err, Error::MissingModel(ref m) if m.contains(GENERATOR_FILE)),
        "{err}"
    );
    g.save(&model_path(
        dir.path(),
        Some(AblationMode::CosfFull),
        GENERATOR_FILE,
    ))
    .unwrap();
    let set = ModelSet::load(dir.path(), AblationMode::CosfFull).unwrap();
    assert_eq!(set.fine.unwrap().params, f.params);
}

#[test]
fn training_is_deterministic_and_moves_weights() {
    let phantoms = vec![generate(&tiny_spec(3)).unwrap()];
    let cfg = tiny_config();
    let pairs = coarse_pairs(&phantoms, &cfg).unwrap();
    assert_eq!(pairs.len(), 12);
    let (c1, log1) = pretrain_coarse(&cfg, &pairs).unwrap();
    let (c2, log2) = pretrain_coarse(&cfg, &pairs).unwrap();
    assert_eq!(c1.params, c2.params);
    assert_eq!(log1, log2);
    assert_eq!(log1.rows.len(), 2);
    assert_ne!(
        c1.params,
        CoarseDirNet::new(cfg.coarse_arch, cfg.seed).unwrap().params
    );

    let slices = SliceSet::from_phantoms(&phantoms).unwrap();
    assert_eq!(slices.len(), 4 * 8);
    let (g1, d1, slog) = pretrain_sr(&cfg, &slices).unwrap();
    let (g2, d2, _) = pretrain_sr(&cfg, &slices).unwrap();
    assert_eq!((&g1.params, &d1.params), (&g2.params, &d2.params));
    let acc = slog.column("d_accuracy").unwrap();
    assert!(acc.iter().all(|a| (0.0..=1.0).contains(a)));

    for mode in [
        AblationMode::CoarseFine,
        AblationMode::CosfNoPrior,
        AblationMode::CosfFull,
    ] {
        let (j1, jlog) = joint_finetune(&cfg, mode, &c1, Some(&g1), Some(&d1), &phantoms).unwrap();
        let (j2, _) = joint_finetune(&cfg, mode, &c1, Some(&g1), Some(&d1), &phantoms).unwrap();
        assert_eq!(j1, j2);
        assert_eq!(j1.generator.is_some(), mode.uses_sr());
        assert_ne!(j1.coarse.params, c1.params);
        let prior_col = jlog.column("ncc_prior").unwrap();
        assert_eq!(prior_col.iter().all(|&x| x == 0.0), !mode.uses_prior());
        assert!(j1.discriminator.is_none());
    }
    assert!(joint_finetune(
        &cfg,
        AblationMode::CoarseOnly,
        &c1,
        Some(&g1),
        None,
        &phantoms
    )
    .is_err());
    assert!(matches!(
        joint_finetune(&cfg, AblationMode::CosfFull, &c1, None, None, &phantoms),
        Err(Error::MissingModel(_))
    ));

    let unfrozen = TrainConfig {
        freeze_discriminator: false,
        ..cfg.clone()
    };
    assert!(matches!(
        joint_finetune(
            &unfrozen,
            AblationMode::CosfFull,
            &c1,
            Some(&g1),
            None,
            &phantoms
        ),
        Err(Error::MissingModel(_))
    ));
    let (j, jlog) = joint_finetune(
        &unfrozen,
        AblationMode::CosfFull,
        &c1,
        Some(&g1),
        Some(&d1),
        &phantoms,
    )
    .unwrap();
    assert_ne!(j.discriminator.unwrap().params, d1.params);
    assert!(jlog.last("g_adv").unwrap() > 0.0);
    let (j, _) = joint_finetune(
        &unfrozen,
        AblationMode::CoarseFine,
        &c1,
        None,
        None,
        &phantoms,
    )
    .unwrap();
    assert!(j.discriminator.is_none());
}

#[test]
fn joint_loss_starts_at_the_pretrained_cascade() {
    let ph = generate(&tiny_spec(4)).unwrap();
    let cfg = tiny_config();
    let (c, g, _) = perturbed_models(9);
    let fine = FineDirNet::new(cfg.fine_arch, 1).unwrap();
    let nets = JointModels {
        coarse: c.clone(),
        generator: Some(g.clone()),
        fine: fine.clone(),
        discriminator: None,
    };
    let set = ModelSet {
        aligner: c.clone(),
        coarse: c,
        generator: Some(g),
        fine: Some(fine),
    };
    let (m, f) = (ph.lr.phase(0), ph.lr.phase(2));
    let b = register(
        &set,
        m,
        f,
        &ph.prior,
        AblationMode::CosfFull,
        RegisterOptions::default(),
    )
    .unwrap();
    let prior = b.prior_aligned.clone().unwrap();
    let start =
        joint_loss_at_start(&cfg, AblationMode::CosfFull, &nets, m, f, Some(&prior)).unwrap();
    let tape = Tape::new();
    let w = FineWeights {
        alpha: cfg.alpha,
        smooth: cfg.fine_smooth_weight,
        window: cfg.ncc_window,
        use_prior: true,
    };
    let expected = fine_loss(
        tape.constant(b.fixed_enhanced.to_tensor()),
        tape.constant(b.moving_enhanced.to_tensor()),
        tape.constant(prior.to_tensor()),
        tape.constant(b.phi_star.to_tensor()),
        w,
    )
    .unwrap()
    .total
    .item();
    assert!((start - expected).abs() < 1e-5, "{start} vs {expected}");
}

#[test]
fn identity_rows_are_raw_metrics() {
    let ph = generate(&PhantomSpec {
        phases: 8,
        ..tiny_spec(5)
    })
    .unwrap();
    let rows = evaluate_pairs(&ph, &[(Method::Identity, None)], 1).unwrap();
    assert_eq!(rows.len(), 8 * 7 * 2);
    let grid_hr = ph.spec.grid_hr();
    for r in rows
        .iter()
        .filter(|r| r.reference == Reference::Fixed)
        .take(5)
    {
        let up = resample_volume(ph.lr.phase(r.phase_i), &grid_hr).unwrap();
        let truth = ph.hr.phase(r.phase_j);
        assert_eq!(r.rmse, rmse(truth, &up).unwrap());
        assert_eq!(r.nmi, nmi(truth, &up, 64).unwrap());
        assert_eq!(r.ncc, ncc_volume(truth, &up, 9).unwrap());
        let t = ph.spec.pair_truth(&grid_hr, r.phase_i, r.phase_j).unwrap();
        let mask = ph.spec.body_mask(&grid_hr);
        let zero =
            cosf_core::metrics::endpoint_error(&DisplacementField::zeros(grid_hr), &t, Some(&mask))
                .unwrap();
        assert_eq!((r.epe_mean, r.epe_max), zero);
    }
    let s = summarize(&rows);
    let ncc = |g| {
        s.group(Method::Identity, Reference::Fixed, g)
            .unwrap()
            .metrics["ncc"]
            .mean
    };
    assert!(ncc(4) < ncc(1), "grade 4 {} vs grade 1 {}", ncc(4), ncc(1));
    let threaded = evaluate_pairs(&ph, &[(Method::Identity, None)], 3).unwrap();
    assert_eq!(threaded, rows);
    assert!(matches!(
        evaluate_pairs(&ph, &[(Method::Mode(AblationMode::CoarseOnly), None)], 1),
        Err(Error::MissingModel(_))
    ));
}

#[test]
fn bundle_files_round_trip() {
    let ph: Phantom = generate(&tiny_spec(6)).unwrap();
    let set = full_set(2);
    let b = register(
        &set,
        ph.lr.phase(0),
        ph.lr.phase(1),
        &ph.prior,
        AblationMode::CosfFull,
        RegisterOptions::default(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = b.save(dir.path()).unwrap();
    assert_eq!(written.len(), 6 + 3 + 6);
    let star = cosf_core::io::read_dvf(&dir.path().join("phi_star.mdvf")).unwrap();
    assert_eq!(star, b.phi_star);
    let res = cosf_core::io::read_volume(&dir.path().join("residual_magnitude.mvol")).unwrap();
    assert_eq!(res, dvf_magnitude(&b.v));
}
