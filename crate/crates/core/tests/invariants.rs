use cosf_core::io;
use cosf_core::metrics::{endpoint_error, ncc_volume, nmi, psnr, rmse, ssim_volume};
use cosf_core::phantom::grade_pair;
use cosf_core::volume::{DisplacementField, Grid3, Volume};
use cosf_core::warp::{compose, dvf_scale, split_residual, upsample_dvf, warp_volume};
use proptest::prelude::*;

fn grid() -> impl Strategy<Value = Grid3> {
    (2usize..6, 2usize..6, 2usize..5)
        .prop_map(|(x, y, z)| Grid3::new([x, y, z], [1.0, 1.5, 2.0]).unwrap())
}

fn volume() -> impl Strategy<Value = Volume> {
    grid().prop_flat_map(|g| {
        prop::collection::vec(0.0f32..1.0, g.len()).prop_map(move |d| Volume::new(g, d).unwrap())
    })
}

fn field_on(g: Grid3, limit: f32) -> impl Strategy<Value = DisplacementField> {
    prop::collection::vec(-limit..limit, 3 * g.len())
        .prop_map(move |d| DisplacementField::new(g, d).unwrap())
}

fn volume_and_field() -> impl Strategy<Value = (Volume, DisplacementField)> {
    volume().prop_flat_map(|v| {
        let g = *v.grid();
        (Just(v), field_on(g, 3.0))
    })
}

fn two_volumes() -> impl Strategy<Value = (Volume, Volume)> {
    grid().prop_flat_map(|g| {
        let v = move || {
            prop::collection::vec(0.0f32..1.0, g.len())
                .prop_map(move |d| Volume::new(g, d).unwrap())
        };
        (v(), v())
    })
}

fn three_fields() -> impl Strategy<Value = (DisplacementField, DisplacementField, DisplacementField)>
{
    grid().prop_flat_map(|g| (field_on(g, 4.0), field_on(g, 4.0), field_on(g, 4.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_field_warp_is_identity(v in volume()) {
        let w = warp_volume(&v, &DisplacementField::zeros(*v.grid())).unwrap();
        prop_assert_eq!(w.data(), v.data());
    }

    #[test]
    fn warped_values_stay_in_source_range((v, phi) in volume_and_field()) {
        let (lo, hi) = v.min_max();
        let w = warp_volume(&v, &phi).unwrap();
        for &x in w.data() {
            prop_assert!(x >= lo - 1e-6 && x <= hi + 1e-6);
        }
    }

    #[test]
    fn integer_shift_moves_voxels((v, s) in (volume(), (0i32..2, 0i32..2, 0i32..2))) {
        let g = *v.grid();
        let phi = DisplacementField::constant(g, [s.0 as f32, s.1 as f32, s.2 as f32]);
        let w = warp_volume(&v, &phi).unwrap();
        let [nx, ny, nz] = g.dims();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let src = [
                        (x as i32 + s.0).min(nx as i32 - 1) as usize,
                        (y as i32 + s.1).min(ny as i32 - 1) as usize,
                        (z as i32 + s.2).min(nz as i32 - 1) as usize,
                    ];
                    prop_assert_eq!(w.at(x, y, z), v.at(src[0], src[1], src[2]));
                }
            }
        }
    }

    #[test]
    fn composing_with_zero_is_neutral(phi in grid().prop_flat_map(|g| field_on(g, 3.0))) {
        let zero = DisplacementField::zeros(*phi.grid());
        prop_assert_eq!(&compose(&phi, &zero).unwrap(), &phi);
        prop_assert_eq!(&compose(&zero, &phi).unwrap(), &phi);
    }

    #[test]
    fn constant_fields_upsample_to_scaled_constants(
        (g, c) in (grid(), prop::array::uniform3(-3.0f32..3.0)),
        factor in 1usize..4,
    ) {
        let fine = g.refined_in_plane(factor);
        let up = upsample_dvf(&DisplacementField::constant(g, c), &fine).unwrap();
        let s = dvf_scale(&g, &fine);
        for u in up.vectors() {
            for k in 0..3 {
                prop_assert!((u[k] - c[k] * s[k]).abs() <= 1e-5 * (1.0 + c[k].abs() * s[k]));
            }
        }
    }

    #[test]
    fn residual_split_is_exact((v, t, _) in three_fields()) {
        let (r, total) = split_residual(&v, &t).unwrap();
        for i in 0..r.data().len() {
            let (r, s, t, v) = (r.data()[i], total.data()[i], t.data()[i], v.data()[i]);
            prop_assert_eq!(r + t, s);
            prop_assert_eq!(s - t, r);
            prop_assert!((r - v).abs() <= 4.0 * f32::EPSILON * (1.0 + v.abs() + t.abs()));
        }
    }

    #[test]
    fn image_metrics_are_symmetric((a, b) in two_volumes()) {
        prop_assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
        prop_assert!(rmse(&a, &b).unwrap() >= 0.0);
        let d = (nmi(&a, &b, 16).unwrap() - nmi(&b, &a, 16).unwrap()).abs();
        prop_assert!(d < 1e-9);
        let n = (ncc_volume(&a, &b, 3).unwrap() - ncc_volume(&b, &a, 3).unwrap()).abs();
        prop_assert!(n < 1e-5);
    }

    #[test]
    fn image_metrics_peak_on_identical_inputs(a in volume()) {
        prop_assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        prop_assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
        prop_assert!((ssim_volume(&a, &a).unwrap() - 1.0).abs() < 1e-4);
        let n = nmi(&a, &a, 16).unwrap();
        prop_assert!((1.0..=2.0 + 1e-12).contains(&n));
    }

    #[test]
    fn endpoint_error_obeys_the_triangle_inequality((a, b, c) in three_fields()) {
        let (ab, ab_max) = endpoint_error(&a, &b, None).unwrap();
        let (bc, _) = endpoint_error(&b, &c, None).unwrap();
        let (ac, _) = endpoint_error(&a, &c, None).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
        prop_assert!(ab <= ab_max + 1e-12);
        prop_assert_eq!(endpoint_error(&a, &a, None).unwrap(), (0.0, 0.0));
        prop_assert_eq!(endpoint_error(&b, &a, None).unwrap().0, ab);
    }

    #[test]
    fn grades_are_symmetric_and_capped(phases in 2usize..16, i in 0usize..16, j in 0usize..16) {
        let (i, j) = (i % phases, j % phases);
        if i == j {
            prop_assert!(grade_pair(i, j, phases).is_err());
        } else {
            let g = grade_pair(i, j, phases).unwrap();
            prop_assert_eq!(g, grade_pair(j, i, phases).unwrap());
            prop_assert!((1..=4).contains(&g));
        }
        prop_assert!(grade_pair(i, phases, phases).is_err());
    }

    #[test]
    fn volumes_round_trip_through_files((v, phi) in volume_and_field()) {
        let dir = tempfile::tempdir().unwrap();
        io::write_volume(&v, &dir.path().join("v.mvol")).unwrap();
        io::write_dvf(&phi, &dir.path().join("f.mdvf")).unwrap();
        prop_assert_eq!(io::read_volume(&dir.path().join("v.mvol")).unwrap(), v);
        prop_assert_eq!(io::read_dvf(&dir.path().join("f.mdvf")).unwrap(), phi);
    }
}
