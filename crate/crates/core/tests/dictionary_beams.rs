mod common;

use beamspace_core::array::{diffuse_coherence, steering_vector};
use beamspace_core::beamspace::beampattern;
use beamspace_core::dictionary::{
    build_fixed_dictionary, fixed_beam, init_dictionary, init_semi_learnable, uniform_doa_grid, FixedKind, Regime, SteeringTable,
    TrainableDictionary, SD_LOADING,
};
use beamspace_core::linalg::{dot_h, norm_sqr, CMatrix};
use beamspace_core::stft::StftConfig;
use beamspace_core::C64;
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn grids() {
    assert_eq!(uniform_doa_grid(36).unwrap(), (0..36).map(|p| p as f64 * 10.0).collect::<Vec<_>>());
    assert_eq!(uniform_doa_grid(1).unwrap(), vec![0.0]);
    assert_eq!(uniform_doa_grid(4).unwrap(), vec![0.0, 90.0, 180.0, 270.0]);
    assert!(uniform_doa_grid(0).is_err());
}

#[test]
fn fixed_dictionaries_are_distortionless_on_the_full_grid() {
    let g = seven_mic_array();
    let cfg = StftConfig::default();
    for kind in [FixedKind::DelayAndSum, FixedKind::Superdirective] {
        let d = build_fixed_dictionary(&g, &cfg, kind, 36, SD_LOADING).unwrap();
        assert_eq!((d.bins(), d.mics(), d.beams()), (161, 7, 36));
        assert!(d.distortionless_error().unwrap() < 1e-8, "{kind:?}");
        // check against freshly computed steering too
        for k in (0..161).step_by(16) {
            for p in (0..36).step_by(5) {
                let h = steering_vector(&g, d.doa_grid[p], d.bin_freqs[k]).unwrap().elements;
                assert!((dot_h(&d.beam(k, p), &h) - C64::new(1.0, 0.0)).norm() < 1e-8);
            }
        }
    }
}

#[test]
fn delay_and_sum_is_steering_over_m() {
    let g = seven_mic_array();
    let d = build_fixed_dictionary(&g, &StftConfig::default(), FixedKind::DelayAndSum, 36, SD_LOADING).unwrap();
    for k in [0, 40, 160] {
        for p in [0, 9, 27] {
            let h = steering_vector(&g, d.doa_grid[p], d.bin_freqs[k]).unwrap().elements;
            for (b, hm) in d.beam(k, p).iter().zip(&h) {
                assert!((b - hm / 7.0).norm() < 1e-14);
            }
        }
    }
}

#[test]
fn superdirective_trades_white_noise_gain() {
    let g = seven_mic_array();
    let f = 2000.0;
    let h = steering_vector(&g, 30.0, f).unwrap();
    let phi = diffuse_coherence(&g, f);
    let b = fixed_beam(&h, &phi, SD_LOADING).unwrap();
    // independent construction through nalgebra
    let loaded = phi.entries.add_diagonal(SD_LOADING * phi.entries.trace().re / 7.0);
    let x = nalgebra_solve(&loaded, &h.elements);
    let denom = dot_h(&h.elements, &x);
    let reference: Vec<C64> = x.iter().map(|v| v / denom).collect();
    assert!(relative_deviation(&b, &reference) < 1e-9);
    let wng = 1.0 / norm_sqr(&b);
    assert!(wng < 7.0, "{wng}");
    // delay-and-sum reaches the maximum M
    let ds = fixed_beam(&h, &beamspace_core::array::CoherenceMatrix { freq_hz: f, entries: CMatrix::identity(7) }, 0.0).unwrap();
    assert!((1.0 / norm_sqr(&ds) - 7.0).abs() < 1e-12);
}

#[test]
fn superdirective_nulls_the_back_deeper_at_low_frequency() {
    let g = seven_mic_array();
    let f = 500.0;
    let h = steering_vector(&g, 0.0, f).unwrap();
    let sd = fixed_beam(&h, &diffuse_coherence(&g, f), SD_LOADING).unwrap();
    let ds: Vec<C64> = h.elements.iter().map(|z| z / 7.0).collect();
    let depth = |w: &[C64]| {
        let bp = beampattern(w, &g, f, 1.0).unwrap();
        (170..=190).map(|a| bp.gain_at(a as f64)).fold(f64::INFINITY, f64::min)
    };
    assert!(depth(&sd) < depth(&ds), "sd {} ds {}", depth(&sd), depth(&ds));
}

#[test]
fn semi_learnable_factors_are_psd_and_lower_triangular() {
    let g = seven_mic_array();
    let cfg = StftConfig::default();
    let (dict, noise) = init_semi_learnable(&g, &cfg, 36).unwrap();
    let sd = build_fixed_dictionary(&g, &cfg, FixedKind::Superdirective, 36, SD_LOADING).unwrap();
    assert!(dict.max_abs_difference(&sd) < 1e-8);
    for k in (0..161).step_by(20) {
        let u = noise.factor(k);
        for i in 0..7 {
            for j in i + 1..7 {
                assert_eq!(u[(i, j)], C64::new(0.0, 0.0));
            }
        }
        let inv = noise.inverse_noise(k);
        assert!(inv.hermitian_defect() < 1e-12);
        let min = hermitian_eigenvalues(&inv).into_iter().fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-8);
    }
}

#[test]
fn perturbing_one_factor_changes_only_that_bin() {
    let g = seven_mic_array();
    let cfg = StftConfig::new(32, 16, 32).unwrap();
    let TrainableDictionary::Cholesky { mut noise, steering, template, .. } = init_dictionary(&g, &cfg, Regime::SemiLearnable, 8).unwrap()
    else {
        panic!("semi-learnable regime uses the factor parameterization");
    };
    let before = noise.materialize(&steering, &template, Regime::SemiLearnable).unwrap();
    let k0 = 5;
    noise.factors[k0 * 49 + 3 * 7 + 1] += C64::new(0.3, -0.2);
    // an entry above the diagonal is dropped again by the structure constraint
    noise.factors[k0 * 49 + 7 + 4] = C64::new(9.0, 0.0);
    noise.enforce_lower_triangular();
    let after = noise.materialize(&steering, &template, Regime::SemiLearnable).unwrap();
    for k in 0..before.bins() {
        let changed = (0..8).any(|p| before.beam(k, p) != after.beam(k, p));
        assert_eq!(changed, k == k0, "bin {k}");
    }
    // the perturbed noise model still yields distortionless beams
    assert!(after.distortionless_error().unwrap() < 1e-8);
    let min = hermitian_eigenvalues(&noise.inverse_noise(k0)).into_iter().fold(f64::INFINITY, f64::min);
    assert!(min >= -1e-8);
}

#[test]
fn regime_initializations() {
    let g = seven_mic_array();
    let cfg = StftConfig::new(32, 16, 32).unwrap();
    let sd = build_fixed_dictionary(&g, &cfg, FixedKind::Superdirective, 12, SD_LOADING).unwrap();
    for regime in [Regime::FixedSd, Regime::SemiLearnable, Regime::FullLearnablePhysical, Regime::FullLearnableRaw] {
        let d = init_dictionary(&g, &cfg, regime, 12).unwrap();
        assert_eq!(d.regime(), regime);
        assert!(d.materialize().unwrap().max_abs_difference(&sd) < 1e-8, "{regime:?}");
    }
    let raw = init_dictionary(&g, &cfg, Regime::FullLearnableRaw, 12).unwrap();
    assert_eq!(raw.parameter_count(), 2 * 17 * 7 * 12);
    assert_eq!(init_dictionary(&g, &cfg, Regime::FixedDs, 12).unwrap().parameter_count(), 0);
    let steering = SteeringTable::build(&g, &sd.bin_freqs, &sd.doa_grid).unwrap();
    assert_eq!(steering.get(3, 4), steering_vector(&g, 120.0, sd.bin_freqs[3]).unwrap().elements.as_slice());
}

proptest! {
    #[test]
    fn fixed_beams_distortionless_for_any_direction(doa in 0.0f64..360.0, f in 50.0f64..8000.0, loading in 1e-6f64..1e-1) {
        let g = seven_mic_array();
        let h = steering_vector(&g, doa, f).unwrap();
        let b = fixed_beam(&h, &diffuse_coherence(&g, f), loading).unwrap();
        prop_assert!((dot_h(&b, &h.elements) - C64::new(1.0, 0.0)).norm() < 1e-8);
    }

    #[test]
    fn random_psd_noise_gives_distortionless_beams(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = CMatrix::from_vec(5, 5, complex_vec(&mut rng, 25)).unwrap();
        let phi = beamspace_core::array::CoherenceMatrix { freq_hz: 1.0, entries: a.matmul(&a.adjoint()).add_diagonal(0.1) };
        let h = beamspace_core::array::SteeringVector { freq_hz: 1.0, doa_azimuth: 0.0, elements: complex_vec(&mut rng, 5) };
        let b = fixed_beam(&h, &phi, 0.0).unwrap();
        prop_assert!((dot_h(&b, &h.elements) - C64::new(1.0, 0.0)).norm() < 1e-10);
    }
}
