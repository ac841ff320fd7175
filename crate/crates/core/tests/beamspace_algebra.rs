mod common;

use beamspace_core::array::{diffuse_coherence, steering_vector};
use beamspace_core::beamspace::{
    apply_weights, beampattern, distortionless_activation, mix, oracle_delta, project, weights_from_activation, ActivationMatrix, BeamTensor,
    Weights,
};
use beamspace_core::dictionary::{bin_frequencies, build_fixed_dictionary, FixedKind, SD_LOADING};
use beamspace_core::linalg::CMatrix;
use beamspace_core::oracle::{ti_mvdr, AtfSource, CovarianceKind, SpatialCovariance};
use beamspace_core::stft::{MultichannelSpectrogram, Spectrogram};
use beamspace_core::C64;
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-bin brute force of `Σ_p conj(G_p)·(B_pᴴ x)`.
fn brute_force_mix(dict: &beamspace_core::dictionary::BeamDictionary, x: &MultichannelSpectrogram, g: &ActivationMatrix) -> Vec<C64> {
    let mut out = Vec::new();
    for l in 0..x.frames() {
        for k in 0..x.bins() {
            let mut acc = C64::new(0.0, 0.0);
            for p in 0..dict.beams() {
                let y: C64 = (0..dict.mics()).map(|m| dict.get(k, m, p).conj() * x.bin(l, k)[m]).sum();
                acc += g.get(l, k, p).conj() * y;
            }
            out.push(acc);
        }
    }
    out
}

fn random_activation(rng: &mut ChaCha8Rng, frames: usize, bins: usize, beams: usize) -> ActivationMatrix {
    ActivationMatrix::from_vec(frames, bins, beams, complex_vec(rng, frames * bins * beams)).unwrap()
}

proptest! {
    #[test]
    fn mixing_orders_agree(seed in 0u64..100_000, frames in 1usize..=8, bins in 2usize..=9, mics in 1usize..=4, beams in 1usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geom = ring(mics);
        let cfg = stft_with_bins(bins);
        let dict = random_dictionary(&mut rng, &geom, &cfg, beams);
        let x = random_spec(&mut rng, frames, mics, &cfg);
        let g = random_activation(&mut rng, frames, bins, beams);
        let via_beams = mix(&project(&dict, &x).unwrap(), &g).unwrap();
        let via_weights = apply_weights(&weights_from_activation(&dict, &g).unwrap(), &x).unwrap();
        let brute = brute_force_mix(&dict, &x, &g);
        prop_assert!(relative_deviation(via_beams.as_slice(), &brute) < 1e-10);
        prop_assert!(relative_deviation(via_weights.as_slice(), &brute) < 1e-10);
    }

    #[test]
    fn oracle_correction_recovers_the_source(seed in 0u64..100_000, frames in 1usize..=6, mics in 2usize..=5, beams in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geom = ring(mics);
        let cfg = small_stft();
        let dict = random_dictionary(&mut rng, &geom, &cfg, beams);
        // arbitrary ATF, deliberately not a grid direction
        let atf: Vec<Vec<C64>> = (0..cfg.num_bins()).map(|_| complex_vec(&mut rng, mics)).collect();
        let s = complex_vec(&mut rng, frames * cfg.num_bins());
        let r = random_spec(&mut rng, frames, mics, &cfg);
        let mut x = r.clone();
        for l in 0..frames {
            for k in 0..cfg.num_bins() {
                for (m, v) in x.bin_mut(l, k).iter_mut().enumerate() {
                    *v += atf[k][m] * s[l * cfg.num_bins() + k];
                }
            }
        }
        let g = distortionless_activation(&dict, &atf, frames).unwrap();
        let corrected = project(&dict, &x).unwrap().add(&oracle_delta(&dict, &r).unwrap()).unwrap();
        let est = mix(&corrected, &g).unwrap();
        let err: f64 = est.as_slice().iter().zip(&s).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        let norm: f64 = s.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        prop_assert!(err / norm < 1e-10, "{}", err / norm);
    }

    #[test]
    fn signal_paths_are_linear(seed in 0u64..100_000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geom = ring(3);
        let cfg = small_stft();
        let dict = random_dictionary(&mut rng, &geom, &cfg, 4);
        let (x1, x2) = (random_spec(&mut rng, 3, 3, &cfg), random_spec(&mut rng, 3, 3, &cfg));
        let (ca, cb) = (C64::new(a, 0.3 * b), C64::new(b, -a));
        let combo = x1.scaled(ca).add(&x2.scaled(cb)).unwrap();
        let g = random_activation(&mut rng, 3, 9, 4);
        let w = weights_from_activation(&dict, &g).unwrap();

        let (p1, p2, pc) = (project(&dict, &x1).unwrap(), project(&dict, &x2).unwrap(), project(&dict, &combo).unwrap());
        for ((u, v), c) in p1.as_slice().iter().zip(p2.as_slice()).zip(pc.as_slice()) {
            prop_assert!((u * ca + v * cb - c).norm() < 1e-12);
        }
        let (w1, w2, wc) = (apply_weights(&w, &x1).unwrap(), apply_weights(&w, &x2).unwrap(), apply_weights(&w, &combo).unwrap());
        for ((u, v), c) in w1.as_slice().iter().zip(w2.as_slice()).zip(wc.as_slice()) {
            prop_assert!((u * ca + v * cb - c).norm() < 1e-12);
        }
        let ycombo = BeamTensor::from_fn(3, 9, 4, |l, k, p| p1.get(l, k, p) * ca + p2.get(l, k, p) * cb);
        let (m1, m2, mc) = (mix(&p1, &g).unwrap(), mix(&p2, &g).unwrap(), mix(&ycombo, &g).unwrap());
        for ((u, v), c) in m1.as_slice().iter().zip(m2.as_slice()).zip(mc.as_slice()) {
            prop_assert!((u * ca + v * cb - c).norm() < 1e-12);
        }
    }

}

#[test]
fn fixed_beams_have_unit_gain_at_their_direction() {
    let geom = seven_mic_array();
    let cfg = beamspace_core::stft::StftConfig::default();
    for kind in [FixedKind::DelayAndSum, FixedKind::Superdirective] {
        let d = build_fixed_dictionary(&geom, &cfg, kind, 36, SD_LOADING).unwrap();
        for k in (1..161).step_by(8) {
            for p in 0..36 {
                let bp = beampattern(&d.beam(k, p), &geom, d.bin_freqs[k], 10.0).unwrap();
                assert!((bp.gains[p] - 1.0).abs() < 1e-8, "{kind:?} bin {k} beam {p}");
            }
        }
    }
}

#[test]
fn selectors_and_zeros() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let geom = ring(4);
    let cfg = small_stft();
    let x = random_spec(&mut rng, 3, 4, &cfg);

    // a single beam that picks mic 2
    let mut dict = random_dictionary(&mut rng, &geom, &cfg, 1);
    for k in 0..9 {
        for m in 0..4 {
            dict.set(k, m, 0, C64::new(f64::from(u8::from(m == 2)), 0.0));
        }
    }
    let y = project(&dict, &x).unwrap();
    assert_eq!(mix(&y, &ActivationMatrix::from_fn(3, 9, 1, |_, _, _| C64::new(1.0, 0.0))).unwrap(), x.channel(2));

    let zero = MultichannelSpectrogram::zeros(3, 4, cfg.clone());
    assert!(project(&dict, &zero).unwrap().as_slice().iter().all(|z| z.norm() == 0.0));
    assert!(oracle_delta(&dict, &zero).unwrap().as_slice().iter().all(|z| z.norm() == 0.0));

    // one-hot activation reproduces that beam's output
    let dict = random_dictionary(&mut rng, &geom, &cfg, 5);
    let y = project(&dict, &x).unwrap();
    let onehot = ActivationMatrix::from_fn(3, 9, 5, |_, _, p| C64::new(f64::from(u8::from(p == 3)), 0.0));
    let out = mix(&y, &onehot).unwrap();
    for l in 0..3 {
        for k in 0..9 {
            assert_eq!(out.get(l, k), y.get(l, k, 3));
        }
    }
    assert_eq!(mix(&y, &ActivationMatrix::zeros(3, 9, 5)).unwrap(), Spectrogram::zeros(3, 9));

    // scaled one-hot weights: W = g·B_p
    let gval = C64::new(0.4, -1.1);
    let scaled = ActivationMatrix::from_fn(3, 9, 5, |_, _, p| if p == 1 { gval } else { C64::new(0.0, 0.0) });
    let w = weights_from_activation(&dict, &scaled).unwrap();
    for k in 0..9 {
        for (m, wm) in w.bin(2, k).iter().enumerate() {
            assert!((wm - dict.get(k, m, 1) * gval).norm() < 1e-15);
        }
    }
}

#[test]
fn single_beam_constant_gain_is_fixed_beamformer() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let geom = ring(3);
    let cfg = small_stft();
    let dict = random_dictionary(&mut rng, &geom, &cfg, 1);
    let ones = ActivationMatrix::from_fn(4, 9, 1, |_, _, _| C64::new(1.0, 0.0));
    let w = weights_from_activation(&dict, &ones).unwrap();
    for l in 0..4 {
        for k in 0..9 {
            assert_eq!(w.bin(l, k), dict.beam(k, 0).as_slice());
        }
    }
}

#[test]
fn weight_passthrough_and_delay_and_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let geom = seven_mic_array();
    let cfg = small_stft();
    let x = random_spec(&mut rng, 2, 7, &cfg);
    let eref: Vec<Vec<C64>> = (0..9).map(|_| (0..7).map(|m| C64::new(f64::from(u8::from(m == 6)), 0.0)).collect()).collect();
    let w = Weights::time_invariant(2, &eref).unwrap();
    assert_eq!(apply_weights(&w, &x).unwrap(), x.channel(6));

    // W = h/M on a plane wave from 75°
    let freqs = bin_frequencies(&cfg, 16000.0);
    let hs: Vec<Vec<C64>> = freqs.iter().map(|&f| steering_vector(&geom, 75.0, f).unwrap().elements).collect();
    let ds: Vec<Vec<C64>> = hs.iter().map(|h| h.iter().map(|z| z / 7.0).collect()).collect();
    let s = complex_vec(&mut rng, 2 * 9);
    let mut xs = MultichannelSpectrogram::zeros(2, 7, cfg.clone());
    for l in 0..2 {
        for k in 0..9 {
            for (m, v) in xs.bin_mut(l, k).iter_mut().enumerate() {
                *v = hs[k][m] * s[l * 9 + k];
            }
        }
    }
    let out = apply_weights(&Weights::time_invariant(2, &ds).unwrap(), &xs).unwrap();
    assert!(relative_deviation(out.as_slice(), &s) < 1e-12);
}

#[test]
fn on_grid_constraint_leaves_residual_for_off_grid_source() {
    // with the grid-direction steering in the constraint, an off-grid source is not recovered
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let geom = seven_mic_array();
    let cfg = small_stft();
    let dict = build_fixed_dictionary(&geom, &cfg, FixedKind::Superdirective, 36, SD_LOADING).unwrap();
    let true_atf: Vec<Vec<C64>> = dict.bin_freqs.iter().map(|&f| steering_vector(&geom, 45.0, f).unwrap().elements).collect();
    let grid_atf: Vec<Vec<C64>> = dict.bin_freqs.iter().map(|&f| steering_vector(&geom, 40.0, f).unwrap().elements).collect();
    let s = complex_vec(&mut rng, 9);
    let mut x = MultichannelSpectrogram::zeros(1, 7, cfg.clone());
    for k in 0..9 {
        for (m, v) in x.bin_mut(0, k).iter_mut().enumerate() {
            *v = true_atf[k][m] * s[k];
        }
    }
    let y = project(&dict, &x).unwrap();
    let exact = mix(&y, &distortionless_activation(&dict, &true_atf, 1).unwrap()).unwrap();
    let approx = mix(&y, &distortionless_activation(&dict, &grid_atf, 1).unwrap()).unwrap();
    assert!(relative_deviation(exact.as_slice(), &s) < 1e-10);
    assert!(relative_deviation(approx.as_slice(), &s) > 1e-3);
}

#[test]
fn delay_and_sum_beampattern_peaks_at_its_direction() {
    let geom = seven_mic_array();
    let h = steering_vector(&geom, 90.0, 2000.0).unwrap();
    let w: Vec<C64> = h.elements.iter().map(|z| z / 7.0).collect();
    let bp = beampattern(&w, &geom, 2000.0, 1.0).unwrap();
    assert_eq!(bp.gains.len(), 360);
    assert_eq!(bp.peak_azimuth(), 90.0);
    assert!((bp.gain_at(90.0) - 1.0).abs() < 1e-12);
    assert!(bp.gains.iter().all(|&g| g >= 0.0));

    let eref: Vec<C64> = (0..7).map(|m| C64::new(f64::from(u8::from(m == 6)), 0.0)).collect();
    let omni = beampattern(&eref, &geom, 2000.0, 5.0).unwrap();
    assert!(omni.gains.iter().all(|&g| (g - 1.0).abs() < 1e-15));
}

#[test]
fn mvdr_nulls_a_point_interferer() {
    let geom = seven_mic_array();
    let f = 2000.0;
    let hi = steering_vector(&geom, 180.0, f).unwrap().elements;
    // rank-one interferer plus a little sensor noise
    let phi = CMatrix::outer(&hi).scale(C64::new(100.0, 0.0)).add_diagonal(0.01);
    let noise = SpatialCovariance { kind: CovarianceKind::Noise, frame_count: 1, bins: vec![phi] };
    let freqs = [f];
    let w = ti_mvdr(&noise, &AtfSource::Steering { geom: &geom, doa_deg: 0.0, bin_freqs: &freqs }, 0.0).unwrap();
    let bp = beampattern(&w[0], &geom, f, 1.0).unwrap();
    assert!((bp.gain_at(0.0) - 1.0).abs() < 1e-10);
    assert!(bp.gain_at(180.0) < 0.01 * bp.gain_at(0.0), "{}", bp.gain_at(180.0));
    // a diffuse-field beam on the same bin has no such null
    let sd = beamspace_core::dictionary::fixed_beam(
        &steering_vector(&geom, 0.0, f).unwrap(),
        &diffuse_coherence(&geom, f),
        SD_LOADING,
    )
    .unwrap();
    assert!(beampattern(&sd, &geom, f, 1.0).unwrap().gain_at(180.0) > bp.gain_at(180.0));
}
