//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use beamspace_core::array::{circular_array, ArrayGeometry};
use beamspace_core::dictionary::{bin_frequencies, uniform_doa_grid, BeamDictionary, Regime};
use beamspace_core::linalg::CMatrix;
use beamspace_core::stft::{MultichannelSpectrogram, StftConfig};
use beamspace_core::C64;
use nalgebra::DMatrix;
use num_complex::Complex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn seven_mic_array() -> ArrayGeometry {
    circular_array(0.0425, 6, true, 16000.0).unwrap()
}

/// Ring of `mics` microphones (no center), for tests that vary the channel count.
pub fn ring(mics: usize) -> ArrayGeometry {
    circular_array(0.05, mics, false, 16000.0).unwrap()
}

/// 16-point frames, 9 bins.
pub fn small_stft() -> StftConfig {
    StftConfig::new(16, 8, 16).unwrap()
}

pub fn stft_with_bins(bins: usize) -> StftConfig {
    let n = 2 * (bins - 1);
    StftConfig::new(n.max(2), (n / 2).max(1), n.max(2)).unwrap()
}

pub fn complex(rng: &mut ChaCha8Rng) -> C64 {
    C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
}

pub fn complex_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<C64> {
    (0..n).map(|_| complex(rng)).collect()
}

pub fn random_spec(rng: &mut ChaCha8Rng, frames: usize, channels: usize, cfg: &StftConfig) -> MultichannelSpectrogram {
    let data = complex_vec(rng, frames * cfg.num_bins() * channels);
    MultichannelSpectrogram::from_vec(frames, channels, data, cfg.clone()).unwrap()
}

/// Dictionary with arbitrary complex entries on the given array and STFT layout.
pub fn random_dictionary(rng: &mut ChaCha8Rng, geom: &ArrayGeometry, cfg: &StftConfig, beams: usize) -> BeamDictionary {
    let (k, m) = (cfg.num_bins(), geom.num_mics());
    BeamDictionary::from_vec(
        k,
        m,
        beams,
        complex_vec(rng, k * m * beams),
        Regime::FullLearnableRaw,
        uniform_doa_grid(beams).unwrap(),
        bin_frequencies(cfg, geom.sample_rate()),
        geom.clone(),
    )
    .unwrap()
}

pub fn to_nalgebra(a: &CMatrix) -> DMatrix<Complex<f64>> {
    DMatrix::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)])
}

/// Eigenvalues of a Hermitian matrix via nalgebra.
pub fn hermitian_eigenvalues(a: &CMatrix) -> Vec<f64> {
    let m = to_nalgebra(a);
    let h = (&m + m.adjoint()) * Complex::new(0.5, 0.0);
    h.symmetric_eigenvalues().iter().copied().collect()
}

/// Solves `a·x = b` with nalgebra's LU.
pub fn nalgebra_solve(a: &CMatrix, b: &[C64]) -> Vec<C64> {
    let lu = to_nalgebra(a).lu();
    let rhs = nalgebra::DVector::from_column_slice(b);
    lu.solve(&rhs).expect("nonsingular").iter().copied().collect()
}

pub fn max_norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest entry-wise deviation relative to the largest reference magnitude.
pub fn relative_deviation(a: &[C64], reference: &[C64]) -> f64 {
    let diff = a.iter().zip(reference).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    diff / max_norm(reference).max(1e-300)
}
