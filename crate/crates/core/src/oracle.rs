//! Time-invariant oracle beamformers computed from ground-truth second-order statistics.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::array::{steering_vector, ArrayGeometry};
use crate::dictionary::mvdr_weights;
use crate::error::{msg, Error, Result};
use crate::linalg::{principal_eigenvector, CMatrix};
use crate::stft::MultichannelSpectrogram;
use crate::C64;

/// Diagonal loading for both oracles, relative to `trace(Φ)/M`.
pub const ORACLE_LOADING: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    Speech,
    Noise,
    Mixture,
}

/// Utterance-averaged per-bin spatial covariances `Φ_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialCovariance {
    pub kind: CovarianceKind,
    pub frame_count: usize,
    pub bins: Vec<CMatrix>,
}

impl SpatialCovariance {
    pub fn mics(&self) -> usize {
        self.bins.first().map_or(0, CMatrix::rows)
    }

    pub fn max_hermitian_defect(&self) -> f64 {
        self.bins.iter().map(CMatrix::hermitian_defect).fold(0.0, f64::max)
    }
}

/// `Φ_k = (1/L)·Σ_l X_{l,k}X_{l,k}ᴴ`.
pub fn estimate_covariance(spec: &MultichannelSpectrogram, kind: CovarianceKind) -> Result<SpatialCovariance> {
    let (frames, m) = (spec.frames(), spec.channels());
    if frames == 0 || m == 0 {
        return Err(Error::Empty(msg!("covariance of a spectrogram with {frames} frames and {m} channels")));
    }
    let scale = 1.0 / frames as f64;
    let bins = (0..spec.bins())
        .map(|k| {
            let mut acc = CMatrix::zeros(m, m);
            for l in 0..frames {
                let x = spec.bin(l, k);
                for i in 0..m {
                    for j in 0..m {
                        acc[(i, j)] += x[i] * x[j].conj();
                    }
                }
            }
            acc.scale(C64::new(scale, 0.0))
        })
        .collect();
    Ok(SpatialCovariance { kind, frame_count: frames, bins })
}

/// Mixture statistics under the uncorrelated speech/noise model: `Φ_x = Φ_s + Φ_n`.
///
/// The sample covariance of an actual mixture also carries speech-noise cross terms that
/// only vanish on average; over a few seconds they are large enough to pull the Wiener
/// solution well away from its optimum, so the oracle filters use this sum instead.
pub fn uncorrelated_mixture(speech: &SpatialCovariance, noise: &SpatialCovariance) -> Result<SpatialCovariance> {
    if speech.bins.len() != noise.bins.len() || speech.mics() != noise.mics() {
        return Err(Error::Shape(msg!("speech and noise covariances differ in shape")));
    }
    Ok(SpatialCovariance {
        kind: CovarianceKind::Mixture,
        frame_count: speech.frame_count.min(noise.frame_count),
        bins: speech.bins.iter().zip(&noise.bins).map(|(s, n)| s.add(n)).collect(),
    })
}

/// Where the MVDR look direction comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum AtfSource<'a> {
    /// Far-field steering vectors toward a known azimuth.
    Steering { geom: &'a ArrayGeometry, doa_deg: f64, bin_freqs: &'a [f64] },
    /// Principal eigenvector of the speech covariance, referenced to one mic.
    SpeechEigenvector { speech: &'a SpatialCovariance, reference_index: usize },
    /// Caller-supplied ATF per bin.
    Explicit(&'a [Vec<C64>]),
}

impl AtfSource<'_> {
    pub fn resolve(&self, bins: usize) -> Result<Vec<Vec<C64>>> {
        let atf: Vec<Vec<C64>> = match self {
            AtfSource::Steering { geom, doa_deg, bin_freqs } => bin_freqs
                .iter()
                .map(|&f| Ok(steering_vector(geom, *doa_deg, f)?.elements))
                .collect::<Result<_>>()?,
            AtfSource::SpeechEigenvector { speech, reference_index } => speech
                .bins
                .iter()
                .map(|phi| {
                    let v = principal_eigenvector(phi, *reference_index, 200)?;
                    // scale so the reference entry is exactly 1
                    let r = v[*reference_index];
                    Ok(v.into_iter().map(|z| z / r).collect())
                })
                .collect::<Result<_>>()?,
            AtfSource::Explicit(v) => v.to_vec(),
        };
        if atf.len() != bins {
            return Err(Error::Shape(msg!("{} ATF vectors for {bins} bins", atf.len())));
        }
        Ok(atf)
    }
}

/// `W_k = (Φ_n,k+εI)⁻¹c_k / (c_kᴴ(Φ_n,k+εI)⁻¹c_k)`.
pub fn ti_mvdr(noise: &SpatialCovariance, atf: &AtfSource<'_>, loading: f64) -> Result<Vec<Vec<C64>>> {
    let c = atf.resolve(noise.bins.len())?;
    noise.bins.iter().zip(&c).map(|(phi, ck)| mvdr_weights(ck, phi, loading)).collect()
}

/// Multichannel Wiener filter toward the reference mic: `(Φ_x,k+εI) W_k = Φ_s,k e_ref`.
pub fn ti_mwf(mixture: &SpatialCovariance, speech: &SpatialCovariance, reference_index: usize, loading: f64) -> Result<Vec<Vec<C64>>> {
    if mixture.bins.len() != speech.bins.len() || mixture.mics() != speech.mics() {
        return Err(Error::Shape(msg!("mixture and speech covariances differ in shape")));
    }
    let m = mixture.mics();
    if reference_index >= m {
        return Err(Error::InvalidParameter(msg!("reference index {reference_index} out of range for {m} mics")));
    }
    mixture
        .bins
        .iter()
        .zip(&speech.bins)
        .map(|(phx, phs)| {
            let eps = loading * phx.trace().re / m as f64;
            let rhs: Vec<C64> = (0..m).map(|i| phs[(i, reference_index)]).collect();
            if rhs.iter().all(|z| z.norm() == 0.0) {
                return Ok(rhs);
            }
            phx.add_diagonal(eps).solve(&rhs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::StftConfig;
    use alloc::vec;

    #[test]
    fn single_frame_is_rank_one() {
        let cfg = StftConfig::new(4, 2, 4).unwrap();
        let v = [C64::new(1.0, 2.0), C64::new(-0.5, 0.25)];
        let mut spec = MultichannelSpectrogram::zeros(1, 2, cfg.clone());
        for k in 0..cfg.num_bins() {
            spec.bin_mut(0, k).copy_from_slice(&v);
        }
        let cov = estimate_covariance(&spec, CovarianceKind::Mixture).unwrap();
        for phi in &cov.bins {
            for i in 0..2 {
                for j in 0..2 {
                    assert!((phi[(i, j)] - v[i] * v[j].conj()).norm() < 1e-15);
                }
            }
            // rank one: vanishing determinant
            assert!((phi[(0, 0)] * phi[(1, 1)] - phi[(0, 1)] * phi[(1, 0)]).norm() < 1e-12);
        }
    }

    #[test]
    fn empty_spectrogram_is_rejected() {
        let cfg = StftConfig::new(4, 2, 4).unwrap();
        let spec = MultichannelSpectrogram::zeros(0, 2, cfg);
        assert!(matches!(estimate_covariance(&spec, CovarianceKind::Noise), Err(Error::Empty(_))));
    }

    #[test]
    fn mwf_without_speech_is_zero() {
        let phx = SpatialCovariance { kind: CovarianceKind::Mixture, frame_count: 1, bins: vec![CMatrix::identity(3)] };
        let phs = SpatialCovariance { kind: CovarianceKind::Speech, frame_count: 1, bins: vec![CMatrix::zeros(3, 3)] };
        let w = ti_mwf(&phx, &phs, 0, ORACLE_LOADING).unwrap();
        assert!(w[0].iter().all(|z| z.norm() == 0.0));
    }
}
