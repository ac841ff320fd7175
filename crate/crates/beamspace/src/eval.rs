//! Oracle beamformer scoring shared by `oracle-eval` and the acceptance gate.

use beamspace_core::array::ArrayGeometry;
use beamspace_core::beamspace::{apply_weights, Weights};
use beamspace_core::dictionary::bin_frequencies;
use beamspace_core::oracle::{estimate_covariance, ti_mvdr, ti_mwf, uncorrelated_mixture, AtfSource, CovarianceKind};
use beamspace_core::sim::{si_snr, Scene};
use beamspace_core::stft::{analyze, resynthesize, synthesize_mono, MultichannelSpectrogram, StftConfig};
use beamspace_core::C64;
use serde::{Deserialize, Serialize};

use crate::config::AtfKind;
use crate::error::Result;

/// Time-invariant oracle weights of one scene, one vector per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleWeights {
    pub mvdr: Vec<Vec<C64>>,
    pub mwf: Vec<Vec<C64>>,
    pub bin_freqs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleScore {
    pub noisy_db: f64,
    pub mvdr_db: f64,
    pub mwf_db: f64,
}

/// Oracle weights from the scene's separated images. With [`AtfKind::Steering`] the MVDR looks
/// along the far-field steering vector of the true target direction, falling back to the
/// principal eigenvector of the speech covariance when the scene carries no spec. The MWF uses
/// `Φx = Φs + Φn`.
pub fn oracle_weights(scene: &Scene, geom: &ArrayGeometry, stft: &StftConfig, loading: f64, atf: AtfKind) -> Result<OracleWeights> {
    let speech = analyze(&scene.target_image, stft)?;
    let interference: Vec<Vec<f64>> =
        scene.mixture.iter().zip(&scene.target_image).map(|(x, s)| x.iter().zip(s).map(|(a, b)| a - b).collect()).collect();
    let noise = analyze(&interference, stft)?;
    let phi_s = estimate_covariance(&speech, CovarianceKind::Speech)?;
    let phi_n = estimate_covariance(&noise, CovarianceKind::Noise)?;
    let phi_x = uncorrelated_mixture(&phi_s, &phi_n)?;
    let bin_freqs = bin_frequencies(stft, geom.sample_rate());
    let atf = match (atf, &scene.spec) {
        (AtfKind::Steering, Some(spec)) => AtfSource::Steering { geom, doa_deg: spec.target_doa, bin_freqs: &bin_freqs },
        _ => AtfSource::SpeechEigenvector { speech: &phi_s, reference_index: scene.reference_index },
    };
    let mvdr = ti_mvdr(&phi_n, &atf, loading)?;
    let mwf = ti_mwf(&phi_x, &phi_s, scene.reference_index, loading)?;
    Ok(OracleWeights { mvdr, mwf, bin_freqs })
}

fn enhance(weights: &[Vec<C64>], x: &MultichannelSpectrogram) -> Result<Vec<f64>> {
    let w = Weights::time_invariant(x.frames(), weights)?;
    Ok(synthesize_mono(&apply_weights(&w, x)?, x.config())?)
}

/// SI-SNR of the reference mic, the MVDR output and the MWF output against the direct-path
/// target. The target goes through the same analysis/synthesis chain as the outputs.
pub fn score_oracles(scene: &Scene, weights: &OracleWeights, stft: &StftConfig) -> Result<OracleScore> {
    let x = analyze(&scene.mixture, stft)?;
    let noisy = synthesize_mono(&x.channel(scene.reference_index), stft)?;
    let mvdr = enhance(&weights.mvdr, &x)?;
    let mwf = enhance(&weights.mwf, &x)?;
    let clean = resynthesize(&scene.clean_ref(), stft)?;
    let n = noisy.len().min(clean.len());
    let clean = &clean[..n];
    Ok(OracleScore { noisy_db: si_snr(clean, &noisy[..n])?, mvdr_db: si_snr(clean, &mvdr[..n])?, mwf_db: si_snr(clean, &mwf[..n])? })
}

pub fn mean_score(scores: &[OracleScore]) -> Option<OracleScore> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    Some(OracleScore {
        noisy_db: scores.iter().map(|s| s.noisy_db).sum::<f64>() / n,
        mvdr_db: scores.iter().map(|s| s.mvdr_db).sum::<f64>() / n,
        mwf_db: scores.iter().map(|s| s.mwf_db).sum::<f64>() / n,
    })
}
