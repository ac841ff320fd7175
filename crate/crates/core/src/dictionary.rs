//! Time-invariant beam-space dictionaries: fixed delay-and-sum / superdirective beams on a
//! uniform azimuth grid, and the parameterizations used when the dictionary is trained.
//!
//! Every physically parameterized beam has the form `B = Φ⁻¹h / (hᴴΦ⁻¹h)`. In the learnable
//! regimes `Φ⁻¹` is carried as `U Uᴴ` with `U` lower triangular per bin, which keeps it
//! Hermitian PSD no matter what the optimizer does to `U`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::array::{diffuse_coherence, steering_vector, ArrayGeometry, CoherenceMatrix, SteeringVector};
use crate::error::{msg, Error, Result};
use crate::linalg::{dot_h, norm_sqr, CMatrix};
use crate::stft::StftConfig;
use crate::C64;

/// Diagonal loading used for the superdirective inversion, relative to `trace(Φ)/M`.
pub const SD_LOADING: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    FixedDs,
    FixedSd,
    SemiLearnable,
    /// Noise model and steering trained, beams still follow the MVDR formula.
    FullLearnablePhysical,
    /// Raw complex dictionary entries trained freely.
    FullLearnableRaw,
}

impl Regime {
    pub fn is_fixed(self) -> bool {
        matches!(self, Regime::FixedDs | Regime::FixedSd)
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::FixedDs => "fixed-ds",
            Regime::FixedSd => "fixed-sd",
            Regime::SemiLearnable => "semi-learnable",
            Regime::FullLearnablePhysical => "full-learnable-physical",
            Regime::FullLearnableRaw => "full-learnable-raw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "fixed-ds" | "ds" => Regime::FixedDs,
            "fixed-sd" | "sd" => Regime::FixedSd,
            "semi-learnable" | "semi" => Regime::SemiLearnable,
            "full-learnable-physical" | "f1" => Regime::FullLearnablePhysical,
            "full-learnable-raw" | "full-learnable" | "f2" => Regime::FullLearnableRaw,
            other => return Err(Error::InvalidParameter(msg!("unknown dictionary regime `{other}`"))),
        })
    }
}

/// Beam weights indexed `(bin k, mic m, beam p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamDictionary {
    bins: usize,
    mics: usize,
    beams: usize,
    data: Vec<C64>,
    pub regime: Regime,
    pub doa_grid: Vec<f64>,
    pub bin_freqs: Vec<f64>,
    pub geometry: ArrayGeometry,
}

impl BeamDictionary {
    pub fn from_vec(
        bins: usize,
        mics: usize,
        beams: usize,
        data: Vec<C64>,
        regime: Regime,
        doa_grid: Vec<f64>,
        bin_freqs: Vec<f64>,
        geometry: ArrayGeometry,
    ) -> Result<Self> {
        if beams == 0 || bins == 0 || mics == 0 {
            return Err(Error::Shape(msg!("empty dictionary {bins}x{mics}x{beams}")));
        }
        if data.len() != bins * mics * beams || doa_grid.len() != beams || bin_freqs.len() != bins {
            return Err(Error::Shape(msg!(
                "dictionary {bins}x{mics}x{beams} with {} values, {} DOAs, {} frequencies",
                data.len(),
                doa_grid.len(),
                bin_freqs.len()
            )));
        }
        if mics != geometry.num_mics() {
            return Err(Error::Shape(msg!("{mics} dictionary channels for a {}-mic array", geometry.num_mics())));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Numerical(msg!("non-finite dictionary entry")));
        }
        Ok(Self { bins, mics, beams, data, regime, doa_grid, bin_freqs, geometry })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }
    pub fn mics(&self) -> usize {
        self.mics
    }
    pub fn beams(&self) -> usize {
        self.beams
    }
    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn get(&self, k: usize, m: usize, p: usize) -> C64 {
        self.data[(k * self.mics + m) * self.beams + p]
    }

    pub fn set(&mut self, k: usize, m: usize, p: usize, v: C64) {
        self.data[(k * self.mics + m) * self.beams + p] = v;
    }

    /// The M weights `ℬ_{k,:,p}`.
    pub fn beam(&self, k: usize, p: usize) -> Vec<C64> {
        (0..self.mics).map(|m| self.get(k, m, p)).collect()
    }

    /// Largest `|ℬ_{k,:,p}ᴴ h_{k,p} − 1|` over all bins and beams.
    pub fn distortionless_error(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for k in 0..self.bins {
            for p in 0..self.beams {
                let h = steering_vector(&self.geometry, self.doa_grid[p], self.bin_freqs[k])?;
                worst = worst.max((dot_h(&self.beam(k, p), &h.elements) - 1.0).norm());
            }
        }
        Ok(worst)
    }

    pub fn max_abs_difference(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }
}

/// `P` azimuths `θ_p = p·360/P` degrees.
pub fn uniform_doa_grid(beams: usize) -> Result<Vec<f64>> {
    if beams == 0 {
        return Err(Error::InvalidParameter(msg!("beam count must be at least 1")));
    }
    Ok((0..beams).map(|p| p as f64 * 360.0 / beams as f64).collect())
}

/// Center frequency of every one-sided bin.
pub fn bin_frequencies(cfg: &StftConfig, sample_rate: f64) -> Vec<f64> {
    (0..cfg.num_bins()).map(|k| cfg.bin_freq(k, sample_rate)).collect()
}

/// `(Φ+εI)⁻¹h / (hᴴ(Φ+εI)⁻¹h)` with `ε = loading·trace(Φ)/M`, via a linear solve.
pub fn fixed_beam(h: &SteeringVector, phi: &CoherenceMatrix, loading: f64) -> Result<Vec<C64>> {
    mvdr_weights(&h.elements, &phi.entries, loading)
}

pub(crate) fn mvdr_weights(h: &[C64], phi: &CMatrix, loading: f64) -> Result<Vec<C64>> {
    let m = h.len();
    if phi.rows() != m || !phi.is_square() {
        return Err(Error::Shape(msg!("{m}-element steering vs {}x{} correlation", phi.rows(), phi.cols())));
    }
    if norm_sqr(h) == 0.0 {
        return Err(Error::InvalidParameter(msg!("zero steering vector")));
    }
    let eps = loading * phi.trace().re / m as f64;
    let x = phi.add_diagonal(eps).solve(h)?;
    let denom = dot_h(h, &x);
    if denom.norm() < 1e-300 || !denom.re.is_finite() {
        return Err(Error::Numerical(msg!("vanishing distortionless normalization")));
    }
    Ok(x.into_iter().map(|v| v / denom).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedKind {
    DelayAndSum,
    Superdirective,
}

pub fn build_fixed_dictionary(
    geom: &ArrayGeometry,
    cfg: &StftConfig,
    kind: FixedKind,
    beams: usize,
    loading: f64,
) -> Result<BeamDictionary> {
    let grid = uniform_doa_grid(beams)?;
    let freqs = bin_frequencies(cfg, geom.sample_rate());
    let m = geom.num_mics();
    let mut data = vec![C64::new(0.0, 0.0); freqs.len() * m * beams];
    for (k, &f) in freqs.iter().enumerate() {
        let phi = match kind {
            FixedKind::DelayAndSum => CoherenceMatrix { freq_hz: f, entries: CMatrix::identity(m) },
            FixedKind::Superdirective => diffuse_coherence(geom, f),
        };
        for (p, &doa) in grid.iter().enumerate() {
            let h = steering_vector(geom, doa, f)?;
            let b = fixed_beam(&h, &phi, loading)?;
            for (mi, v) in b.into_iter().enumerate() {
                data[(k * m + mi) * beams + p] = v;
            }
        }
    }
    let regime = match kind {
        FixedKind::DelayAndSum => Regime::FixedDs,
        FixedKind::Superdirective => Regime::FixedSd,
    };
    BeamDictionary::from_vec(freqs.len(), m, beams, data, regime, grid, freqs, geom.clone())
}

/// Steering vectors `h_{k,p}` for every bin and grid DOA, indexed `(k, p, m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringTable {
    pub bins: usize,
    pub beams: usize,
    pub mics: usize,
    pub data: Vec<C64>,
}

impl SteeringTable {
    pub fn build(geom: &ArrayGeometry, freqs: &[f64], grid: &[f64]) -> Result<Self> {
        let mics = geom.num_mics();
        let mut data = Vec::with_capacity(freqs.len() * grid.len() * mics);
        for &f in freqs {
            for &doa in grid {
                data.extend(steering_vector(geom, doa, f)?.elements);
            }
        }
        Ok(Self { bins: freqs.len(), beams: grid.len(), mics, data })
    }

    pub fn get(&self, k: usize, p: usize) -> &[C64] {
        let start = (k * self.beams + p) * self.mics;
        &self.data[start..start + self.mics]
    }
}

/// Per-bin lower-triangular factors with `Φ_k⁻¹ = U_k U_kᴴ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyNoiseModel {
    pub bins: usize,
    pub mics: usize,
    /// `U_k` row-major, bins concatenated.
    pub factors: Vec<C64>,
    pub trainable: bool,
}

impl CholeskyNoiseModel {
    /// Factors of `(Γ_k + εI)⁻¹` for the diffuse coherence `Γ_k`.
    pub fn from_diffuse(geom: &ArrayGeometry, freqs: &[f64], loading: f64) -> Result<Self> {
        let m = geom.num_mics();
        let mut factors = Vec::with_capacity(freqs.len() * m * m);
        for &f in freqs {
            let gamma = diffuse_coherence(geom, f).entries;
            let eps = loading * gamma.trace().re / m as f64;
            let inv = gamma.add_diagonal(eps).inverse()?;
            // symmetrize before factoring; the solve leaves ~1e-12 asymmetry
            let inv = inv.add(&inv.adjoint()).scale(C64::new(0.5, 0.0));
            factors.extend_from_slice(inv.cholesky()?.as_slice());
        }
        Ok(Self { bins: freqs.len(), mics: m, factors, trainable: true })
    }

    pub fn factor(&self, k: usize) -> CMatrix {
        let n = self.mics * self.mics;
        CMatrix::from_vec(self.mics, self.mics, self.factors[k * n..(k + 1) * n].to_vec()).expect("factor shape")
    }

    /// `U_k U_kᴴ`.
    pub fn inverse_noise(&self, k: usize) -> CMatrix {
        let u = self.factor(k);
        u.matmul(&u.adjoint())
    }

    /// Zeroes everything above the diagonal.
    pub fn enforce_lower_triangular(&mut self) {
        let m = self.mics;
        for k in 0..self.bins {
            for i in 0..m {
                for j in i + 1..m {
                    self.factors[k * m * m + i * m + j] = C64::new(0.0, 0.0);
                }
            }
        }
    }

    /// `U v / ‖v‖²` with `v = Uᴴh`, i.e. `Φ⁻¹h / (hᴴΦ⁻¹h)`.
    pub fn beam(&self, k: usize, h: &[C64]) -> Result<Vec<C64>> {
        let u = self.factor(k);
        let v = u.adjoint().mul_vec(h);
        let n = norm_sqr(&v);
        if !(n > 0.0) {
            return Err(Error::Numerical(msg!("degenerate noise factor at bin {k}")));
        }
        Ok(u.mul_vec(&v).into_iter().map(|z| z / n).collect())
    }

    pub fn materialize(&self, steering: &SteeringTable, template: &BeamDictionary, regime: Regime) -> Result<BeamDictionary> {
        let mut out = template.clone();
        out.regime = regime;
        for k in 0..self.bins {
            for p in 0..steering.beams {
                for (m, v) in self.beam(k, steering.get(k, p))?.into_iter().enumerate() {
                    out.set(k, m, p, v);
                }
            }
        }
        Ok(out)
    }
}

/// Semi-learnable start: SD-equivalent Cholesky noise model, fixed steering.
pub fn init_semi_learnable(geom: &ArrayGeometry, cfg: &StftConfig, beams: usize) -> Result<(BeamDictionary, CholeskyNoiseModel)> {
    let sd = build_fixed_dictionary(geom, cfg, FixedKind::Superdirective, beams, SD_LOADING)?;
    let noise = CholeskyNoiseModel::from_diffuse(geom, &sd.bin_freqs, SD_LOADING)?;
    let steering = SteeringTable::build(geom, &sd.bin_freqs, &sd.doa_grid)?;
    let dict = noise.materialize(&steering, &sd, Regime::SemiLearnable)?;
    Ok((dict, noise))
}

/// Trainable dictionary parameterizations.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainableDictionary {
    /// Not trained at all.
    Frozen(BeamDictionary),
    /// `U` trained, steering fixed (or also trained when `train_steering`).
    Cholesky { noise: CholeskyNoiseModel, steering: SteeringTable, train_steering: bool, template: BeamDictionary },
    /// Entries trained directly, initialized from SD.
    Raw(BeamDictionary),
}

impl TrainableDictionary {
    pub fn regime(&self) -> Regime {
        match self {
            TrainableDictionary::Frozen(d) | TrainableDictionary::Raw(d) => d.regime,
            TrainableDictionary::Cholesky { template, .. } => template.regime,
        }
    }

    pub fn beams(&self) -> usize {
        match self {
            TrainableDictionary::Frozen(d) | TrainableDictionary::Raw(d) => d.beams(),
            TrainableDictionary::Cholesky { template, .. } => template.beams(),
        }
    }

    pub fn materialize(&self) -> Result<BeamDictionary> {
        match self {
            TrainableDictionary::Frozen(d) | TrainableDictionary::Raw(d) => Ok(d.clone()),
            TrainableDictionary::Cholesky { noise, steering, template, .. } => {
                noise.materialize(steering, template, template.regime)
            }
        }
    }

    /// Number of trainable real scalars.
    pub fn parameter_count(&self) -> usize {
        match self {
            TrainableDictionary::Frozen(_) => 0,
            TrainableDictionary::Raw(d) => 2 * d.bins() * d.mics() * d.beams(),
            TrainableDictionary::Cholesky { noise, steering, train_steering, .. } => {
                let tri = noise.mics * (noise.mics + 1) / 2;
                2 * noise.bins * tri + if *train_steering { 2 * steering.data.len() } else { 0 }
            }
        }
    }
}

/// Any of the five regimes, ready for training.
pub fn init_dictionary(geom: &ArrayGeometry, cfg: &StftConfig, regime: Regime, beams: usize) -> Result<TrainableDictionary> {
    match regime {
        Regime::FixedDs => Ok(TrainableDictionary::Frozen(build_fixed_dictionary(
            geom,
            cfg,
            FixedKind::DelayAndSum,
            beams,
            SD_LOADING,
        )?)),
        Regime::FixedSd => Ok(TrainableDictionary::Frozen(build_fixed_dictionary(
            geom,
            cfg,
            FixedKind::Superdirective,
            beams,
            SD_LOADING,
        )?)),
        Regime::SemiLearnable => {
            let (dict, noise) = init_semi_learnable(geom, cfg, beams)?;
            let steering = SteeringTable::build(geom, &dict.bin_freqs, &dict.doa_grid)?;
            Ok(TrainableDictionary::Cholesky { noise, steering, train_steering: false, template: dict })
        }
        Regime::FullLearnablePhysical => init_full_learnable(geom, cfg, beams, true),
        Regime::FullLearnableRaw => init_full_learnable(geom, cfg, beams, false),
    }
}

/// `keep_physics` trains `(U, h)` through the beam formula; otherwise the raw entries are
/// trained starting from the SD dictionary.
pub fn init_full_learnable(geom: &ArrayGeometry, cfg: &StftConfig, beams: usize, keep_physics: bool) -> Result<TrainableDictionary> {
    if keep_physics {
        let (mut dict, noise) = init_semi_learnable(geom, cfg, beams)?;
        dict.regime = Regime::FullLearnablePhysical;
        let steering = SteeringTable::build(geom, &dict.bin_freqs, &dict.doa_grid)?;
        Ok(TrainableDictionary::Cholesky { noise, steering, train_steering: true, template: dict })
    } else {
        let mut sd = build_fixed_dictionary(geom, cfg, FixedKind::Superdirective, beams, SD_LOADING)?;
        sd.regime = Regime::FullLearnableRaw;
        Ok(TrainableDictionary::Raw(sd))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::circular_array;

    fn seven_mic_array() -> ArrayGeometry {
        circular_array(0.0425, 6, true, 16000.0).unwrap()
    }

    #[test]
    fn doa_grids() {
        let g = uniform_doa_grid(36).unwrap();
        assert_eq!(g.len(), 36);
        for (p, th) in g.iter().enumerate() {
            assert!((th - 10.0 * p as f64).abs() < 1e-12);
        }
        assert_eq!(uniform_doa_grid(1).unwrap(), vec![0.0]);
        assert_eq!(uniform_doa_grid(4).unwrap(), vec![0.0, 90.0, 180.0, 270.0]);
        assert!(matches!(uniform_doa_grid(0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn identity_noise_gives_delay_and_sum() {
        let g = seven_mic_array();
        let h = steering_vector(&g, 40.0, 3000.0).unwrap();
        let phi = CoherenceMatrix { freq_hz: 3000.0, entries: CMatrix::identity(7) };
        let b = fixed_beam(&h, &phi, 0.0).unwrap();
        for (bi, hi) in b.iter().zip(&h.elements) {
            assert!((bi - hi / 7.0).norm() < 1e-14);
        }
        assert!((dot_h(&b, &h.elements) - 1.0).norm() < 1e-12);
    }

    #[test]
    fn ds_dictionary_at_dc_is_uniform() {
        let g = seven_mic_array();
        let d = build_fixed_dictionary(&g, &StftConfig::default(), FixedKind::DelayAndSum, 36, SD_LOADING).unwrap();
        for p in 0..36 {
            for m in 0..7 {
                assert!((d.get(0, m, p) - C64::new(1.0 / 7.0, 0.0)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn semi_learnable_starts_at_sd() {
        let g = seven_mic_array();
        let cfg = StftConfig::default();
        let sd = build_fixed_dictionary(&g, &cfg, FixedKind::Superdirective, 36, SD_LOADING).unwrap();
        let (semi, noise) = init_semi_learnable(&g, &cfg, 36).unwrap();
        assert!(semi.max_abs_difference(&sd) < 1e-8);
        for k in [0, 1, 80, 160] {
            assert!(noise.inverse_noise(k).hermitian_defect() < 1e-12);
        }
    }

    #[test]
    fn raw_parameter_count() {
        let g = seven_mic_array();
        let d = init_full_learnable(&g, &StftConfig::default(), 36, false).unwrap();
        assert_eq!(d.parameter_count(), 2 * 161 * 7 * 36);
    }

    #[test]
    fn regime_names_round_trip() {
        for r in [
            Regime::FixedDs,
            Regime::FixedSd,
            Regime::SemiLearnable,
            Regime::FullLearnablePhysical,
            Regime::FullLearnableRaw,
        ] {
            assert_eq!(Regime::parse(r.name()).unwrap(), r);
        }
        assert!(Regime::parse("bogus").is_err());
    }
}
