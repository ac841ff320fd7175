//! Microphone array geometry, far-field steering vectors and the diffuse-field coherence model.

use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{msg, Error, Result};
use crate::linalg::CMatrix;
use crate::C64;

pub const SPEED_OF_SOUND: f64 = 343.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    mic_positions: Vec<[f64; 3]>,
    reference_index: usize,
    sound_speed: f64,
    sample_rate: f64,
}

impl ArrayGeometry {
    pub fn new(mic_positions: Vec<[f64; 3]>, reference_index: usize, sound_speed: f64, sample_rate: f64) -> Result<Self> {
        if mic_positions.is_empty() {
            return Err(Error::InvalidGeometry(msg!("no microphones")));
        }
        if reference_index >= mic_positions.len() {
            return Err(Error::InvalidGeometry(msg!(
                "reference index {reference_index} out of range for {} mics",
                mic_positions.len()
            )));
        }
        if mic_positions.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidGeometry(msg!("non-finite microphone coordinate")));
        }
        if !(sound_speed > 0.0 && sound_speed.is_finite()) || !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::InvalidGeometry(msg!("sound speed and sample rate must be positive")));
        }
        Ok(Self { mic_positions, reference_index, sound_speed, sample_rate })
    }

    pub fn mic_positions(&self) -> &[[f64; 3]] {
        &self.mic_positions
    }

    pub fn num_mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn reference_index(&self) -> usize {
        self.reference_index
    }

    pub fn sound_speed(&self) -> f64 {
        self.sound_speed
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.mic_positions[i], self.mic_positions[j]);
        libm::sqrt((0..3).map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum())
    }

    /// Plane-wave arrival delay (seconds) of every mic relative to the reference mic for a
    /// source at azimuth `doa_deg` in the horizontal plane. Negative means earlier.
    pub fn relative_delays(&self, doa_deg: f64) -> Vec<f64> {
        let theta = doa_deg.to_radians();
        let u = [libm::cos(theta), libm::sin(theta), 0.0];
        let r = self.mic_positions[self.reference_index];
        self.mic_positions
            .iter()
            .map(|p| -((p[0] - r[0]) * u[0] + (p[1] - r[1]) * u[1] + (p[2] - r[2]) * u[2]) / self.sound_speed)
            .collect()
    }
}

/// Compact serialized description of a circular array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircularArraySpec {
    pub radius_m: f64,
    pub n_ring: usize,
    pub with_center: bool,
    pub sample_rate: f64,
    pub sound_speed: f64,
}

impl CircularArraySpec {
    pub fn build(&self) -> Result<ArrayGeometry> {
        let mut g = circular_array(self.radius_m, self.n_ring, self.with_center, self.sample_rate)?;
        if !(self.sound_speed > 0.0 && self.sound_speed.is_finite()) {
            return Err(Error::InvalidGeometry(msg!("sound speed must be positive")));
        }
        g.sound_speed = self.sound_speed;
        Ok(g)
    }
}

impl Default for CircularArraySpec {
    /// Seven mics: six on a 4.25 cm ring plus the center reference, 16 kHz.
    fn default() -> Self {
        Self { radius_m: 0.0425, n_ring: 6, with_center: true, sample_rate: 16000.0, sound_speed: SPEED_OF_SOUND }
    }
}

/// `n_ring` mics evenly on a horizontal circle starting at azimuth 0°, plus an optional center
/// mic. The center is the reference when present, otherwise the first ring mic.
pub fn circular_array(radius_m: f64, n_ring: usize, with_center: bool, sample_rate: f64) -> Result<ArrayGeometry> {
    if !(radius_m > 0.0 && radius_m.is_finite()) {
        return Err(Error::InvalidGeometry(msg!("radius must be positive, got {radius_m}")));
    }
    if n_ring == 0 {
        return Err(Error::InvalidGeometry(msg!("ring needs at least one microphone")));
    }
    let mut mics: Vec<[f64; 3]> = (0..n_ring)
        .map(|i| {
            let phi = 2.0 * PI * i as f64 / n_ring as f64;
            [radius_m * libm::cos(phi), radius_m * libm::sin(phi), 0.0]
        })
        .collect();
    let reference = if with_center {
        mics.push([0.0, 0.0, 0.0]);
        n_ring
    } else {
        0
    };
    ArrayGeometry::new(mics, reference, SPEED_OF_SOUND, sample_rate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub freq_hz: f64,
    pub doa_azimuth: f64,
    pub elements: Vec<C64>,
}

/// `h_m = exp(−j2πf·τ_m)` with τ the plane-wave delay relative to the reference mic.
pub fn steering_vector(geom: &ArrayGeometry, doa_deg: f64, freq_hz: f64) -> Result<SteeringVector> {
    let nyquist = geom.sample_rate / 2.0;
    if !(0.0..=nyquist).contains(&freq_hz) {
        return Err(Error::OutOfBand { freq_hz, nyquist_hz: nyquist });
    }
    let elements = geom
        .relative_delays(doa_deg)
        .into_iter()
        .map(|tau| {
            let ph = -2.0 * PI * freq_hz * tau;
            C64::new(libm::cos(ph), libm::sin(ph))
        })
        .collect();
    Ok(SteeringVector { freq_hz, doa_azimuth: doa_deg, elements })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceMatrix {
    pub freq_hz: f64,
    pub entries: CMatrix,
}

/// `sin(x)/x`, 1 at the origin.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        libm::sin(x) / x
    }
}

/// Spherically isotropic noise field: `Γ_ij = sinc(2πf·d_ij/c)`.
pub fn diffuse_coherence(geom: &ArrayGeometry, freq_hz: f64) -> CoherenceMatrix {
    let m = geom.num_mics();
    let entries = CMatrix::from_fn(m, m, |i, j| {
        let x = 2.0 * PI * freq_hz * geom.distance(i, j) / geom.sound_speed;
        C64::new(sinc(x), 0.0)
    });
    CoherenceMatrix { freq_hz, entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_array_layout() {
        let g = circular_array(0.0425, 6, true, 16000.0).unwrap();
        assert_eq!(g.num_mics(), 7);
        assert_eq!(g.reference_index(), 6);
        assert_eq!(g.mic_positions()[6], [0.0, 0.0, 0.0]);
        assert_eq!(g.sound_speed(), 343.0);
        for i in 0..6 {
            assert!((g.distance(i, 6) - 0.0425).abs() < 1e-15);
            // hexagon chord 2r·sin(30°) = r
            assert!((g.distance(i, (i + 1) % 6) - 0.0425).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_single_mic() {
        let g = circular_array(1.0, 1, false, 16000.0).unwrap();
        assert_eq!(g.num_mics(), 1);
        assert_eq!(g.reference_index(), 0);
        assert_eq!(g.mic_positions()[0], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn invalid_geometries() {
        assert!(matches!(circular_array(0.0, 6, true, 16000.0), Err(Error::InvalidGeometry(_))));
        assert!(matches!(circular_array(-1.0, 6, true, 16000.0), Err(Error::InvalidGeometry(_))));
        assert!(matches!(circular_array(0.1, 0, true, 16000.0), Err(Error::InvalidGeometry(_))));
        assert!(ArrayGeometry::new(alloc::vec![[0.0; 3]], 1, 343.0, 16000.0).is_err());
        assert!(ArrayGeometry::new(alloc::vec![[f64::NAN, 0.0, 0.0]], 0, 343.0, 16000.0).is_err());
    }

    #[test]
    fn steering_at_dc_is_all_ones() {
        let g = circular_array(0.0425, 6, true, 16000.0).unwrap();
        let h = steering_vector(&g, 123.0, 0.0).unwrap();
        assert!(h.elements.iter().all(|&z| z == C64::new(1.0, 0.0)));
    }

    #[test]
    fn steering_phase_of_front_mic() {
        let g = circular_array(0.0425, 6, true, 16000.0).unwrap();
        let h = steering_vector(&g, 0.0, 1000.0).unwrap();
        // mic 0 at (r,0,0) hears a 0° source r/c seconds before the center
        let tau = -0.0425 / 343.0;
        let expected = C64::from_polar(1.0, -2.0 * PI * 1000.0 * tau);
        assert!((h.elements[0] - expected).norm() < 1e-12);
        assert!((h.elements[0].arg() - 2.0 * PI * 1000.0 * 0.0425 / 343.0).abs() < 1e-12);
        assert_eq!(h.elements[6], C64::new(1.0, 0.0));
    }

    #[test]
    fn steering_rejects_above_nyquist() {
        let g = circular_array(0.0425, 6, true, 16000.0).unwrap();
        assert!(matches!(steering_vector(&g, 0.0, 8000.5), Err(Error::OutOfBand { .. })));
        assert!(steering_vector(&g, 0.0, 8000.0).is_ok());
    }

    #[test]
    fn coherence_first_null() {
        // 2πfd/c = π at d = 0.0425 m
        let f: f64 = 343.0 / (2.0 * 0.0425);
        assert!((f - 4035.294).abs() < 1e-3);
        let g = circular_array(0.0425, 6, true, 16000.0).unwrap();
        let gamma = diffuse_coherence(&g, f);
        assert!(gamma.entries[(0, 6)].norm() < 1e-12);
        for i in 0..7 {
            assert_eq!(gamma.entries[(i, i)], C64::new(1.0, 0.0));
        }
        let dc = diffuse_coherence(&g, 0.0);
        assert!(dc.entries.as_slice().iter().all(|&z| z == C64::new(1.0, 0.0)));
    }
}
