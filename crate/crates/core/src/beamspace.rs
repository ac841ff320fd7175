//! Beam-space algebra: projecting the array signal onto a dictionary, mixing beams with
//! complex activations, the equivalent per-bin weights, the oracle residual correction and
//! beampatterns.

use alloc::vec;
use alloc::vec::Vec;

use crate::array::{steering_vector, ArrayGeometry};
use crate::dictionary::BeamDictionary;
use crate::error::{msg, Error, Result};
use crate::linalg::{dot_h, norm_sqr};
use crate::stft::{MultichannelSpectrogram, Spectrogram};
use crate::C64;

macro_rules! lkp_array {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            frames: usize,
            bins: usize,
            beams: usize,
            data: Vec<C64>,
        }

        impl $name {
            pub fn zeros(frames: usize, bins: usize, beams: usize) -> Self {
                Self { frames, bins, beams, data: vec![C64::new(0.0, 0.0); frames * bins * beams] }
            }

            pub fn from_vec(frames: usize, bins: usize, beams: usize, data: Vec<C64>) -> Result<Self> {
                if data.len() != frames * bins * beams {
                    return Err(Error::Shape(msg!("{} values for {frames}x{bins}x{beams}", data.len())));
                }
                if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                    return Err(Error::Numerical(msg!("non-finite value")));
                }
                Ok(Self { frames, bins, beams, data })
            }

            pub fn from_fn(frames: usize, bins: usize, beams: usize, mut f: impl FnMut(usize, usize, usize) -> C64) -> Self {
                let mut data = Vec::with_capacity(frames * bins * beams);
                for l in 0..frames {
                    for k in 0..bins {
                        for p in 0..beams {
                            data.push(f(l, k, p));
                        }
                    }
                }
                Self { frames, bins, beams, data }
            }

            pub fn frames(&self) -> usize {
                self.frames
            }
            pub fn bins(&self) -> usize {
                self.bins
            }
            pub fn beams(&self) -> usize {
                self.beams
            }
            pub fn shape(&self) -> (usize, usize, usize) {
                (self.frames, self.bins, self.beams)
            }
            pub fn as_slice(&self) -> &[C64] {
                &self.data
            }
            pub fn as_mut_slice(&mut self) -> &mut [C64] {
                &mut self.data
            }

            pub fn get(&self, l: usize, k: usize, p: usize) -> C64 {
                self.data[(l * self.bins + k) * self.beams + p]
            }

            pub fn set(&mut self, l: usize, k: usize, p: usize, v: C64) {
                self.data[(l * self.bins + k) * self.beams + p] = v;
            }

            /// The P values at `(l, k)`.
            pub fn bin(&self, l: usize, k: usize) -> &[C64] {
                let start = (l * self.bins + k) * self.beams;
                &self.data[start..start + self.beams]
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
            }

            pub fn add(&self, other: &Self) -> Result<Self> {
                if self.shape() != other.shape() {
                    return Err(Error::Shape(msg!("{:?} vs {:?}", self.shape(), other.shape())));
                }
                Ok(Self { data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(), ..self.clone() })
            }
        }
    };
}

lkp_array!(
    /// Beam outputs `Y_{l,k,p}`.
    BeamTensor
);

lkp_array!(
    /// Complex beam activations `𝒢_{l,k,p}`, stored unconjugated.
    ActivationMatrix
);

/// Per-T-F beamforming weights `W_{l,k}`, indexed `(l, k, m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    frames: usize,
    bins: usize,
    mics: usize,
    data: Vec<C64>,
}

impl Weights {
    pub fn zeros(frames: usize, bins: usize, mics: usize) -> Self {
        Self { frames, bins, mics, data: vec![C64::new(0.0, 0.0); frames * bins * mics] }
    }

    /// The same per-bin weights (`bins × mics`, row-major) repeated over `frames`.
    pub fn time_invariant(frames: usize, per_bin: &[Vec<C64>]) -> Result<Self> {
        let bins = per_bin.len();
        let mics = per_bin.first().map_or(0, Vec::len);
        if per_bin.iter().any(|w| w.len() != mics) {
            return Err(Error::Shape(msg!("ragged per-bin weights")));
        }
        let mut data = Vec::with_capacity(frames * bins * mics);
        for _ in 0..frames {
            for w in per_bin {
                data.extend_from_slice(w);
            }
        }
        Ok(Self { frames, bins, mics, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn bins(&self) -> usize {
        self.bins
    }
    pub fn mics(&self) -> usize {
        self.mics
    }

    pub fn bin(&self, l: usize, k: usize) -> &[C64] {
        let start = (l * self.bins + k) * self.mics;
        &self.data[start..start + self.mics]
    }

    pub fn bin_mut(&mut self, l: usize, k: usize) -> &mut [C64] {
        let start = (l * self.bins + k) * self.mics;
        &mut self.data[start..start + self.mics]
    }
}

fn check_dict_signal(dict: &BeamDictionary, x: &MultichannelSpectrogram) -> Result<()> {
    if dict.mics() != x.channels() || dict.bins() != x.bins() {
        return Err(Error::Shape(msg!(
            "dictionary {}x{} (bins x mics) vs signal {}x{}",
            dict.bins(),
            dict.mics(),
            x.bins(),
            x.channels()
        )));
    }
    Ok(())
}

/// `Y_{l,k,p} = ℬ_{k,:,p}ᴴ X_{l,k}`.
pub fn project(dict: &BeamDictionary, x: &MultichannelSpectrogram) -> Result<BeamTensor> {
    check_dict_signal(dict, x)?;
    let (mics, beams) = (dict.mics(), dict.beams());
    let raw = dict.as_slice();
    let mut y = BeamTensor::zeros(x.frames(), x.bins(), beams);
    for l in 0..x.frames() {
        for k in 0..x.bins() {
            let xv = x.bin(l, k);
            for p in 0..beams {
                let acc: C64 = (0..mics).map(|m| raw[(k * mics + m) * beams + p].conj() * xv[m]).sum();
                y.set(l, k, p, acc);
            }
        }
    }
    Ok(y)
}

/// `S̃_{l,k} = Σ_p conj(𝒢_{l,k,p})·Y_{l,k,p}`.
pub fn mix(y: &BeamTensor, g: &ActivationMatrix) -> Result<Spectrogram> {
    if y.shape() != g.shape() {
        return Err(Error::Shape(msg!("beam outputs {:?} vs activations {:?}", y.shape(), g.shape())));
    }
    let mut out = Spectrogram::zeros(y.frames(), y.bins());
    for l in 0..y.frames() {
        for k in 0..y.bins() {
            out.set(l, k, dot_h(g.bin(l, k), y.bin(l, k)));
        }
    }
    Ok(out)
}

/// `W_{l,k} = Σ_p ℬ_{k,:,p}·𝒢_{l,k,p}`, so that `W_{l,k}ᴴX_{l,k}` equals the mixed output.
pub fn weights_from_activation(dict: &BeamDictionary, g: &ActivationMatrix) -> Result<Weights> {
    if dict.bins() != g.bins() || dict.beams() != g.beams() {
        return Err(Error::Shape(msg!(
            "dictionary {}x{} (bins x beams) vs activations {}x{}",
            dict.bins(),
            dict.beams(),
            g.bins(),
            g.beams()
        )));
    }
    let mut w = Weights::zeros(g.frames(), g.bins(), dict.mics());
    for l in 0..g.frames() {
        for k in 0..g.bins() {
            let gv = g.bin(l, k);
            for (m, wm) in w.bin_mut(l, k).iter_mut().enumerate() {
                *wm = (0..dict.beams()).map(|p| dict.get(k, m, p) * gv[p]).sum();
            }
        }
    }
    Ok(w)
}

/// `S̃_{l,k} = W_{l,k}ᴴ X_{l,k}`.
pub fn apply_weights(w: &Weights, x: &MultichannelSpectrogram) -> Result<Spectrogram> {
    if (w.frames, w.bins, w.mics) != (x.frames(), x.bins(), x.channels()) {
        return Err(Error::Shape(msg!(
            "weights {}x{}x{} vs signal {}x{}x{}",
            w.frames,
            w.bins,
            w.mics,
            x.frames(),
            x.bins(),
            x.channels()
        )));
    }
    let mut out = Spectrogram::zeros(x.frames(), x.bins());
    for l in 0..x.frames() {
        for k in 0..x.bins() {
            out.set(l, k, dot_h(w.bin(l, k), x.bin(l, k)));
        }
    }
    Ok(out)
}

/// Residual correction `δ_{l,k,p} = −ℬ_{k,:,p}ᴴ R_{l,k}` for a known noise-plus-reverberation
/// component `R`.
pub fn oracle_delta(dict: &BeamDictionary, r: &MultichannelSpectrogram) -> Result<BeamTensor> {
    let mut d = project(dict, r)?;
    d.as_mut_slice().iter_mut().for_each(|z| *z = -*z);
    Ok(d)
}

/// Least-norm activations meeting `Σ_p conj(𝒢_p)·(ℬ_pᴴc_k) = 1` in every bin: `𝒢 = b/(bᴴb)`
/// with `b_p = ℬ_{k,:,p}ᴴ c_k`. `atf` holds one M-vector per bin; the result is constant in time.
pub fn distortionless_activation(dict: &BeamDictionary, atf: &[Vec<C64>], frames: usize) -> Result<ActivationMatrix> {
    if atf.len() != dict.bins() || atf.iter().any(|c| c.len() != dict.mics()) {
        return Err(Error::Shape(msg!("need {} ATF vectors of length {}", dict.bins(), dict.mics())));
    }
    let mut per_bin = Vec::with_capacity(dict.bins() * dict.beams());
    for (k, c) in atf.iter().enumerate() {
        let b: Vec<C64> = (0..dict.beams()).map(|p| dot_h(&dict.beam(k, p), c)).collect();
        let n = norm_sqr(&b);
        if !(n > 0.0) {
            return Err(Error::Numerical(msg!("target invisible to every beam at bin {k}")));
        }
        per_bin.extend(b.into_iter().map(|z| z / n));
    }
    let beams = dict.beams();
    Ok(ActivationMatrix::from_fn(frames, dict.bins(), beams, |_, k, p| per_bin[k * beams + p]))
}

/// Magnitude response of one bin's weights over a full azimuth circle.
#[derive(Debug, Clone, PartialEq)]
pub struct Beampattern {
    pub freq_hz: f64,
    pub azimuths_deg: Vec<f64>,
    pub gains: Vec<f64>,
}

impl Beampattern {
    /// Azimuth of the largest gain (the first one on ties).
    pub fn peak_azimuth(&self) -> f64 {
        let mut best = 0;
        for (i, &g) in self.gains.iter().enumerate() {
            if g > self.gains[best] {
                best = i;
            }
        }
        self.azimuths_deg[best]
    }

    /// Gain at the grid point nearest to `azimuth_deg`.
    pub fn gain_at(&self, azimuth_deg: f64) -> f64 {
        let a = azimuth_deg - 360.0 * libm::floor(azimuth_deg / 360.0);
        let step = 360.0 / self.gains.len() as f64;
        let i = (libm::round(a / step) as usize) % self.gains.len();
        self.gains[i]
    }
}

/// `gain(θ) = |Wᴴh(θ, f)|` on `0, step, …, 360 − step`.
pub fn beampattern(weights: &[C64], geom: &ArrayGeometry, freq_hz: f64, grid_step_deg: f64) -> Result<Beampattern> {
    if weights.len() != geom.num_mics() {
        return Err(Error::Shape(msg!("{} weights for a {}-mic array", weights.len(), geom.num_mics())));
    }
    let n = 360.0 / grid_step_deg;
    if !(grid_step_deg > 0.0) || (n - libm::round(n)).abs() > 1e-9 {
        return Err(Error::InvalidParameter(msg!("grid step {grid_step_deg}° does not divide 360°")));
    }
    let n = libm::round(n) as usize;
    let azimuths_deg: Vec<f64> = (0..n).map(|i| i as f64 * grid_step_deg).collect();
    let gains = azimuths_deg
        .iter()
        .map(|&az| Ok(dot_h(weights, &steering_vector(geom, az, freq_hz)?.elements).norm()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(Beampattern { freq_hz, azimuths_deg, gains })
}
