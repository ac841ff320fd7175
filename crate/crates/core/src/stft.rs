//! Short-time Fourier analysis/synthesis with a square-root Hann window, and power-law
//! magnitude compression.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{msg, Error, Result};
use crate::fft::FftPlan;
use crate::C64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub win_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window: Vec<f64>,
    pub compression_power: f64,
}

/// Periodic Hann, square-rooted so that analysis × synthesis windows are Hann.
pub fn sqrt_hann(len: usize) -> Vec<f64> {
    (0..len).map(|n| libm::sqrt(0.5 - 0.5 * libm::cos(2.0 * PI * n as f64 / len as f64))).collect()
}

impl Default for StftConfig {
    /// 20 ms frames, 50% overlap, 320-point FFT (161 bins) at 16 kHz.
    fn default() -> Self {
        Self::new(320, 160, 320).expect("default STFT config is valid")
    }
}

impl StftConfig {
    pub fn new(win_len: usize, hop: usize, fft_size: usize) -> Result<Self> {
        let cfg = Self { win_len, hop, fft_size, window: sqrt_hann(win_len), compression_power: 0.5 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.win_len == 0 || self.hop == 0 || self.win_len % self.hop != 0 {
            return Err(Error::InvalidParameter(msg!("hop {} must divide window length {}", self.hop, self.win_len)));
        }
        if self.fft_size < self.win_len {
            return Err(Error::InvalidParameter(msg!("fft size {} shorter than window {}", self.fft_size, self.win_len)));
        }
        if self.window.len() != self.win_len {
            return Err(Error::InvalidParameter(msg!("window has {} taps, expected {}", self.window.len(), self.win_len)));
        }
        if !(self.compression_power > 0.0 && self.compression_power <= 1.0) {
            return Err(Error::InvalidParameter(msg!("compression power {} not in (0, 1]", self.compression_power)));
        }
        Ok(())
    }

    /// One-sided bin count `fft_size/2 + 1`.
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn num_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.win_len {
            0
        } else {
            (n_samples - self.win_len) / self.hop + 1
        }
    }

    pub fn bin_freq(&self, k: usize, sample_rate: f64) -> f64 {
        k as f64 * sample_rate / self.fft_size as f64
    }

    /// Largest deviation of `Σ_l w²(n − l·hop)` from its mean over one hop period.
    pub fn cola_deviation(&self) -> f64 {
        let sums: Vec<f64> = (0..self.hop)
            .map(|n| (0..self.win_len / self.hop).map(|l| { let w = self.window[n + l * self.hop]; w * w }).sum())
            .collect();
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        sums.iter().map(|s| (s - mean).abs()).fold(0.0, f64::max)
    }
}

/// Complex T-F values indexed `(frame, bin, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSpectrogram {
    frames: usize,
    bins: usize,
    channels: usize,
    data: Vec<C64>,
    config: StftConfig,
}

impl MultichannelSpectrogram {
    pub fn zeros(frames: usize, channels: usize, config: StftConfig) -> Self {
        let bins = config.num_bins();
        Self { frames, bins, channels, data: vec![C64::new(0.0, 0.0); frames * bins * channels], config }
    }

    pub fn from_vec(frames: usize, channels: usize, data: Vec<C64>, config: StftConfig) -> Result<Self> {
        let bins = config.num_bins();
        if data.len() != frames * bins * channels {
            return Err(Error::Shape(msg!("{} values for {frames}x{bins}x{channels}", data.len())));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidParameter(msg!("non-finite spectrogram value")));
        }
        Ok(Self { frames, bins, channels, data, config })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn bins(&self) -> usize {
        self.bins
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn config(&self) -> &StftConfig {
        &self.config
    }
    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    /// The M-vector `X_{l,k}`.
    pub fn bin(&self, l: usize, k: usize) -> &[C64] {
        let start = (l * self.bins + k) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn bin_mut(&mut self, l: usize, k: usize) -> &mut [C64] {
        let start = (l * self.bins + k) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn channel(&self, m: usize) -> Spectrogram {
        let data = self.data.iter().skip(m).step_by(self.channels).copied().collect();
        Spectrogram { frames: self.frames, bins: self.bins, data }
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        Self { data: self.data.iter().map(|&z| f(z)).collect(), ..self.clone() }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self { data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(), ..self.clone() })
    }

    pub fn scaled(&self, s: C64) -> Self {
        self.map(|z| z * s)
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if (self.frames, self.bins, self.channels) != (other.frames, other.bins, other.channels) {
            return Err(Error::Shape(msg!(
                "{}x{}x{} vs {}x{}x{}",
                self.frames,
                self.bins,
                self.channels,
                other.frames,
                other.bins,
                other.channels
            )));
        }
        Ok(())
    }

    pub fn compress(&self, power: f64) -> Result<Self> {
        let mut out = self.clone();
        compress_in_place(&mut out.data, power)?;
        Ok(out)
    }

    pub fn decompress(&self, power: f64) -> Result<Self> {
        let mut out = self.clone();
        decompress_in_place(&mut out.data, power)?;
        Ok(out)
    }
}

/// Single-channel complex T-F values indexed `(frame, bin)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    data: Vec<C64>,
}

impl Spectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self { frames, bins, data: vec![C64::new(0.0, 0.0); frames * bins] }
    }

    pub fn from_vec(frames: usize, bins: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::Shape(msg!("{} values for {frames}x{bins}", data.len())));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn bins(&self) -> usize {
        self.bins
    }
    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }
    pub fn get(&self, l: usize, k: usize) -> C64 {
        self.data[l * self.bins + k]
    }
    pub fn set(&mut self, l: usize, k: usize, v: C64) {
        self.data[l * self.bins + k] = v;
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if (self.frames, self.bins) != (other.frames, other.bins) {
            return Err(Error::Shape(msg!("{}x{} vs {}x{}", self.frames, self.bins, other.frames, other.bins)));
        }
        Ok(())
    }

    /// Largest elementwise |a − b| relative to the largest |b|.
    pub fn max_relative_deviation(&self, reference: &Self) -> f64 {
        let scale = reference.data.iter().map(|z| z.norm()).fold(f64::MIN_POSITIVE, f64::max);
        self.data.iter().zip(&reference.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max) / scale
    }

    pub fn compress(&self, power: f64) -> Result<Self> {
        let mut out = self.clone();
        compress_in_place(&mut out.data, power)?;
        Ok(out)
    }

    pub fn decompress(&self, power: f64) -> Result<Self> {
        let mut out = self.clone();
        decompress_in_place(&mut out.data, power)?;
        Ok(out)
    }
}

fn check_power(power: f64) -> Result<()> {
    if !(power > 0.0 && power <= 1.0) {
        return Err(Error::InvalidParameter(msg!("compression power {power} not in (0, 1]")));
    }
    Ok(())
}

/// `|z| → |z|^power`, phase kept.
pub fn compress_value(z: C64, power: f64) -> C64 {
    let mag = z.norm();
    if mag == 0.0 {
        z
    } else {
        z * libm::pow(mag, power - 1.0)
    }
}

pub fn compress_in_place(values: &mut [C64], power: f64) -> Result<()> {
    check_power(power)?;
    for z in values {
        *z = compress_value(*z, power);
    }
    Ok(())
}

/// Exact inverse of [`compress_in_place`] with the same `power`.
pub fn decompress_in_place(values: &mut [C64], power: f64) -> Result<()> {
    check_power(power)?;
    for z in values {
        *z = compress_value(*z, 1.0 / power);
    }
    Ok(())
}

/// Per-channel framing and one-sided FFT. Frames are left-aligned; trailing samples that do not
/// fill a whole frame are dropped.
pub fn analyze(wave: &[Vec<f64>], cfg: &StftConfig) -> Result<MultichannelSpectrogram> {
    cfg.validate()?;
    let channels = wave.len();
    if channels == 0 {
        return Err(Error::Empty(msg!("no channels")));
    }
    let n = wave[0].len();
    if wave.iter().any(|c| c.len() != n) {
        return Err(Error::Shape(msg!("channels differ in length")));
    }
    if n < cfg.win_len {
        return Err(Error::TooShort { len: n, needed: cfg.win_len });
    }
    let frames = cfg.num_frames(n);
    let bins = cfg.num_bins();
    let plan = FftPlan::new(cfg.fft_size);
    let mut out = MultichannelSpectrogram::zeros(frames, channels, cfg.clone());
    let mut buf = vec![C64::new(0.0, 0.0); cfg.fft_size];
    for (m, chan) in wave.iter().enumerate() {
        for l in 0..frames {
            buf.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
            let start = l * cfg.hop;
            for (i, (x, w)) in chan[start..start + cfg.win_len].iter().zip(&cfg.window).enumerate() {
                buf[i] = C64::new(x * w, 0.0);
            }
            let spec = plan.forward(&buf);
            for (k, &v) in spec.iter().take(bins).enumerate() {
                out.data[(l * bins + k) * channels + m] = v;
            }
        }
    }
    Ok(out)
}

fn overlap_add(frames: usize, bins: usize, cfg: &StftConfig, plan: &FftPlan, get: impl Fn(usize, usize) -> C64) -> Vec<f64> {
    let len = if frames == 0 { 0 } else { (frames - 1) * cfg.hop + cfg.win_len };
    let mut out = vec![0.0; len];
    let mut full = vec![C64::new(0.0, 0.0); cfg.fft_size];
    for l in 0..frames {
        for k in 0..bins {
            full[k] = get(l, k);
        }
        // Hermitian extension of the one-sided spectrum
        for k in bins..cfg.fft_size {
            full[k] = full[cfg.fft_size - k].conj();
        }
        let time = plan.inverse(&full);
        let start = l * cfg.hop;
        for i in 0..cfg.win_len {
            out[start + i] += time[i].re / cfg.fft_size as f64 * cfg.window[i];
        }
    }
    out
}

/// Weighted overlap-add with the analysis window. Output length is `(L−1)·hop + win_len`.
pub fn synthesize(spec: &MultichannelSpectrogram) -> Result<Vec<Vec<f64>>> {
    let cfg = &spec.config;
    cfg.validate()?;
    if spec.bins != cfg.num_bins() {
        return Err(Error::Shape(msg!("{} bins but config expects {}", spec.bins, cfg.num_bins())));
    }
    let plan = FftPlan::new(cfg.fft_size);
    Ok((0..spec.channels)
        .map(|m| overlap_add(spec.frames, spec.bins, cfg, &plan, |l, k| spec.data[(l * spec.bins + k) * spec.channels + m]))
        .collect())
}

pub fn synthesize_mono(spec: &Spectrogram, cfg: &StftConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if spec.bins != cfg.num_bins() {
        return Err(Error::Shape(msg!("{} bins but config expects {}", spec.bins, cfg.num_bins())));
    }
    let plan = FftPlan::new(cfg.fft_size);
    Ok(overlap_add(spec.frames, spec.bins, cfg, &plan, |l, k| spec.get(l, k)))
}

pub fn analyze_mono(wave: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    let ms = analyze(&[wave.to_vec()], cfg)?;
    Ok(ms.channel(0))
}

/// The analysis/synthesis round trip of a mono signal. Scoring an output of the chain against
/// this, rather than the raw input, keeps the window taper at the edges out of the error.
pub fn resynthesize(wave: &[f64], cfg: &StftConfig) -> Result<Vec<f64>> {
    synthesize_mono(&analyze_mono(wave, cfg)?, cfg)
}
