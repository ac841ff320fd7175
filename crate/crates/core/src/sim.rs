//! Far-field scene synthesis: synthetic sources, plane-wave spatialization with fractional
//! delays, reference-channel SNR mixing, DOA-bucketed datasets and the SI-SNR metric.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::array::ArrayGeometry;
use crate::error::{msg, Error, Result};

/// Fractional-delay filter length.
pub const DELAY_TAPS: usize = 64;
/// SI-SNR values are clamped to `±SI_SNR_CLAMP_DB`.
pub const SI_SNR_CLAMP_DB: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SourceKind {
    /// Harmonic voiced excitation plus breath noise under a syllabic (≈4 Hz) envelope.
    Speechlike,
    /// Harmonic stack on `f0_hz` with slight vibrato.
    Tonal { f0_hz: f64 },
    White,
    Pink,
}

impl SourceKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "speechlike" | "speech" => SourceKind::Speechlike,
            "tonal" => SourceKind::Tonal { f0_hz: 200.0 },
            "white" | "noise" => SourceKind::White,
            "pink" => SourceKind::Pink,
            other => return Err(Error::UnknownKind(msg!("unknown source kind `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SourceKind::Speechlike => "speechlike",
            SourceKind::Tonal { .. } => "tonal",
            SourceKind::White => "white",
            SourceKind::Pink => "pink",
        }
    }
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    libm::sqrt(x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64)
}

fn normalize_rms(mut x: Vec<f64>) -> Result<Vec<f64>> {
    let r = rms(&x);
    if !(r > 0.0) {
        return Err(Error::DegenerateScene(msg!("synthesized source is silent")));
    }
    x.iter_mut().for_each(|v| *v /= r);
    Ok(x)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Unit-RMS source waveform, deterministic in `(kind, duration, sample_rate, seed)`.
pub fn synth_source(kind: SourceKind, duration_s: f64, sample_rate: f64, seed: u64) -> Result<Vec<f64>> {
    if !(duration_s > 0.0 && duration_s.is_finite()) || !(sample_rate > 0.0) {
        return Err(Error::InvalidParameter(msg!("duration {duration_s} s at {sample_rate} Hz")));
    }
    let n = libm::round(duration_s * sample_rate) as usize;
    if n == 0 {
        return Err(Error::InvalidParameter(msg!("duration {duration_s} s is shorter than one sample")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = match kind {
        SourceKind::White => (0..n).map(|_| gaussian(&mut rng)).collect(),
        SourceKind::Pink => pink(&mut rng, n),
        SourceKind::Tonal { f0_hz } => tonal(f0_hz, sample_rate, n, &mut rng)?,
        SourceKind::Speechlike => speechlike(sample_rate, n, &mut rng),
    };
    normalize_rms(x)
}

/// Kellet's economy pink filter on white noise.
fn pink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    (0..n)
        .map(|_| {
            let w = gaussian(rng);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect()
}

fn tonal(f0: f64, fs: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if !(f0 > 0.0 && f0 < fs / 2.0) {
        return Err(Error::InvalidParameter(msg!("fundamental {f0} Hz outside (0, {}) Hz", fs / 2.0)));
    }
    let harmonics = ((fs / 2.0 / f0) as usize).clamp(1, 8);
    let vib_phase = rng.gen_range(0.0..2.0 * PI);
    let mut phase = 0.0;
    Ok((0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let inst = f0 * (1.0 + 0.003 * libm::sin(2.0 * PI * 5.0 * t + vib_phase));
            phase += 2.0 * PI * inst / fs;
            (1..=harmonics).map(|h| libm::sin(h as f64 * phase) / h as f64).sum()
        })
        .collect())
}

fn speechlike(fs: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // syllable envelope: raised-sine segments of 150-350 ms, some silent
    let mut env = vec![0.0; n];
    let mut f0_track = vec![0.0; n];
    let base_f0 = rng.gen_range(100.0..220.0);
    let mut start = 0;
    while start < n {
        let len = ((rng.gen_range(0.15..0.35) * fs) as usize).max(1);
        let gain = if start > 0 && rng.gen_bool(0.15) { 0.0 } else { rng.gen_range(0.3..1.0) };
        let f_start = base_f0 * rng.gen_range(0.85..1.15);
        let f_end = base_f0 * rng.gen_range(0.85..1.15);
        for j in 0..len.min(n - start) {
            let u = j as f64 / len as f64;
            let s = libm::sin(PI * u);
            env[start + j] = gain * s * s;
            f0_track[start + j] = f_start + (f_end - f_start) * u;
        }
        start += len;
    }
    let nyq = fs / 2.0;
    let mut phase = 0.0;
    let mut breath = 0.0;
    (0..n)
        .map(|i| {
            let f0 = f0_track[i];
            phase += 2.0 * PI * f0 / fs;
            let mut voiced = 0.0;
            let mut h = 1;
            while (h as f64) * f0 < nyq.min(5000.0) {
                voiced += libm::exp(-(h as f64) * f0 / 1200.0) * libm::sin(h as f64 * phase);
                h += 1;
            }
            breath = 0.7 * breath + 0.3 * gaussian(rng);
            env[i] * (voiced + 0.25 * breath)
        })
        .collect()
}

/// Delays `x` by `d` samples (positive = later) with a Hann-windowed sinc of
/// [`DELAY_TAPS`] taps. Integer delays reduce to exact shifts.
pub fn fractional_delay(x: &[f64], d: f64) -> Vec<f64> {
    let half = (DELAY_TAPS / 2) as f64;
    let base = libm::floor(d) as i64;
    let lo = base - DELAY_TAPS as i64 / 2 + 1;
    let taps: Vec<(i64, f64)> = (lo..lo + DELAY_TAPS as i64)
        .filter_map(|i| {
            let t = i as f64 - d;
            if t.abs() >= half {
                return None;
            }
            let w = 0.5 * (1.0 + libm::cos(PI * t / half));
            let s = if t == libm::round(t) {
                // exact zeros keep integer delays an exact shift
                if t == 0.0 { 1.0 } else { 0.0 }
            } else {
                libm::sin(PI * t) / (PI * t)
            };
            let c = w * s;
            (c != 0.0).then_some((i, c))
        })
        .collect();
    let n = x.len() as i64;
    (0..n)
        .map(|j| {
            taps.iter()
                .filter_map(|&(i, c)| {
                    let src = j - i;
                    (0..n).contains(&src).then(|| c * x[src as usize])
                })
                .sum()
        })
        .collect()
}

/// Plane-wave image of `wave` arriving from `doa_deg`: channel `m` is delayed by the
/// mic's relative delay `τ_m`, so the reference channel is untouched.
pub fn spatialize(geom: &ArrayGeometry, wave: &[f64], doa_deg: f64) -> Vec<Vec<f64>> {
    let fs = geom.sample_rate();
    geom.relative_delays(doa_deg).into_iter().map(|tau| fractional_delay(wave, tau * fs)).collect()
}

/// Everything needed to render one scene deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub target_doa: f64,
    pub noise_doas: Vec<f64>,
    pub snr_db: f64,
    pub duration_s: f64,
    pub target_kind: SourceKind,
    pub noise_kinds: Vec<SourceKind>,
    pub seed: u64,
    #[serde(default)]
    pub reverb_tail: bool,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.noise_doas.is_empty() || self.noise_doas.len() > 3 {
            return Err(Error::InvalidParameter(msg!("{} noises, expected 1 to 3", self.noise_doas.len())));
        }
        if self.noise_kinds.len() != self.noise_doas.len() {
            return Err(Error::InvalidParameter(msg!(
                "{} noise kinds for {} noise DOAs",
                self.noise_kinds.len(),
                self.noise_doas.len()
            )));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::InvalidParameter(msg!("SNR must be finite")));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::InvalidParameter(msg!("duration must be positive")));
        }
        let doas = core::iter::once(&self.target_doa).chain(&self.noise_doas);
        for &d in doas {
            if !(0.0..360.0).contains(&d) {
                return Err(Error::InvalidParameter(msg!("DOA {d}° outside [0°, 360°)")));
            }
        }
        Ok(())
    }
}

/// A rendered scene. `mixture = target_image + reverb_image + noise_image` sample-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: Option<SceneSpec>,
    pub reference_index: usize,
    pub mixture: Vec<Vec<f64>>,
    /// Direct-path target at every mic.
    pub target_image: Vec<Vec<f64>>,
    /// Optional late tail of the target; all zeros when disabled.
    pub reverb_image: Vec<Vec<f64>>,
    /// Scaled sum of the directional noises.
    pub noise_image: Vec<Vec<f64>>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.mixture.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clean_ref(&self) -> &[f64] {
        &self.target_image[self.reference_index]
    }

    /// Everything at the reference mic that is not the direct target.
    pub fn noise_ref(&self) -> Vec<f64> {
        let r = self.reference_index;
        self.mixture[r].iter().zip(&self.target_image[r]).map(|(x, s)| x - s).collect()
    }

    /// `mixture − target_image` on every channel.
    pub fn residual_image(&self) -> Vec<Vec<f64>> {
        self.mixture
            .iter()
            .zip(&self.target_image)
            .map(|(x, s)| x.iter().zip(s).map(|(a, b)| a - b).collect())
            .collect()
    }

    /// Reference-channel `20·log10(rms(target)/rms(noise))`.
    pub fn reference_snr_db(&self) -> f64 {
        let r = self.reference_index;
        20.0 * libm::log10(rms(&self.target_image[r]) / rms(&self.noise_image[r]))
    }
}

fn check_channels(x: &[Vec<f64>], channels: usize, len: usize, what: &str) -> Result<()> {
    if x.len() != channels || x.iter().any(|c| c.len() != len) {
        return Err(Error::Shape(msg!("{what}: expected {channels} channels of {len} samples")));
    }
    Ok(())
}

/// Sums the noise images and scales them so the reference-channel SNR is exactly `snr_db`.
pub fn mix_at_snr(target: Vec<Vec<f64>>, noises: &[Vec<Vec<f64>>], snr_db: f64, reference_index: usize) -> Result<Scene> {
    let channels = target.len();
    let len = target.first().map_or(0, Vec::len);
    if channels == 0 || len == 0 {
        return Err(Error::DegenerateScene(msg!("empty target")));
    }
    if reference_index >= channels {
        return Err(Error::InvalidParameter(msg!("reference index {reference_index} for {channels} channels")));
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidParameter(msg!("SNR must be finite")));
    }
    check_channels(&target, channels, len, "target")?;
    if noises.is_empty() {
        return Err(Error::DegenerateScene(msg!("no noise sources")));
    }
    let mut noise = vec![vec![0.0; len]; channels];
    for n in noises {
        check_channels(n, channels, len, "noise")?;
        for (acc, src) in noise.iter_mut().zip(n) {
            acc.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    }
    let ts = rms(&target[reference_index]);
    let ns = rms(&noise[reference_index]);
    if !(ts > 0.0) || !(ns > 0.0) {
        return Err(Error::DegenerateScene(msg!("silent target or noise at the reference mic")));
    }
    let gain = ts / (ns * libm::pow(10.0, snr_db / 20.0));
    noise.iter_mut().flatten().for_each(|v| *v *= gain);
    let mixture = target
        .iter()
        .zip(&noise)
        .map(|(s, n)| s.iter().zip(n).map(|(a, b)| a + b).collect())
        .collect();
    Ok(Scene {
        spec: None,
        reference_index,
        mixture,
        reverb_image: vec![vec![0.0; len]; channels],
        target_image: target,
        noise_image: noise,
    })
}

/// Decay time of the optional tail.
pub const TAIL_T60_S: f64 = 0.15;
/// Tail energy relative to the direct path.
pub const TAIL_LEVEL_DB: f64 = -10.0;

/// Exponentially decaying noise tail per channel, `−60 dB` after [`TAIL_T60_S`].
fn reverb_tail(dry: &[f64], channels: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let len = (TAIL_T60_S * fs) as usize;
    let onset = (0.0025 * fs) as usize;
    let direct_energy: f64 = dry.iter().map(|v| v * v).sum();
    (0..channels)
        .map(|_| {
            let ir: Vec<f64> = (0..len)
                .map(|i| {
                    if i < onset {
                        0.0
                    } else {
                        gaussian(rng) * libm::exp(-6.907755 * i as f64 / len as f64)
                    }
                })
                .collect();
            let mut out = vec![0.0; dry.len()];
            for (i, &h) in ir.iter().enumerate().take(dry.len()).filter(|(_, h)| **h != 0.0) {
                for (o, &x) in out[i..].iter_mut().zip(dry) {
                    *o += h * x;
                }
            }
            let e: f64 = out.iter().map(|v| v * v).sum();
            let g = if e > 0.0 { libm::sqrt(direct_energy * libm::pow(10.0, TAIL_LEVEL_DB / 10.0) / e) } else { 0.0 };
            out.iter_mut().for_each(|v| *v *= g);
            out
        })
        .collect()
}

/// Renders `spec` on `geom`. Source seeds are derived from `spec.seed`.
pub fn render(geom: &ArrayGeometry, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let fs = geom.sample_rate();
    let mut seeds = ChaCha8Rng::seed_from_u64(spec.seed);
    let target_dry = synth_source(spec.target_kind, spec.duration_s, fs, seeds.gen())?;
    let target = spatialize(geom, &target_dry, spec.target_doa);
    let noises = spec
        .noise_doas
        .iter()
        .zip(&spec.noise_kinds)
        .map(|(&doa, &kind)| Ok(spatialize(geom, &synth_source(kind, spec.duration_s, fs, seeds.gen())?, doa)))
        .collect::<Result<Vec<_>>>()?;
    let mut scene = mix_at_snr(target, &noises, spec.snr_db, geom.reference_index())?;
    if spec.reverb_tail {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds.gen());
        let tail = reverb_tail(&target_dry, geom.num_mics(), fs, &mut rng);
        for (mix, t) in scene.mixture.iter_mut().zip(&tail) {
            mix.iter_mut().zip(t).for_each(|(a, b)| *a += b);
        }
        scene.reverb_image = tail;
    }
    scene.spec = Some(spec.clone());
    Ok(scene)
}

/// Circular distance between two azimuths, in `[0°, 180°]`.
pub fn angular_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 360.0;
    d.min(360.0 - d)
}

/// How noise directions are drawn relative to the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Bucket {
    /// One noise whose angular distance to the target lies in `[min_deg, max_deg]`.
    Range { min_deg: f64, max_deg: f64 },
    /// `min_noises..=max_noises` noises at unconstrained directions.
    SetB { min_noises: usize, max_noises: usize },
}

impl Bucket {
    /// `"0-15"`, `"90-180"`, `"set-b"` (1-3 noises) or `"set-b:1-2"`.
    pub fn parse(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let b = if let Some(rest) = lower.strip_prefix("set-b") {
            let rest = rest.trim_start_matches(':');
            if rest.is_empty() {
                Bucket::SetB { min_noises: 1, max_noises: 3 }
            } else {
                let (lo, hi) = split_range(rest)?;
                Bucket::SetB { min_noises: lo as usize, max_noises: hi as usize }
            }
        } else {
            let (lo, hi) = split_range(&lower)?;
            Bucket::Range { min_deg: lo, max_deg: hi }
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Bucket::Range { min_deg, max_deg } => {
                if !(0.0 <= min_deg && min_deg <= max_deg && max_deg <= 180.0) {
                    return Err(Error::InvalidParameter(msg!("empty DOA bucket {min_deg}-{max_deg}°")));
                }
            }
            Bucket::SetB { min_noises, max_noises } => {
                if !(1 <= min_noises && min_noises <= max_noises && max_noises <= 3) {
                    return Err(Error::InvalidParameter(msg!("empty noise-count range {min_noises}-{max_noises}")));
                }
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match *self {
            Bucket::Range { min_deg, max_deg } => alloc::format!("{min_deg}-{max_deg}"),
            Bucket::SetB { min_noises, max_noises } => alloc::format!("set-b:{min_noises}-{max_noises}"),
        }
    }
}

fn split_range(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::InvalidParameter(msg!("cannot parse range `{s}`"));
    let (a, b) = s.split_once('-').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

/// Parameters for drawing a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub bucket: Bucket,
    pub snr_range_db: (f64, f64),
    pub duration_s: f64,
    pub target_kind: SourceKind,
    /// Each noise draws its kind uniformly from this pool.
    pub noise_pool: Vec<SourceKind>,
    pub seed: u64,
    #[serde(default)]
    pub reverb_tail: bool,
}

impl DatasetConfig {
    pub fn new(n_scenes: usize, bucket: Bucket, seed: u64) -> Self {
        Self {
            n_scenes,
            bucket,
            snr_range_db: (-5.0, 10.0),
            duration_s: 2.0,
            target_kind: SourceKind::Speechlike,
            noise_pool: vec![SourceKind::White, SourceKind::Pink, SourceKind::Speechlike],
            seed,
            reverb_tail: false,
        }
    }
}

/// Draws `n_scenes` scene specs deterministically from `cfg.seed`.
pub fn make_specs(cfg: &DatasetConfig) -> Result<Vec<SceneSpec>> {
    cfg.bucket.validate()?;
    let (lo, hi) = cfg.snr_range_db;
    if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidParameter(msg!("SNR range {lo}..{hi} dB")));
    }
    if cfg.noise_pool.is_empty() {
        return Err(Error::InvalidParameter(msg!("empty noise pool")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let wrap = |d: f64| {
        let w = d % 360.0;
        let w = if w < 0.0 { w + 360.0 } else { w };
        if w >= 360.0 { 0.0 } else { w }
    };
    (0..cfg.n_scenes)
        .map(|_| {
            let target_doa = rng.gen_range(0.0..360.0);
            let noise_doas: Vec<f64> = match cfg.bucket {
                Bucket::Range { min_deg, max_deg } => {
                    let delta = if min_deg == max_deg { min_deg } else { rng.gen_range(min_deg..=max_deg) };
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    vec![wrap(target_doa + sign * delta)]
                }
                Bucket::SetB { min_noises, max_noises } => {
                    let count = rng.gen_range(min_noises..=max_noises);
                    (0..count).map(|_| rng.gen_range(0.0..360.0)).collect()
                }
            };
            let noise_kinds = noise_doas.iter().map(|_| cfg.noise_pool[rng.gen_range(0..cfg.noise_pool.len())]).collect();
            let snr_db = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
            let spec = SceneSpec {
                target_doa,
                noise_doas,
                snr_db,
                duration_s: cfg.duration_s,
                target_kind: cfg.target_kind,
                noise_kinds,
                seed: rng.gen(),
                reverb_tail: cfg.reverb_tail,
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

pub fn make_dataset(geom: &ArrayGeometry, cfg: &DatasetConfig) -> Result<Vec<Scene>> {
    make_specs(cfg)?.iter().map(|s| render(geom, s)).collect()
}

/// Scale-invariant SNR in dB, clamped to `±60 dB`.
pub fn si_snr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Shape(msg!("reference {} vs estimate {} samples", reference.len(), estimate.len())));
    }
    if reference.is_empty() {
        return Err(Error::UndefinedMetric(msg!("empty signals")));
    }
    let n = reference.len() as f64;
    let mr = reference.iter().sum::<f64>() / n;
    let me = estimate.iter().sum::<f64>() / n;
    let s: Vec<f64> = reference.iter().map(|v| v - mr).collect();
    let e: Vec<f64> = estimate.iter().map(|v| v - me).collect();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if !(ss > 0.0) {
        return Err(Error::UndefinedMetric(msg!("reference has no energy after removing its mean")));
    }
    let alpha = s.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / ss;
    let target: f64 = alpha * alpha * ss;
    let err: f64 = s.iter().zip(&e).map(|(a, b)| (b - alpha * a) * (b - alpha * a)).sum();
    // a silent estimate carries no target at all, even though its error term vanishes too
    let db = if target == 0.0 {
        -SI_SNR_CLAMP_DB
    } else if err == 0.0 {
        SI_SNR_CLAMP_DB
    } else {
        10.0 * libm::log10(target / err)
    };
    Ok(db.clamp(-SI_SNR_CLAMP_DB, SI_SNR_CLAMP_DB))
}
