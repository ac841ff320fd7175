//! Multichannel WAV files.

use std::path::Path;

use hound::{SampleFormat as HoundFormat, WavReader, WavSpec, WavWriter};
use serde::{Deserialize, Serialize};

use crate::error::{format_error, Result, WithPath};
use crate::fsutil::write_atomic_with;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleFormat {
    /// 16-bit PCM; samples are clipped to `[-1, 1]`.
    Int16,
    Float32,
}

/// Writes channel-major samples as an interleaved WAV file.
pub fn write_wav(path: &Path, channels: &[Vec<f64>], sample_rate: u32, format: SampleFormat) -> Result<()> {
    let len = channels.first().map_or(0, Vec::len);
    if channels.is_empty() || channels.iter().any(|c| c.len() != len) {
        return Err(format_error(path, "channels must be non-empty and of equal length"));
    }
    let count = u16::try_from(channels.len()).map_err(|_| format_error(path, "too many channels"))?;
    let spec = match format {
        SampleFormat::Int16 => WavSpec { channels: count, sample_rate, bits_per_sample: 16, sample_format: HoundFormat::Int },
        SampleFormat::Float32 => WavSpec { channels: count, sample_rate, bits_per_sample: 32, sample_format: HoundFormat::Float },
    };
    write_atomic_with(path, |file| {
        let mut w = WavWriter::new(std::io::BufWriter::new(file), spec).at(path)?;
        for i in 0..len {
            for c in channels {
                match format {
                    SampleFormat::Int16 => w.write_sample((c[i].clamp(-1.0, 1.0) * 32767.0).round() as i16).at(path)?,
                    SampleFormat::Float32 => w.write_sample(c[i] as f32).at(path)?,
                }
            }
        }
        w.finalize().at(path)
    })
}

/// Channel-major samples in `[-1, 1]` (for integer files) and the sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<Vec<f64>>, u32)> {
    let mut r = WavReader::open(path).at(path)?;
    let spec = r.spec();
    let n = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (HoundFormat::Float, 32) => r.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>().at(path)?,
        (HoundFormat::Int, bits @ 1..=32) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            r.samples::<i32>().map(|s| s.map(|v| f64::from(v) * scale)).collect::<Result<_, _>>().at(path)?
        }
        (fmt, bits) => return Err(format_error(path, format!("unsupported sample format {fmt:?} with {bits} bits"))),
    };
    if n == 0 {
        return Err(format_error(path, "no channels"));
    }
    let mut out = vec![Vec::with_capacity(interleaved.len() / n); n];
    for (i, v) in interleaved.into_iter().enumerate() {
        out[i % n].push(v);
    }
    Ok((out, spec.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let ch = vec![vec![0.5, -0.25, 0.125], vec![1.0, 0.0, -1.0]];
        write_wav(&p, &ch, 16000, SampleFormat::Float32).unwrap();
        let (back, fs) = read_wav(&p).unwrap();
        assert_eq!(fs, 16000);
        assert_eq!(back, ch);
    }

    #[test]
    fn int16_quantizes_and_clips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        write_wav(&p, &[vec![0.3, 2.0, -2.0]], 16000, SampleFormat::Int16).unwrap();
        let (back, _) = read_wav(&p).unwrap();
        assert!((back[0][0] - 0.3).abs() < 1.0 / 32768.0);
        assert!((back[0][1] - 32767.0 / 32768.0).abs() < 1e-12);
        assert_eq!(back[0][2], -32767.0 / 32768.0);
    }

    #[test]
    fn ragged_channels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_wav(&dir.path().join("c.wav"), &[vec![0.0; 3], vec![0.0; 2]], 16000, SampleFormat::Int16).is_err());
        assert!(!dir.path().join("c.wav").exists());
    }
}
