//! Binary tensor files: an 8-byte magic, a length-prefixed JSON header, then a length-prefixed
//! run of little-endian `f64` values. Complex payloads are interleaved `(re, im)` pairs.

use std::path::Path;

use beamspace_core::array::ArrayGeometry;
use beamspace_core::dictionary::{BeamDictionary, Regime};
use beamspace_core::C64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{format_error, Result, WithPath};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 8] = b"BSPTNSR1";

pub fn write_tensor_file<H: Serialize>(path: &Path, header: &H, payload: &[f64]) -> Result<()> {
    let header = serde_json::to_vec(header).at(path)?;
    let mut bytes = Vec::with_capacity(24 + header.len() + 8 * payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

fn take<'a>(path: &Path, bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(format_error(path, "truncated tensor file"));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn take_len(path: &Path, bytes: &mut &[u8]) -> Result<usize> {
    let raw: [u8; 8] = take(path, bytes, 8)?.try_into().expect("8 bytes");
    usize::try_from(u64::from_le_bytes(raw)).map_err(|_| format_error(path, "length does not fit in memory"))
}

pub fn read_tensor_file<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let all = std::fs::read(path).at(path)?;
    let mut bytes = all.as_slice();
    if take(path, &mut bytes, 8)? != MAGIC {
        return Err(format_error(path, "not a tensor file (bad magic)"));
    }
    let header_len = take_len(path, &mut bytes)?;
    let header: H = serde_json::from_slice(take(path, &mut bytes, header_len)?).at(path)?;
    let count = take_len(path, &mut bytes)?;
    let raw = take(path, &mut bytes, count.checked_mul(8).ok_or_else(|| format_error(path, "payload too large"))?)?;
    if !bytes.is_empty() {
        return Err(format_error(path, format!("{} trailing bytes", bytes.len())));
    }
    let payload = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((header, payload))
}

fn interleave(values: impl Iterator<Item = C64>) -> Vec<f64> {
    values.flat_map(|z| [z.re, z.im]).collect()
}

fn deinterleave(values: &[f64]) -> Vec<C64> {
    values.chunks_exact(2).map(|c| C64::new(c[0], c[1])).collect()
}

const DICTIONARY_FORMAT: &str = "beam-dictionary";
const WEIGHTS_FORMAT: &str = "beam-weights";

/// Header of a dictionary file; the payload holds `K·M·P` complex values in `(k, m, p)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryHeader {
    pub format: String,
    #[serde(rename = "K")]
    pub bins: usize,
    #[serde(rename = "M")]
    pub mics: usize,
    #[serde(rename = "P")]
    pub beams: usize,
    pub regime: Regime,
    pub doa_grid: Vec<f64>,
    pub bin_freqs: Vec<f64>,
    pub geometry: ArrayGeometry,
}

pub fn save_dictionary(path: &Path, dict: &BeamDictionary) -> Result<()> {
    let header = DictionaryHeader {
        format: DICTIONARY_FORMAT.into(),
        bins: dict.bins(),
        mics: dict.mics(),
        beams: dict.beams(),
        regime: dict.regime,
        doa_grid: dict.doa_grid.clone(),
        bin_freqs: dict.bin_freqs.clone(),
        geometry: dict.geometry.clone(),
    };
    write_tensor_file(path, &header, &interleave(dict.as_slice().iter().copied()))
}

pub fn load_dictionary(path: &Path) -> Result<BeamDictionary> {
    let (h, payload): (DictionaryHeader, _) = read_tensor_file(path)?;
    if h.format != DICTIONARY_FORMAT {
        return Err(format_error(path, format!("expected a {DICTIONARY_FORMAT} file, found `{}`", h.format)));
    }
    if payload.len() != 2 * h.bins * h.mics * h.beams {
        return Err(format_error(path, format!("{} values for a {}x{}x{} dictionary", payload.len(), h.bins, h.mics, h.beams)));
    }
    Ok(BeamDictionary::from_vec(h.bins, h.mics, h.beams, deinterleave(&payload), h.regime, h.doa_grid, h.bin_freqs, h.geometry)?)
}

/// Per-bin beamformer weights, the `P = 1` layout of a dictionary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsHeader {
    pub format: String,
    #[serde(rename = "K")]
    pub bins: usize,
    #[serde(rename = "M")]
    pub mics: usize,
    #[serde(rename = "P")]
    pub beams: usize,
    /// What produced the weights, e.g. `ti-mvdr`.
    pub label: String,
    pub bin_freqs: Vec<f64>,
    pub geometry: ArrayGeometry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightsFile {
    pub header: WeightsHeader,
    /// `weights[k][m]`.
    pub weights: Vec<Vec<C64>>,
}

pub fn save_weights(path: &Path, weights: &[Vec<C64>], bin_freqs: &[f64], geometry: &ArrayGeometry, label: &str) -> Result<()> {
    let mics = geometry.num_mics();
    if weights.len() != bin_freqs.len() || weights.iter().any(|w| w.len() != mics) {
        return Err(format_error(path, format!("weights must be {} bins x {mics} mics", bin_freqs.len())));
    }
    let header = WeightsHeader {
        format: WEIGHTS_FORMAT.into(),
        bins: weights.len(),
        mics,
        beams: 1,
        label: label.into(),
        bin_freqs: bin_freqs.to_vec(),
        geometry: geometry.clone(),
    };
    write_tensor_file(path, &header, &interleave(weights.iter().flatten().copied()))
}

pub fn load_weights(path: &Path) -> Result<WeightsFile> {
    let (header, payload): (WeightsHeader, _) = read_tensor_file(path)?;
    if header.format != WEIGHTS_FORMAT || header.beams != 1 {
        return Err(format_error(path, format!("expected a {WEIGHTS_FORMAT} file with P = 1")));
    }
    if payload.len() != 2 * header.bins * header.mics || header.bin_freqs.len() != header.bins || header.mics != header.geometry.num_mics() {
        return Err(format_error(path, "weights payload does not match its header"));
    }
    let values = deinterleave(&payload);
    let weights = values.chunks(header.mics).map(<[C64]>::to_vec).collect();
    Ok(WeightsFile { header, weights })
}

/// Either kind of beamformer file, told apart by the header.
#[derive(Debug, Clone, PartialEq)]
pub enum BeamformerFile {
    Dictionary(BeamDictionary),
    Weights(WeightsFile),
}

pub fn load_beamformer(path: &Path) -> Result<BeamformerFile> {
    let (probe, _): (serde_json::Value, Vec<f64>) = read_tensor_file(path)?;
    match probe.get("format").and_then(|f| f.as_str()) {
        Some(DICTIONARY_FORMAT) => Ok(BeamformerFile::Dictionary(load_dictionary(path)?)),
        Some(WEIGHTS_FORMAT) => Ok(BeamformerFile::Weights(load_weights(path)?)),
        other => Err(format_error(path, format!("unknown tensor file format {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use beamspace_core::array::circular_array;
    use beamspace_core::dictionary::{build_fixed_dictionary, FixedKind, SD_LOADING};
    use beamspace_core::stft::StftConfig;

    #[test]
    fn dictionary_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bspt");
        let g = circular_array(0.0425, 6, true, 16000.0).unwrap();
        let d = build_fixed_dictionary(&g, &StftConfig::new(32, 16, 32).unwrap(), FixedKind::Superdirective, 12, SD_LOADING).unwrap();
        save_dictionary(&p, &d).unwrap();
        assert_eq!(load_dictionary(&p).unwrap(), d);
        assert!(matches!(load_beamformer(&p).unwrap(), BeamformerFile::Dictionary(_)));
        assert!(load_weights(&p).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bspt");
        let g = circular_array(0.05, 3, false, 16000.0).unwrap();
        let w = vec![vec![C64::new(1.0, -0.5), C64::new(0.25, 0.0), C64::new(0.0, 2.0)]; 2];
        save_weights(&p, &w, &[0.0, 8000.0], &g, "test").unwrap();
        let back = load_weights(&p).unwrap();
        assert_eq!(back.weights, w);
        assert_eq!(back.header.label, "test");
        assert!(save_weights(&p, &w, &[0.0], &g, "bad").is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bspt");
        write_tensor_file(&p, &serde_json::json!({"format": "beam-weights"}), &[1.0, 2.0]).unwrap();
        assert!(load_weights(&p).is_err());
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_tensor_file::<serde_json::Value>(&p).is_err());
        std::fs::write(&p, b"RIFF0000").unwrap();
        assert!(load_beamformer(&p).is_err());
        assert!(load_dictionary(&dir.path().join("missing.bspt")).is_err());
    }
}
