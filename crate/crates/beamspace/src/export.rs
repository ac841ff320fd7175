//! CSV outputs for plotting and metric tables.

use std::path::Path;

use beamspace_core::array::ArrayGeometry;
use beamspace_core::beamspace::{beampattern, ActivationMatrix};
use beamspace_core::C64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WithPath};
use crate::fsutil::write_atomic_with;

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic_with(path, |file| {
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        for r in rows {
            w.serialize(r).at(path)?;
        }
        w.flush().at(path)
    })
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).at(path)?;
    r.deserialize().collect::<Result<Vec<T>, _>>().at(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeampatternRow {
    pub beam: usize,
    pub freq_hz: f64,
    pub doa_deg: f64,
    pub gain_db: f64,
}

/// Floor for `20·log10` of exact nulls.
pub const MIN_GAIN_DB: f64 = -300.0;

pub fn gain_db(gain: f64) -> f64 {
    if gain > 0.0 {
        (20.0 * gain.log10()).max(MIN_GAIN_DB)
    } else {
        MIN_GAIN_DB
    }
}

/// Beampattern rows of one beam at the given frequencies.
pub fn beampattern_rows(beam: usize, per_freq: &[(f64, Vec<C64>)], geom: &ArrayGeometry, grid_step_deg: f64) -> Result<Vec<BeampatternRow>> {
    let mut rows = Vec::new();
    for (f, w) in per_freq {
        let bp = beampattern(w, geom, *f, grid_step_deg)?;
        rows.extend(bp.azimuths_deg.iter().zip(&bp.gains).map(|(&doa, &g)| BeampatternRow { beam, freq_hz: *f, doa_deg: doa, gain_db: gain_db(g) }));
    }
    Ok(rows)
}

/// Power gain of `beam` averaged over the rows with `lo ≤ freq ≤ hi`, in dB per azimuth, in the
/// order the azimuths first appear. A single bin's null wanders with the narrowband model error
/// of the STFT; the band average is where the nulls of all bins agree.
pub fn band_average(rows: &[BeampatternRow], beam: usize, lo_hz: f64, hi_hz: f64) -> Vec<(f64, f64)> {
    let mut acc: Vec<(f64, f64, usize)> = Vec::new();
    for r in rows.iter().filter(|r| r.beam == beam && r.freq_hz >= lo_hz && r.freq_hz <= hi_hz) {
        let power = 10f64.powf(r.gain_db / 10.0);
        match acc.iter_mut().find(|a| a.0 == r.doa_deg) {
            Some(a) => {
                a.1 += power;
                a.2 += 1;
            }
            None => acc.push((r.doa_deg, power, 1)),
        }
    }
    acc.into_iter().map(|(doa, p, n)| (doa, gain_db((p / n as f64).sqrt()))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRow {
    pub frame: usize,
    pub beam: usize,
    /// `|𝒢|` averaged over frequency bins.
    pub magnitude: f64,
}

pub fn activation_rows(g: &ActivationMatrix) -> Vec<ActivationRow> {
    let (frames, bins, beams) = g.shape();
    let mut rows = Vec::with_capacity(frames * beams);
    for l in 0..frames {
        for p in 0..beams {
            let m = (0..bins).map(|k| g.get(l, k, p).norm()).sum::<f64>() / bins as f64;
            rows.push(ActivationRow { frame: l, beam: p, magnitude: m });
        }
    }
    rows
}
