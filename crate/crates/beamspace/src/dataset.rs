//! Scenes on disk: per scene a mixture WAV, target/noise (and optional tail) image WAVs and a
//! JSON sidecar; per dataset a `manifest.json` listing the scenes.

use std::path::{Path, PathBuf};

use beamspace_core::array::ArrayGeometry;
use beamspace_core::sim::{Scene, SceneSpec};
use serde::{Deserialize, Serialize};

use crate::error::{format_error, Result};
use crate::fsutil::{read_json, write_json};
use crate::wav::{read_wav, write_wav, SampleFormat};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelInfo {
    pub channel: usize,
    pub position_m: [f64; 3],
    pub reference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFiles {
    pub mixture: String,
    pub target: String,
    pub noise: String,
    pub reverb: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSidecar {
    pub id: String,
    pub spec: SceneSpec,
    pub seed: u64,
    pub sample_rate: f64,
    pub reference_index: usize,
    pub geometry: ArrayGeometry,
    pub channel_map: Vec<ChannelInfo>,
    pub files: SceneFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub sidecar: String,
    pub bucket: String,
    pub target_doa: f64,
    pub noise_doas: Vec<f64>,
    pub snr_db: f64,
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

fn sample_rate_u32(geom: &ArrayGeometry, path: &Path) -> Result<u32> {
    let fs = geom.sample_rate();
    if fs.fract() != 0.0 || !(1.0..=f64::from(u32::MAX)).contains(&fs) {
        return Err(format_error(path, format!("sample rate {fs} Hz is not a whole number")));
    }
    Ok(fs as u32)
}

/// Writes one scene and returns its manifest entry.
pub fn save_scene(dir: &Path, id: &str, scene: &Scene, geom: &ArrayGeometry, bucket: &str) -> Result<ManifestEntry> {
    let spec = scene.spec.clone().ok_or_else(|| format_error(dir, format!("{id}: scene has no spec to record")))?;
    let fs = sample_rate_u32(geom, dir)?;
    let has_tail = scene.reverb_image.iter().flatten().any(|&v| v != 0.0);
    let files = SceneFiles {
        mixture: format!("{id}.wav"),
        target: format!("{id}.target.wav"),
        noise: format!("{id}.noise.wav"),
        reverb: has_tail.then(|| format!("{id}.reverb.wav")),
    };
    write_wav(&dir.join(&files.mixture), &scene.mixture, fs, SampleFormat::Float32)?;
    write_wav(&dir.join(&files.target), &scene.target_image, fs, SampleFormat::Float32)?;
    write_wav(&dir.join(&files.noise), &scene.noise_image, fs, SampleFormat::Float32)?;
    if let Some(r) = &files.reverb {
        write_wav(&dir.join(r), &scene.reverb_image, fs, SampleFormat::Float32)?;
    }
    let sidecar = SceneSidecar {
        id: id.into(),
        seed: spec.seed,
        sample_rate: geom.sample_rate(),
        reference_index: scene.reference_index,
        geometry: geom.clone(),
        channel_map: geom
            .mic_positions()
            .iter()
            .enumerate()
            .map(|(channel, &position_m)| ChannelInfo { channel, position_m, reference: channel == geom.reference_index() })
            .collect(),
        files,
        spec: spec.clone(),
    };
    let sidecar_name = format!("{id}.json");
    write_json(&dir.join(&sidecar_name), &sidecar)?;
    Ok(ManifestEntry {
        id: id.into(),
        sidecar: sidecar_name,
        bucket: bucket.into(),
        target_doa: spec.target_doa,
        noise_doas: spec.noise_doas,
        snr_db: spec.snr_db,
    })
}

fn scene_files(dir: &Path, id: &str) -> Vec<PathBuf> {
    ["wav", "target.wav", "noise.wav", "reverb.wav", "json"].iter().map(|ext| dir.join(format!("{id}.{ext}"))).collect()
}

/// Writes every scene plus the manifest. On failure the files written so far are removed.
pub fn save_dataset(dir: &Path, geom: &ArrayGeometry, scenes: impl IntoIterator<Item = Result<Scene>>, bucket: &str) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir).map_err(|source| crate::error::Error::Io { path: dir.to_path_buf(), source })?;
    let mut written: Vec<String> = Vec::new();
    let mut manifest = Vec::new();
    let result = (|| {
        for (i, scene) in scenes.into_iter().enumerate() {
            let id = scene_id(i);
            written.push(id.clone());
            manifest.push(save_scene(dir, &id, &scene?, geom, bucket)?);
        }
        write_json(&dir.join(MANIFEST), &manifest)
    })();
    match result {
        Ok(()) => Ok(manifest),
        Err(e) => {
            for id in &written {
                for p in scene_files(dir, id) {
                    let _ = std::fs::remove_file(p);
                }
            }
            Err(e)
        }
    }
}

pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    read_json(&dir.join(MANIFEST))
}

fn read_channels(path: &Path, channels: usize, len: Option<usize>, fs: f64) -> Result<Vec<Vec<f64>>> {
    let (data, rate) = read_wav(path)?;
    if f64::from(rate) != fs || data.len() != channels || len.is_some_and(|n| data[0].len() != n) {
        return Err(format_error(path, format!("expected {channels} channels at {fs} Hz matching the mixture")));
    }
    Ok(data)
}

/// Reads one scene back. Samples pass through 32-bit floats on disk.
pub fn load_scene(dir: &Path, entry: &ManifestEntry) -> Result<(Scene, ArrayGeometry)> {
    let s: SceneSidecar = read_json(&dir.join(&entry.sidecar))?;
    let m = s.geometry.num_mics();
    let mixture = read_channels(&dir.join(&s.files.mixture), m, None, s.sample_rate)?;
    let len = Some(mixture[0].len());
    let target_image = read_channels(&dir.join(&s.files.target), m, len, s.sample_rate)?;
    let noise_image = read_channels(&dir.join(&s.files.noise), m, len, s.sample_rate)?;
    let reverb_image = match &s.files.reverb {
        Some(r) => read_channels(&dir.join(r), m, len, s.sample_rate)?,
        None => vec![vec![0.0; mixture[0].len()]; m],
    };
    let scene = Scene { spec: Some(s.spec), reference_index: s.reference_index, mixture, target_image, reverb_image, noise_image };
    Ok((scene, s.geometry))
}

/// All scenes of a dataset directory. Every scene must share one geometry.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Scene>, ArrayGeometry, Vec<ManifestEntry>)> {
    let manifest = load_manifest(dir)?;
    let mut scenes = Vec::with_capacity(manifest.len());
    let mut geometry: Option<ArrayGeometry> = None;
    for e in &manifest {
        let (scene, g) = load_scene(dir, e)?;
        match &geometry {
            Some(first) if *first != g => return Err(format_error(&dir.join(&e.sidecar), "geometry differs from the first scene")),
            Some(_) => {}
            None => geometry = Some(g),
        }
        scenes.push(scene);
    }
    let geometry = geometry.ok_or_else(|| format_error(&dir.join(MANIFEST), "dataset has no scenes"))?;
    Ok((scenes, geometry, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use beamspace_core::array::circular_array;
    use beamspace_core::sim::{make_specs, render, Bucket, DatasetConfig};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = circular_array(0.0425, 6, true, 16000.0).unwrap();
        let mut cfg = DatasetConfig::new(3, Bucket::parse("set-b").unwrap(), 5);
        cfg.duration_s = 0.1;
        cfg.reverb_tail = true;
        let specs = make_specs(&cfg).unwrap();
        let manifest = save_dataset(dir.path(), &g, specs.iter().map(|s| Ok(render(&g, s)?)), "set-b").unwrap();
        assert_eq!(manifest.len(), 3);
        let (scenes, geom, listed) = load_dataset(dir.path()).unwrap();
        assert_eq!(geom, g);
        assert_eq!(listed, manifest);
        for (s, spec) in scenes.iter().zip(&specs) {
            let original = render(&g, spec).unwrap();
            assert_eq!(s.spec.as_ref(), Some(spec));
            for (a, b) in s.mixture.iter().flatten().zip(original.mixture.iter().flatten()) {
                assert_eq!(*a, *b as f32 as f64);
            }
            assert!(s.reverb_image.iter().flatten().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn failed_write_leaves_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let g = circular_array(0.0425, 6, true, 16000.0).unwrap();
        let mut cfg = DatasetConfig::new(2, Bucket::parse("0-15").unwrap(), 1);
        cfg.duration_s = 0.05;
        let specs = make_specs(&cfg).unwrap();
        let mut scenes: Vec<Result<Scene>> = specs.iter().map(|s| Ok(render(&g, s)?)).collect();
        scenes.push(Err(beamspace_core::Error::DegenerateScene("boom".into()).into()));
        assert!(save_dataset(dir.path(), &g, scenes, "0-15").is_err());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
