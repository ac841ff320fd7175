//! The six subcommands as library functions. Each takes a validated [`RunConfig`] plus its
//! paths and returns the rows it wrote, so tests and the acceptance gate can drive them
//! without spawning processes.

use std::path::{Path, PathBuf};

use beamspace_core::array::ArrayGeometry;
use beamspace_core::dictionary::{init_dictionary, BeamDictionary, Regime};
use beamspace_core::nn::suite::{op_suite, MODEL_TOLERANCE};
use beamspace_core::sim::{make_specs, render, Scene};
use beamspace_core::taylor::{evaluate_si_snr_at, micro_grad_check, train as train_model, EpochLog, TaylorModel, TrainExample};
use beamspace_core::C64;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset::{load_manifest, load_scene, save_dataset, ManifestEntry};
use crate::error::{Error, Result};
use crate::eval::{mean_score, oracle_weights, score_oracles, OracleScore};
use crate::export::{activation_rows, beampattern_rows, write_csv, BeampatternRow};
use crate::fsutil::write_json;
use crate::prefetch::Prefetch;
use crate::tensor_file::{load_beamformer, save_dictionary, save_weights, BeamformerFile};

pub const TRAIN_LOG: &str = "log.csv";
pub const TRAIN_CONFIG: &str = "config.json";

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    let geom = cfg.geometry()?;
    let dataset = cfg.dataset.build()?;
    let specs = make_specs(&dataset)?;
    let g = geom.clone();
    let scenes = Prefetch::spawn(specs, cfg.training.prefetch_depth, move |s| render(&g, &s).map_err(Error::from));
    save_dataset(out, &geom, scenes, &dataset.bucket.label())
}

/// Where `beampattern` takes its weights from.
#[derive(Debug, Clone, PartialEq)]
pub enum PatternSource {
    /// A dictionary or weights file.
    File(PathBuf),
    /// The dictionary of a trained model.
    Checkpoint(PathBuf),
    /// The initial dictionary of the configured regime on the configured array.
    Built,
}

struct PatternInput {
    /// Per beam, one weight vector per bin.
    beams: Vec<(usize, Vec<Vec<C64>>)>,
    bin_freqs: Vec<f64>,
    geometry: ArrayGeometry,
    dictionary: Option<BeamDictionary>,
}

fn dictionary_input(d: BeamDictionary) -> PatternInput {
    let beams = (0..d.beams()).map(|p| (p, (0..d.bins()).map(|k| d.beam(k, p)).collect())).collect();
    PatternInput { beams, bin_freqs: d.bin_freqs.clone(), geometry: d.geometry.clone(), dictionary: Some(d) }
}

fn nearest_bin(freqs: &[f64], f: f64) -> usize {
    let mut best = 0;
    for (k, &b) in freqs.iter().enumerate() {
        if (b - f).abs() < (freqs[best] - f).abs() {
            best = k;
        }
    }
    best
}

/// Beampattern rows for the configured beams and frequencies. Optionally saves the dictionary
/// that was plotted.
pub fn beampattern(cfg: &RunConfig, source: &PatternSource, out: &Path, save_dict: Option<&Path>) -> Result<Vec<BeampatternRow>> {
    cfg.validate()?;
    let bp = &cfg.beampattern;
    let input = match source {
        PatternSource::File(p) => match load_beamformer(p)? {
            BeamformerFile::Dictionary(d) => dictionary_input(d),
            BeamformerFile::Weights(w) => PatternInput {
                beams: vec![(0, w.weights)],
                bin_freqs: w.header.bin_freqs,
                geometry: w.header.geometry,
                dictionary: None,
            },
        },
        PatternSource::Checkpoint(dir) => dictionary_input(load_checkpoint(dir)?.model.dictionary()?),
        PatternSource::Built => {
            dictionary_input(init_dictionary(&cfg.geometry()?, &cfg.stft_config()?, bp.regime, bp.num_beams)?.materialize()?)
        }
    };
    if let Some(path) = save_dict {
        let d = input.dictionary.as_ref().ok_or_else(|| Error::Config("a weights file has no dictionary to save".into()))?;
        save_dictionary(path, d)?;
    }
    let bins: Vec<usize> = match &bp.freqs_hz {
        Some(fs) => fs.iter().map(|&f| nearest_bin(&input.bin_freqs, f)).collect(),
        None => (0..input.bin_freqs.len()).collect(),
    };
    let selected: Vec<&(usize, Vec<Vec<C64>>)> = match &bp.beams {
        Some(wanted) => wanted
            .iter()
            .map(|&p| input.beams.iter().find(|(b, _)| *b == p).ok_or_else(|| Error::Config(format!("no beam {p} in a set of {}", input.beams.len()))))
            .collect::<Result<_>>()?,
        None => input.beams.iter().collect(),
    };
    let mut rows = Vec::new();
    for (p, weights) in selected {
        let per_freq: Vec<(f64, Vec<C64>)> = bins.iter().map(|&k| (input.bin_freqs[k], weights[k].clone())).collect();
        rows.extend(beampattern_rows(*p, &per_freq, &input.geometry, bp.grid_step_deg)?);
    }
    write_csv(out, &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    /// Scene id, or `mean` for the average over all scenes.
    pub scene: String,
    pub bucket: String,
    pub noisy_db: f64,
    pub mvdr_db: f64,
    pub mwf_db: f64,
    pub mvdr_improvement_db: f64,
    pub mwf_improvement_db: f64,
}

impl OracleRow {
    fn new(scene: &str, bucket: &str, s: &OracleScore) -> Self {
        Self {
            scene: scene.into(),
            bucket: bucket.into(),
            noisy_db: s.noisy_db,
            mvdr_db: s.mvdr_db,
            mwf_db: s.mwf_db,
            mvdr_improvement_db: s.mvdr_db - s.noisy_db,
            mwf_improvement_db: s.mwf_db - s.noisy_db,
        }
    }
}

/// TI-MVDR and TI-MWF on every scene of a dataset; the last row holds the means. With
/// `weights_out`, each scene's oracle weights are saved as `{id}.mvdr.bspt` / `{id}.mwf.bspt`.
pub fn oracle_eval(cfg: &RunConfig, data: &Path, out: &Path, weights_out: Option<&Path>) -> Result<Vec<OracleRow>> {
    cfg.validate()?;
    let manifest = load_manifest(data)?;
    if manifest.is_empty() {
        return Err(Error::Config(format!("{}: dataset has no scenes", data.display())));
    }
    let stft = cfg.stft_config()?;
    let (loading, atf) = (cfg.oracle.loading, cfg.oracle.atf);
    let dir = data.to_path_buf();
    let (worker_stft, entries) = (stft.clone(), manifest.clone());
    let scored = Prefetch::spawn(entries, cfg.training.prefetch_depth, move |e| -> Result<_> {
        let (scene, geom) = load_scene(&dir, &e)?;
        let w = oracle_weights(&scene, &geom, &worker_stft, loading, atf)?;
        let score = score_oracles(&scene, &w, &worker_stft)?;
        Ok((e, geom, w, score))
    });
    let mut rows = Vec::with_capacity(manifest.len() + 1);
    let mut scores = Vec::with_capacity(manifest.len());
    for item in scored {
        let (e, geom, w, score) = item?;
        if let Some(dir) = weights_out {
            save_weights(&dir.join(format!("{}.mvdr.bspt", e.id)), &w.mvdr, &w.bin_freqs, &geom, &format!("ti-mvdr {}", e.id))?;
            save_weights(&dir.join(format!("{}.mwf.bspt", e.id)), &w.mwf, &w.bin_freqs, &geom, &format!("ti-mwf {}", e.id))?;
        }
        rows.push(OracleRow::new(&e.id, &e.bucket, &score));
        scores.push(score);
    }
    let buckets: Vec<&str> = manifest.iter().map(|e| e.bucket.as_str()).collect();
    let bucket = if buckets.windows(2).all(|w| w[0] == w[1]) { buckets[0] } else { "all" };
    rows.push(OracleRow::new("mean", bucket, &mean_score(&scores).expect("at least one scene")));
    write_csv(out, &rows)?;
    Ok(rows)
}

/// Loads scenes in manifest order, rendering the next ones while the caller consumes.
fn scene_stream(data: &Path, depth: usize) -> Result<(Vec<ManifestEntry>, Prefetch<Result<(Scene, ArrayGeometry)>>)> {
    let manifest = load_manifest(data)?;
    if manifest.is_empty() {
        return Err(Error::Config(format!("{}: dataset has no scenes", data.display())));
    }
    let dir = data.to_path_buf();
    let stream = Prefetch::spawn(manifest.clone(), depth, move |e| load_scene(&dir, &e));
    Ok((manifest, stream))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub log: Vec<EpochLog>,
    pub best_val_loss: Option<f64>,
}

/// Trains a model on a dataset directory and writes a checkpoint, `log.csv` and the effective
/// `config.json` into `out`. The last `val_fraction` of the scenes are held out. The log is
/// rewritten after every epoch.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainSummary> {
    cfg.validate()?;
    let stft = cfg.stft_config()?;
    let (manifest, stream) = scene_stream(data, cfg.training.prefetch_depth)?;
    if manifest.len() < 2 {
        return Err(Error::Config("training needs at least two scenes".into()));
    }
    let val_count = ((manifest.len() as f64 * cfg.training.val_fraction).round() as usize).clamp(1, manifest.len() - 1);
    let split = manifest.len() - val_count;
    let mut geometry: Option<ArrayGeometry> = None;
    let mut examples = Vec::with_capacity(manifest.len());
    for item in stream {
        let (scene, g) = item?;
        match &geometry {
            Some(first) if *first != g => return Err(Error::Config("scenes were rendered on different arrays".into())),
            _ => geometry = Some(g),
        }
        examples.push(TrainExample::from_scene(&scene, &stft)?);
    }
    let geometry = geometry.expect("non-empty dataset");
    let mut model = TaylorModel::new(&geometry, &stft, cfg.model.clone())?;
    std::fs::create_dir_all(out).map_err(|source| Error::Io { path: out.to_path_buf(), source })?;
    write_json(&out.join(TRAIN_CONFIG), cfg)?;
    let log_path = out.join(TRAIN_LOG);
    write_csv::<EpochLog>(&log_path, &[])?;
    let mut log = Vec::new();
    let mut log_error = None;
    let state = train_model(&mut model, &examples[..split], &examples[split..], |e| {
        log.push(e.clone());
        if let Err(err) = write_csv(&log_path, &log) {
            log_error.get_or_insert(err);
        }
        on_epoch(e);
    })?;
    if let Some(err) = log_error {
        return Err(err);
    }
    save_checkpoint(out, &model, Some(&state))?;
    Ok(TrainSummary {
        train_scenes: split,
        val_scenes: val_count,
        log: state.log.clone(),
        best_val_loss: state.best_val_loss.is_finite().then_some(state.best_val_loss),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// Bucket label, or `all`.
    pub bucket: String,
    pub scenes: usize,
    pub order: usize,
    pub noisy_db: f64,
    pub enhanced_db: f64,
    pub improvement_db: f64,
}

/// Mean SI-SNR of the noisy reference and of the model output per bucket, then over all
/// scenes. `order` truncates the series (the trained order when `None`). With `activations`,
/// the mean `|𝒢|` per frame and beam on the first scene is exported.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path, order: Option<usize>, activations: Option<&Path>) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    let model = load_checkpoint(checkpoint)?.model;
    let (manifest, stream) = scene_stream(data, cfg.training.prefetch_depth)?;
    let mut scenes = Vec::with_capacity(manifest.len());
    for item in stream {
        let (scene, g) = item?;
        if g != model.geometry {
            return Err(Error::Config("dataset array differs from the model's array".into()));
        }
        scenes.push(scene);
    }
    let q = order.unwrap_or(model.config.order);
    let mut buckets: Vec<&str> = Vec::new();
    for e in &manifest {
        if !buckets.contains(&e.bucket.as_str()) {
            buckets.push(&e.bucket);
        }
    }
    let mut groups: Vec<(String, Vec<Scene>)> = buckets
        .iter()
        .map(|b| (b.to_string(), manifest.iter().zip(&scenes).filter(|(e, _)| e.bucket == *b).map(|(_, s)| s.clone()).collect()))
        .collect();
    if groups.len() > 1 {
        groups.push(("all".into(), scenes.clone()));
    }
    let mut rows = Vec::with_capacity(groups.len());
    for (bucket, group) in &groups {
        let s = evaluate_si_snr_at(&model, group, Some(q))?;
        rows.push(EvalRow {
            bucket: bucket.clone(),
            scenes: group.len(),
            order: q,
            noisy_db: s.noisy_db,
            enhanced_db: s.enhanced_db,
            improvement_db: s.improvement_db(),
        });
    }
    if let Some(path) = activations {
        let x = beamspace_core::stft::analyze(&scenes[0].mixture, &model.stft)?;
        write_csv(path, &activation_rows(&model.enhance_with_order(&x, Some(q))?.activations))?;
    }
    write_csv(out, &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub check: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Order of the end-to-end model checks.
pub const GRADCHECK_ORDER: usize = 3;
pub const GRADCHECK_BEAMS: usize = 6;

pub const ALL_REGIMES: [Regime; 5] =
    [Regime::FixedDs, Regime::FixedSd, Regime::SemiLearnable, Regime::FullLearnablePhysical, Regime::FullLearnableRaw];

/// Every registered operation check, then the full model in each dictionary regime. Fails
/// with [`Error::Gate`] when any check misses its tolerance; the table is written either way.
pub fn gradcheck(seeds: u64, out: Option<&Path>) -> Result<Vec<GradcheckRow>> {
    let mut rows: Vec<GradcheckRow> = op_suite(seeds)?
        .into_iter()
        .map(|r| GradcheckRow { check: r.name.into(), passed: r.passed(), max_relative_error: r.max_relative_error, tolerance: r.tolerance })
        .collect();
    for regime in ALL_REGIMES {
        let e = micro_grad_check(regime, GRADCHECK_ORDER, GRADCHECK_BEAMS, 7)?.max_relative_error;
        rows.push(GradcheckRow {
            check: format!("taylor model ({})", regime.name()),
            max_relative_error: e,
            tolerance: MODEL_TOLERANCE,
            passed: e < MODEL_TOLERANCE,
        });
    }
    if let Some(path) = out {
        write_csv(path, &rows)?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.check.as_str()).collect();
    if !failed.is_empty() {
        return Err(Error::Gate(format!("gradient checks over tolerance: {}", failed.join(", "))));
    }
    Ok(rows)
}
