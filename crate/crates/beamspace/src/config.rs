//! Run configuration. Values come from the built-in defaults, then an optional JSON file, then
//! command-line flags, each layer overriding the previous one.

use std::path::Path;

use beamspace_core::array::{ArrayGeometry, CircularArraySpec};
use beamspace_core::dictionary::Regime;
use beamspace_core::oracle::ORACLE_LOADING;
use beamspace_core::sim::{Bucket, DatasetConfig, SourceKind};
use beamspace_core::stft::StftConfig;
use beamspace_core::taylor::TaylorConfig;
use serde::{Deserialize, Serialize};

use crate::checkpoint::StftLayout;
use crate::error::{Error, Result};
use crate::fsutil::read_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub array: CircularArraySpec,
    pub stft: StftLayout,
    pub dataset: DatasetSection,
    pub model: TaylorConfig,
    pub training: TrainingSection,
    pub beampattern: BeampatternSection,
    pub oracle: OracleSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_scenes: usize,
    /// `"45-90"`-style DOA-difference bucket or `"set-b"`.
    pub bucket: String,
    /// Noise-count range for Set-B scenes, e.g. `"1-3"`.
    pub noises: Option<String>,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub duration_s: f64,
    pub target_kind: String,
    pub noise_pool: Vec<String>,
    pub seed: u64,
    pub reverb_tail: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            n_scenes: 20,
            bucket: "set-b".into(),
            noises: None,
            snr_min_db: -5.0,
            snr_max_db: 10.0,
            duration_s: 2.0,
            target_kind: "speechlike".into(),
            noise_pool: vec!["white".into(), "pink".into(), "speechlike".into()],
            seed: 0,
            reverb_tail: false,
        }
    }
}

impl DatasetSection {
    pub fn bucket(&self) -> Result<Bucket> {
        let mut bucket = Bucket::parse(&self.bucket)?;
        if let Some(noises) = &self.noises {
            let (lo, hi) = parse_count_range(noises)?;
            bucket = match bucket {
                Bucket::SetB { .. } => Bucket::SetB { min_noises: lo, max_noises: hi },
                // DOA-difference buckets place exactly one noise
                Bucket::Range { .. } if (lo, hi) == (1, 1) => bucket,
                Bucket::Range { .. } => {
                    return Err(Error::Config(format!("bucket `{}` places a single noise; `--noises {noises}` needs set-b", self.bucket)))
                }
            };
            bucket.validate()?;
        }
        Ok(bucket)
    }

    pub fn build(&self) -> Result<DatasetConfig> {
        let mut cfg = DatasetConfig::new(self.n_scenes, self.bucket()?, self.seed);
        cfg.snr_range_db = (self.snr_min_db, self.snr_max_db);
        cfg.duration_s = self.duration_s;
        cfg.target_kind = SourceKind::parse(&self.target_kind)?;
        cfg.noise_pool = self.noise_pool.iter().map(|k| SourceKind::parse(k)).collect::<Result<_, _>>()?;
        cfg.reverb_tail = self.reverb_tail;
        Ok(cfg)
    }
}

fn parse_count_range(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("cannot parse noise count range `{s}`"));
    match s.split_once('-') {
        Some((a, b)) => Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?)),
        None => {
            let n = s.trim().parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    /// Share of the scenes held out for validation.
    pub val_fraction: f64,
    /// Scenes prepared ahead of the consumer while loading.
    pub prefetch_depth: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self { val_fraction: 0.2, prefetch_depth: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeampatternSection {
    pub grid_step_deg: f64,
    /// Frequencies to export, snapped to the nearest bin; every bin when absent.
    pub freqs_hz: Option<Vec<f64>>,
    /// Beams to export; all when absent.
    pub beams: Option<Vec<usize>>,
    /// Dictionary built when no input file is given.
    pub regime: Regime,
    pub num_beams: usize,
}

impl Default for BeampatternSection {
    fn default() -> Self {
        Self { grid_step_deg: 1.0, freqs_hz: None, beams: None, regime: Regime::FixedDs, num_beams: 36 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    /// Diagonal loading relative to `trace(Φ)/M`.
    pub loading: f64,
    pub atf: AtfKind,
}

/// Look direction of the oracle MVDR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AtfKind {
    /// Far-field steering vector toward the true target direction.
    Steering,
    /// Principal eigenvector of the oracle speech covariance.
    Eigenvector,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { loading: ORACLE_LOADING, atf: AtfKind::Steering }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            array: CircularArraySpec::default(),
            stft: StftLayout::default(),
            dataset: DatasetSection::default(),
            model: TaylorConfig::default(),
            training: TrainingSection::default(),
            beampattern: BeampatternSection::default(),
            oracle: OracleSection::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => read_json(p),
            None => Ok(Self::default()),
        }
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        Ok(self.array.build()?)
    }

    pub fn stft_config(&self) -> Result<StftConfig> {
        self.stft.build()
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        self.stft_config()?;
        self.dataset.build()?;
        self.model.validate()?;
        let t = &self.training;
        if !(t.val_fraction > 0.0 && t.val_fraction < 1.0) {
            return Err(Error::Config(format!("validation fraction {} must lie in (0, 1)", t.val_fraction)));
        }
        if t.prefetch_depth == 0 {
            return Err(Error::Config("prefetch depth must be at least 1".into()));
        }
        let b = &self.beampattern;
        if !(b.grid_step_deg > 0.0 && b.grid_step_deg <= 360.0) {
            return Err(Error::Config(format!("grid step {}° must lie in (0°, 360°]", b.grid_step_deg)));
        }
        if b.num_beams == 0 {
            return Err(Error::Config("beampattern needs at least one beam".into()));
        }
        if !(self.oracle.loading >= 0.0 && self.oracle.loading.is_finite()) {
            return Err(Error::Config(format!("oracle loading {} must be non-negative", self.oracle.loading)));
        }
        Ok(())
    }
}
