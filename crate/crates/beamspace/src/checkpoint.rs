//! Model checkpoints: a directory with `manifest.json`, `params.bspt` and, when optimizer state
//! is saved, `optimizer.bspt`.

use std::path::Path;

use beamspace_core::array::ArrayGeometry;
use beamspace_core::nn::{Activation, AdamState, PlateauHalving, Tensor};
use beamspace_core::stft::StftConfig;
use beamspace_core::taylor::{TaylorConfig, TaylorModel, TrainState};
use serde::{Deserialize, Serialize};

use crate::error::{format_error, Result};
use crate::fsutil::{read_json, write_json};
use crate::tensor_file::{read_tensor_file, write_tensor_file};

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bspt";
pub const OPTIMIZER: &str = "optimizer.bspt";
const VERSION: u32 = 1;

/// The STFT settings that define a model's input layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftLayout {
    pub win_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub compression_power: f64,
}

impl StftLayout {
    pub fn of(cfg: &StftConfig) -> Self {
        Self { win_len: cfg.win_len, hop: cfg.hop, fft_size: cfg.fft_size, compression_power: cfg.compression_power }
    }

    pub fn build(&self) -> Result<StftConfig> {
        let mut cfg = StftConfig::new(self.win_len, self.hop, self.fft_size)?;
        cfg.compression_power = self.compression_power;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for StftLayout {
    fn default() -> Self {
        Self::of(&StftConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Index of the first value in the parameter payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub weight: String,
    pub bias: String,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerRecord {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: ScheduleRecord,
}

/// Plateau schedule state; `best` is absent before the first observed epoch (JSON has no
/// infinity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleRecord {
    pub patience: usize,
    pub best: Option<f64>,
    pub stale_epochs: usize,
    pub halvings: usize,
}

impl From<&PlateauHalving> for ScheduleRecord {
    fn from(s: &PlateauHalving) -> Self {
        Self { patience: s.patience, best: s.best.is_finite().then_some(s.best), stale_epochs: s.stale_epochs, halvings: s.halvings }
    }
}

impl From<&ScheduleRecord> for PlateauHalving {
    fn from(r: &ScheduleRecord) -> Self {
        Self { patience: r.patience, best: r.best.unwrap_or(f64::INFINITY), stale_epochs: r.stale_epochs, halvings: r.halvings }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: TaylorConfig,
    pub stft: StftLayout,
    pub geometry: ArrayGeometry,
    /// Optimizer steps taken.
    pub step: u64,
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    pub params: Vec<ParamRecord>,
    pub layers: Vec<LayerRecord>,
    pub optimizer: Option<OptimizerRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PayloadHeader {
    format: String,
    values: usize,
}

/// Everything restored from a checkpoint directory.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: TaylorModel,
    pub adam: Option<AdamState>,
}

fn layer_records(model: &TaylorModel) -> Vec<LayerRecord> {
    std::iter::once(&model.mixer)
        .chain(&model.modules)
        .flat_map(|mlp| &mlp.layers)
        .map(|d| LayerRecord {
            weight: model.store.name(d.weight).to_string(),
            bias: model.store.name(d.bias).to_string(),
            inputs: d.inputs,
            outputs: d.outputs,
            activation: d.activation,
        })
        .collect()
}

/// Saves the model and, when given, the optimizer state of a training run.
pub fn save_checkpoint(dir: &Path, model: &TaylorModel, state: Option<&TrainState>) -> Result<()> {
    let mut params = Vec::new();
    let mut payload = Vec::with_capacity(model.store.scalar_count());
    for e in model.store.entries() {
        params.push(ParamRecord { name: e.name.clone(), rows: e.value.rows(), cols: e.value.cols(), offset: payload.len() });
        payload.extend_from_slice(e.value.data());
    }
    write_tensor_file(&dir.join(PARAMS), &PayloadHeader { format: "parameters".into(), values: payload.len() }, &payload)?;
    let optimizer = match state {
        Some(s) => {
            let (first, second) = s.adam.moments();
            let moments: Vec<f64> = first.iter().chain(second).flat_map(|t| t.data().iter().copied()).collect();
            write_tensor_file(&dir.join(OPTIMIZER), &PayloadHeader { format: "adam-moments".into(), values: moments.len() }, &moments)?;
            Some(OptimizerRecord {
                step: s.adam.step,
                lr: s.adam.lr,
                beta1: s.adam.beta1,
                beta2: s.adam.beta2,
                eps: s.adam.eps,
                schedule: (&s.schedule).into(),
            })
        }
        None => None,
    };
    let manifest = CheckpointManifest {
        version: VERSION,
        config: model.config.clone(),
        stft: StftLayout::of(&model.stft),
        geometry: model.geometry.clone(),
        step: state.map_or(0, |s| s.adam.step),
        epoch: state.map_or(0, |s| s.epoch),
        best_val_loss: state.map(|s| s.best_val_loss).filter(|v| v.is_finite()),
        params,
        layers: layer_records(model),
        optimizer,
    };
    // the manifest goes last so a directory with a manifest is always complete
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST);
    let manifest: CheckpointManifest = read_json(&manifest_path)?;
    if manifest.version != VERSION {
        return Err(format_error(&manifest_path, format!("unsupported checkpoint version {}", manifest.version)));
    }
    let stft = manifest.stft.build()?;
    let mut model = TaylorModel::new(&manifest.geometry, &stft, manifest.config.clone())?;
    let params_path = dir.join(PARAMS);
    let (_, payload): (PayloadHeader, Vec<f64>) = read_tensor_file(&params_path)?;
    if manifest.params.len() != model.store.len() {
        return Err(format_error(&params_path, format!("{} parameters, model has {}", manifest.params.len(), model.store.len())));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, rec) in ids.into_iter().zip(&manifest.params) {
        let target = model.store.get(id);
        if model.store.name(id) != rec.name || target.shape() != (rec.rows, rec.cols) {
            return Err(format_error(&params_path, format!("parameter `{}` does not match the model layout", rec.name)));
        }
        let n = rec.rows * rec.cols;
        let values = payload.get(rec.offset..rec.offset + n).ok_or_else(|| format_error(&params_path, "parameter payload too short"))?;
        model.store.get_mut(id).data_mut().copy_from_slice(values);
    }
    if layer_records(&model) != manifest.layers {
        return Err(format_error(&manifest_path, "layer table does not match the model"));
    }
    let adam = match &manifest.optimizer {
        Some(rec) => {
            let opt_path = dir.join(OPTIMIZER);
            let (_, moments): (PayloadHeader, Vec<f64>) = read_tensor_file(&opt_path)?;
            let mut adam = AdamState::new(&model.store, rec.lr);
            adam.step = rec.step;
            adam.beta1 = rec.beta1;
            adam.beta2 = rec.beta2;
            adam.eps = rec.eps;
            let total = model.store.scalar_count();
            if moments.len() != 2 * total {
                return Err(format_error(&opt_path, "moment payload does not match the parameters"));
            }
            let split = |vals: &[f64]| -> Vec<Tensor> {
                let mut at = 0;
                model
                    .store
                    .entries()
                    .iter()
                    .map(|e| {
                        let (r, c) = e.value.shape();
                        let t = Tensor::from_vec(r, c, vals[at..at + r * c].to_vec()).expect("moment shape");
                        at += r * c;
                        t
                    })
                    .collect()
            };
            adam.set_moments(split(&moments[..total]), split(&moments[total..]))?;
            Some(adam)
        }
        None => None,
    };
    Ok(Checkpoint { manifest, model, adam })
}

impl Checkpoint {
    /// Training state to resume from, when the checkpoint carries optimizer moments.
    pub fn train_state(&self) -> Option<TrainState> {
        let (adam, rec) = (self.adam.clone()?, self.manifest.optimizer.as_ref()?);
        let mut state = TrainState::new(&self.model);
        state.adam = adam;
        state.schedule = (&rec.schedule).into();
        state.epoch = self.manifest.epoch;
        state.best_val_loss = self.manifest.best_val_loss.unwrap_or(f64::INFINITY);
        Some(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use beamspace_core::array::circular_array;
    use beamspace_core::dictionary::Regime;
    use beamspace_core::stft::MultichannelSpectrogram;
    use beamspace_core::taylor::{train_batch, TrainExample};
    use beamspace_core::C64;

    fn tiny() -> TaylorModel {
        let g = circular_array(0.05, 3, true, 16000.0).unwrap();
        let cfg = TaylorConfig { beams: 4, order: 2, regime: Regime::SemiLearnable, mixer_hidden: 3, module_hidden: 4, ..TaylorConfig::default() };
        TaylorModel::new(&g, &StftConfig::new(16, 8, 16).unwrap(), cfg).unwrap()
    }

    fn example() -> TrainExample {
        let data = (0..2 * 9 * 4).map(|i| C64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos())).collect();
        let mixture = MultichannelSpectrogram::from_vec(2, 4, data, StftConfig::new(16, 8, 16).unwrap()).unwrap();
        let clean = mixture.channel(3);
        TrainExample { mixture, clean }
    }

    #[test]
    fn round_trip_restores_parameters_and_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny();
        let mut state = TrainState::new(&model);
        let ex = example();
        for _ in 0..3 {
            train_batch(&mut model, &mut state, std::slice::from_ref(&ex)).unwrap();
        }
        save_checkpoint(dir.path(), &model, Some(&state)).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.model.store, model.store);
        assert_eq!(ck.manifest.step, 3);
        assert_eq!(ck.manifest.config.order, 2);
        let resumed = ck.train_state().unwrap();
        assert_eq!(resumed.adam, state.adam);
        // continuing from the checkpoint matches continuing in memory
        let (mut a, mut sa) = (model.clone(), state.clone());
        let (mut b, mut sb) = (ck.model.clone(), resumed);
        train_batch(&mut a, &mut sa, std::slice::from_ref(&ex)).unwrap();
        train_batch(&mut b, &mut sb, std::slice::from_ref(&ex)).unwrap();
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn inference_only_checkpoint_and_layout_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny();
        save_checkpoint(dir.path(), &model, None).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert!(ck.adam.is_none() && ck.train_state().is_none());
        let mut manifest: CheckpointManifest = read_json(&dir.path().join(MANIFEST)).unwrap();
        manifest.config.module_hidden = 7;
        write_json(&dir.path().join(MANIFEST), &manifest).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
