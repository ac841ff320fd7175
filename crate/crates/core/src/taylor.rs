//! The Taylor beam-mixing model.
//!
//! A dictionary projects the array signal onto `P` beams. A 0th-order mixer turns compressed
//! beam features into complex activations `𝒢` and mixes the beams into a first estimate `S0`.
//! `Q` trainable order modules then produce correction terms through
//! `H_{q+1} = q·H_q + f_q(Y, H_q)` with `H_0 = S0`, and the output is `S0 + Σ_{q≥1} H_q`.
//!
//! Complex quantities live on the tape as separate real and imaginary tensors whose rows are
//! T-F bins `(l, k)` in frame-major order (or `(l, k, p)` for per-beam features).

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::ArrayGeometry;
use crate::beamspace::{ActivationMatrix, BeamTensor};
use crate::dictionary::{init_dictionary, BeamDictionary, Regime, TrainableDictionary};
use crate::error::{msg, Error, Result};
use crate::nn::suite::MODEL_CHECK_STEP;
use crate::nn::{grad_check_with, Difference, Activation, AdamState, GradCheckReport, GroupMap, Mlp, ParamId, ParamStore, PlateauHalving, Tape, Tensor, Var};
use crate::sim::{si_snr, Scene};
use crate::stft::{analyze, analyze_mono, resynthesize, synthesize_mono, MultichannelSpectrogram, Spectrogram, StftConfig};
use crate::C64;

/// Floor added to `|z|²` before fractional powers so that gradients stay finite at zero.
pub const MAGNITUDE_EPS: f64 = 1e-8;

/// Smoothing constants of the causal energy trackers fed to the mixer.
const EMA_FAST: f64 = 0.7;
const EMA_SLOW: f64 = 0.97;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaylorConfig {
    /// Number of order terms after the 0th.
    pub order: usize,
    pub beams: usize,
    pub regime: Regime,
    pub mixer_hidden: usize,
    pub module_hidden: usize,
    /// Past frames of beam energy visible to the mixer.
    pub frames_context: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Non-improving epochs before the learning rate is halved.
    pub patience: usize,
    pub seed: u64,
    /// Train on random windows of this many frames.
    pub crop_frames: Option<usize>,
}

impl Default for TaylorConfig {
    fn default() -> Self {
        Self {
            order: 3,
            beams: 36,
            regime: Regime::FullLearnableRaw,
            mixer_hidden: 16,
            module_hidden: 32,
            frames_context: 3,
            learning_rate: 5e-4,
            epochs: 25,
            batch_size: 4,
            patience: 2,
            seed: 0,
            crop_frames: None,
        }
    }
}

impl TaylorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beams == 0 || self.mixer_hidden == 0 || self.module_hidden == 0 {
            return Err(Error::InvalidParameter(msg!("beam count and layer widths must be at least 1")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(msg!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::InvalidParameter(msg!("batch size and patience must be at least 1")));
        }
        if self.crop_frames == Some(0) {
            return Err(Error::InvalidParameter(msg!("crop length must be at least one frame")));
        }
        Ok(())
    }

    /// Width of the per-beam mixer input.
    pub fn mixer_inputs(&self) -> usize {
        // share of the beam level, normalized re/im, lagged shares, two share trackers,
        // modulation against the slow tracker, bin position
        3 + self.frames_context + 2 + 1 + 1
    }

    /// Width of each order module's per-bin input.
    pub fn module_inputs(&self) -> usize {
        2 * self.beams + 3
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Steering {
    Fixed(Tensor, Tensor),
    Learned(ParamId, ParamId),
}

/// How the `(K·P) × M` beam matrices are produced on the tape.
#[derive(Debug, Clone, PartialEq)]
enum DictParams {
    Fixed { re: Tensor, im: Tensor },
    Raw { re: ParamId, im: ParamId },
    Cholesky { ur: ParamId, ui: ParamId, steering: Steering, mask: Tensor },
}

/// Splits complex values into two row-major real tensors of shape `rows × cols`.
fn split_complex(values: &[C64], rows: usize, cols: usize) -> (Tensor, Tensor) {
    let re = values.iter().map(|z| z.re).collect();
    let im = values.iter().map(|z| z.im).collect();
    (Tensor::from_vec(rows, cols, re).expect("split shape"), Tensor::from_vec(rows, cols, im).expect("split shape"))
}

fn join_complex(re: &Tensor, im: &Tensor) -> Vec<C64> {
    re.data().iter().zip(im.data()).map(|(&a, &b)| C64::new(a, b)).collect()
}

/// `(z·|z|^{p−1}, |z|^p)` with `|z|² + ε` in place of `|z|²`.
fn compress_on_tape(tape: &mut Tape, re: Var, im: Var, power: f64) -> (Var, Var, Var) {
    let r2 = tape.square(re);
    let i2 = tape.square(im);
    let m2 = tape.add(r2, i2);
    let m2 = tape.add_scalar(m2, MAGNITUDE_EPS);
    let gain = tape.powf(m2, 0.5 * (power - 1.0));
    let cr = tape.mul(re, gain);
    let ci = tape.mul(im, gain);
    let mag = tape.powf(m2, 0.5 * power);
    (cr, ci, mag)
}

/// Plain-value counterpart of [`compress_on_tape`].
fn compress_plain(z: C64, power: f64) -> (f64, f64, f64) {
    let m2 = z.norm_sqr() + MAGNITUDE_EPS;
    let g = libm::pow(m2, 0.5 * (power - 1.0));
    (z.re * g, z.im * g, libm::pow(m2, 0.5 * power))
}

/// Intermediate results of the 0th-order pass that the order modules reuse.
#[derive(Debug, Clone, Copy)]
struct ZerothOrder {
    g: (Var, Var),
    s0: (Var, Var),
    /// Compressed beam outputs divided by the level.
    cy: (Var, Var),
    /// Cross-beam mean compressed magnitude per bin, `(L·K) × 1`.
    level: Var,
    inv_level: Var,
}

/// Tape variables of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub y: (Var, Var),
    pub g: (Var, Var),
    pub s0: (Var, Var),
    /// `H_1 … H_Q`.
    pub terms: Vec<(Var, Var)>,
    pub estimate: (Var, Var),
}

/// Value-level outputs of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorOutput {
    pub estimate: Spectrogram,
    pub s0: Spectrogram,
    pub activations: ActivationMatrix,
    pub terms: Vec<Spectrogram>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaylorModel {
    pub config: TaylorConfig,
    pub stft: StftConfig,
    pub geometry: ArrayGeometry,
    pub store: ParamStore,
    pub mixer: Mlp,
    pub modules: Vec<Mlp>,
    dict: DictParams,
    template: BeamDictionary,
}

impl TaylorModel {
    /// Fresh model: dictionary initialized for the configured regime, networks seeded from
    /// `config.seed`, and the last layer of every order module zeroed so that an untrained
    /// model outputs its 0th-order estimate.
    pub fn new(geometry: &ArrayGeometry, stft: &StftConfig, config: TaylorConfig) -> Result<Self> {
        config.validate()?;
        stft.validate()?;
        let trainable = init_dictionary(geometry, stft, config.regime, config.beams)?;
        let mut store = ParamStore::new();
        let (k, m, p) = (stft.num_bins(), geometry.num_mics(), config.beams);
        let (dict, template) = match trainable {
            TrainableDictionary::Frozen(d) => {
                let (re, im) = split_complex(&beam_rows(&d), k * p, m);
                (DictParams::Fixed { re, im }, d)
            }
            TrainableDictionary::Raw(d) => {
                let (re, im) = split_complex(&beam_rows(&d), k * p, m);
                (DictParams::Raw { re: store.add("dictionary.re", re), im: store.add("dictionary.im", im) }, d)
            }
            TrainableDictionary::Cholesky { noise, steering, train_steering, template } => {
                let (ur, ui) = split_complex(&noise.factors, k * m, m);
                let ur = store.add("noise_factor.re", ur);
                let ui = store.add("noise_factor.im", ui);
                let (hr, hi) = split_complex(&steering.data, k * p, m);
                let steering = if train_steering {
                    Steering::Learned(store.add("steering.re", hr), store.add("steering.im", hi))
                } else {
                    Steering::Fixed(hr, hi)
                };
                let mask = Tensor::from_vec(k * m, m, (0..k * m * m).map(|i| f64::from(u8::from(i % m <= (i / m) % m))).collect())
                    .expect("mask shape");
                (DictParams::Cholesky { ur, ui, steering, mask }, template)
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mixer = Mlp::new(
            &mut store,
            "mixer",
            &[config.mixer_inputs(), config.mixer_hidden, 2],
            Activation::Tanh,
            Activation::Linear,
            &mut rng,
        );
        // activations start near the uniform average 1/P of all beams
        store.get_mut(mixer.last().bias).data_mut()[0] = 1.0;
        let modules = (0..config.order)
            .map(|q| {
                let mlp = Mlp::new(
                    &mut store,
                    &alloc::format!("order{q}"),
                    &[config.module_inputs(), config.module_hidden, 2],
                    Activation::Tanh,
                    Activation::Linear,
                    &mut rng,
                );
                mlp.last().zero(&mut store);
                mlp
            })
            .collect();
        Ok(Self { config, stft: stft.clone(), geometry: geometry.clone(), store, mixer, modules, dict, template })
    }

    pub fn bins(&self) -> usize {
        self.stft.num_bins()
    }

    pub fn mics(&self) -> usize {
        self.geometry.num_mics()
    }

    pub fn beams(&self) -> usize {
        self.config.beams
    }

    /// Zeroes the last layer of every order module with index `≥ from`.
    pub fn zero_modules_from(&mut self, from: usize) {
        for m in self.modules.iter().skip(from) {
            m.last().zero(&mut self.store);
        }
    }

    /// Zeroes the mixer's last layer, making every activation 0.
    pub fn zero_mixer_output(&mut self) {
        self.mixer.last().zero(&mut self.store);
    }

    /// Dictionary parameters that are trainable in this regime.
    pub fn dictionary_params(&self) -> Vec<ParamId> {
        match &self.dict {
            DictParams::Fixed { .. } => vec![],
            DictParams::Raw { re, im } => vec![*re, *im],
            DictParams::Cholesky { ur, ui, steering, .. } => {
                let mut v = vec![*ur, *ui];
                if let Steering::Learned(a, b) = steering {
                    v.extend([*a, *b]);
                }
                v
            }
        }
    }

    /// Beam matrices `(re, im)`, rows `(k, p)`, columns `m`.
    pub fn dictionary_vars(&self, tape: &mut Tape, store: &ParamStore) -> (Var, Var) {
        let p = self.beams();
        let m = self.mics();
        match &self.dict {
            DictParams::Fixed { re, im } => (tape.input(re.clone()), tape.input(im.clone())),
            DictParams::Raw { re, im } => (tape.param(store, *re), tape.param(store, *im)),
            DictParams::Cholesky { ur, ui, steering, mask } => {
                let ur = tape.param(store, *ur);
                let ur = tape.mul_const(ur, mask.clone());
                let ui = tape.param(store, *ui);
                let ui = tape.mul_const(ui, mask.clone());
                let (hr, hi) = match steering {
                    Steering::Fixed(a, b) => (tape.input(a.clone()), tape.input(b.clone())),
                    Steering::Learned(a, b) => (tape.param(store, *a), tape.param(store, *b)),
                };
                // v = Uᴴh, as the row vector hᵀ·conj(U)
                let map = GroupMap::Div(p);
                let a = tape.grouped_matmul(hr, ur, map, m, false);
                let b = tape.grouped_matmul(hi, ui, map, m, false);
                let vr = tape.add(a, b);
                let a = tape.grouped_matmul(hi, ur, map, m, false);
                let b = tape.grouped_matmul(hr, ui, map, m, false);
                let vi = tape.sub(a, b);
                // B = U·v / ‖v‖², as the row vector vᵀ·Uᵀ
                let a = tape.grouped_matmul(vr, ur, map, m, true);
                let b = tape.grouped_matmul(vi, ui, map, m, true);
                let br = tape.sub(a, b);
                let a = tape.grouped_matmul(vr, ui, map, m, true);
                let b = tape.grouped_matmul(vi, ur, map, m, true);
                let bi = tape.add(a, b);
                let vr2 = tape.square(vr);
                let vi2 = tape.square(vi);
                let n = tape.add(vr2, vi2);
                let n = tape.row_sum(n);
                let inv = tape.powf(n, -1.0);
                (tape.mul_col(br, inv), tape.mul_col(bi, inv))
            }
        }
    }

    /// The dictionary currently represented by the parameters.
    pub fn dictionary(&self) -> Result<BeamDictionary> {
        let mut tape = Tape::new();
        let (br, bi) = self.dictionary_vars(&mut tape, &self.store);
        if let Some(p) = tape.poisoned() {
            return Err(Error::Numerical(msg!("dictionary materialization: {p}")));
        }
        let rows = join_complex(tape.value(br), tape.value(bi));
        let (k, m, p) = (self.bins(), self.mics(), self.beams());
        let mut data = vec![C64::new(0.0, 0.0); k * m * p];
        for kk in 0..k {
            for pp in 0..p {
                for mm in 0..m {
                    data[(kk * m + mm) * p + pp] = rows[(kk * p + pp) * m + mm];
                }
            }
        }
        BeamDictionary::from_vec(
            k,
            m,
            p,
            data,
            self.template.regime,
            self.template.doa_grid.clone(),
            self.template.bin_freqs.clone(),
            self.geometry.clone(),
        )
    }

    fn check_signal(&self, x: &MultichannelSpectrogram) -> Result<()> {
        if x.channels() != self.mics() || x.bins() != self.bins() {
            return Err(Error::Shape(msg!(
                "model expects {} bins x {} channels, got {} x {}",
                self.bins(),
                self.mics(),
                x.bins(),
                x.channels()
            )));
        }
        if x.frames() == 0 {
            return Err(Error::Empty(msg!("no frames")));
        }
        Ok(())
    }

    /// `Y = ℬᴴX` on the tape, rows `(l, k)`, columns `p`.
    pub fn project_vars(&self, tape: &mut Tape, store: &ParamStore, x: &MultichannelSpectrogram) -> Result<(Var, Var)> {
        self.check_signal(x)?;
        let (k, m, p) = (self.bins(), self.mics(), self.beams());
        let (xr, xi) = split_complex(x.as_slice(), x.frames() * k, m);
        let xr = tape.input(xr);
        let xi = tape.input(xi);
        let (br, bi) = self.dictionary_vars(tape, store);
        let map = GroupMap::Modulo(k);
        let a = tape.grouped_matmul(xr, br, map, p, true);
        let b = tape.grouped_matmul(xi, bi, map, p, true);
        let yr = tape.add(a, b);
        let a = tape.grouped_matmul(xi, br, map, p, true);
        let b = tape.grouped_matmul(xr, bi, map, p, true);
        let yi = tape.sub(a, b);
        Ok((yr, yi))
    }

    fn bin_position(&self, frames: usize, repeat: usize) -> Tensor {
        let k = self.bins();
        let denom = if k > 1 { (k - 1) as f64 } else { 1.0 };
        let mut out = Vec::with_capacity(frames * k * repeat);
        for _ in 0..frames {
            for kk in 0..k {
                out.extend(core::iter::repeat(kk as f64 / denom).take(repeat));
            }
        }
        Tensor::column(out)
    }

    /// Mixer on compressed beam features, then `S0 = Σ_p conj(𝒢_p)·Y_p` on the raw beams.
    ///
    /// Features are divided by the cross-beam mean compressed magnitude of the same bin so the
    /// activations do not depend on the input level. Returns `(𝒢, S0, normalized compressed Y,
    /// cross-beam mean)`.
    fn zeroth_order(&self, tape: &mut Tape, store: &ParamStore, y: (Var, Var), frames: usize) -> ZerothOrder {
        let (k, p) = (self.bins(), self.beams());
        let rows = frames * k;
        let power = self.stft.compression_power;
        let (cr, ci, cmag) = compress_on_tape(tape, y.0, y.1, power);
        let level = tape.row_mean(cmag);
        let inv_level = tape.powf(level, -1.0);
        let share = tape.mul_col(cmag, inv_level);
        let crn = tape.mul_col(cr, inv_level);
        let cin = tape.mul_col(ci, inv_level);
        let mut feats = vec![share, crn, cin];
        for lag in 1..=self.config.frames_context {
            feats.push(tape.frame_shift(share, k, lag));
        }
        feats.push(tape.causal_ema(share, k, EMA_FAST));
        feats.push(tape.causal_ema(share, k, EMA_SLOW));
        let slow = tape.causal_ema(cmag, k, EMA_SLOW);
        let inv_slow = tape.powf(slow, -1.0);
        feats.push(tape.mul(cmag, inv_slow));
        let mut cols: Vec<Var> = feats.into_iter().map(|f| tape.reshape(f, rows * p, 1)).collect();
        cols.push(tape.input(self.bin_position(frames, p)));
        let input = tape.concat_cols(&cols);
        let out = self.mixer.forward(tape, store, input);
        let out = tape.scale(out, 1.0 / p as f64);
        let gr = tape.slice_cols(out, 0, 1);
        let gr = tape.reshape(gr, rows, p);
        let gi = tape.slice_cols(out, 1, 2);
        let gi = tape.reshape(gi, rows, p);
        let a = tape.mul(gr, y.0);
        let b = tape.mul(gi, y.1);
        let s0r = tape.add(a, b);
        let s0r = tape.row_sum(s0r);
        let a = tape.mul(gr, y.1);
        let b = tape.mul(gi, y.0);
        let s0i = tape.sub(a, b);
        let s0i = tape.row_sum(s0i);
        ZerothOrder { g: (gr, gi), s0: (s0r, s0i), cy: (crn, cin), level, inv_level }
    }

    /// `H_{q+1} = q·H_q + f_q(Y, H_q)`. The module sees level-normalized compressed inputs;
    /// its two outputs are read as a normalized compressed complex value, rescaled by the
    /// level and expanded back to the linear domain.
    fn order_step(&self, tape: &mut Tape, store: &ParamStore, q: usize, z: &ZerothOrder, h: (Var, Var), frames: usize) -> (Var, Var) {
        let power = self.stft.compression_power;
        let (chr, chi, _) = compress_on_tape(tape, h.0, h.1, power);
        let chr = tape.mul(chr, z.inv_level);
        let chi = tape.mul(chi, z.inv_level);
        let pos = tape.input(self.bin_position(frames, 1));
        let input = tape.concat_cols(&[z.cy.0, z.cy.1, chr, chi, pos]);
        let out = self.modules[q].forward(tape, store, input);
        let out = tape.mul_col(out, z.level);
        let or = tape.slice_cols(out, 0, 1);
        let oi = tape.slice_cols(out, 1, 2);
        let r2 = tape.square(or);
        let i2 = tape.square(oi);
        let m2 = tape.add(r2, i2);
        let m2 = tape.add_scalar(m2, MAGNITUDE_EPS);
        let gain = tape.powf(m2, 0.5 * (1.0 / power - 1.0));
        let inc_r = tape.mul(or, gain);
        let inc_i = tape.mul(oi, gain);
        if q == 0 {
            return (inc_r, inc_i);
        }
        let hr = tape.scale(h.0, q as f64);
        let hi = tape.scale(h.1, q as f64);
        (tape.add(hr, inc_r), tape.add(hi, inc_i))
    }

    /// Full forward pass from beam outputs, truncated after `order` terms.
    fn forward_from_beams(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y: (Var, Var),
        frames: usize,
        order: usize,
    ) -> ForwardVars {
        let z = self.zeroth_order(tape, store, y, frames);
        let (g, s0) = (z.g, z.s0);
        let mut h = s0;
        let mut estimate = s0;
        let mut terms = Vec::with_capacity(order);
        for q in 0..order {
            h = self.order_step(tape, store, q, &z, h, frames);
            terms.push(h);
            estimate = (tape.add(estimate.0, h.0), tape.add(estimate.1, h.1));
        }
        ForwardVars { y, g, s0, terms, estimate }
    }

    /// Forward pass from the array signal with the model's order.
    pub fn forward_vars(&self, tape: &mut Tape, store: &ParamStore, x: &MultichannelSpectrogram) -> Result<ForwardVars> {
        let y = self.project_vars(tape, store, x)?;
        Ok(self.forward_from_beams(tape, store, y, x.frames(), self.config.order))
    }

    /// Training objective on the tape.
    pub fn loss_vars(&self, tape: &mut Tape, estimate: (Var, Var), clean: &Spectrogram) -> Result<Var> {
        let rows = clean.frames() * clean.bins();
        if tape.value(estimate.0).shape() != (rows, 1) {
            return Err(Error::Shape(msg!(
                "estimate has {} rows, clean reference {}",
                tape.value(estimate.0).rows(),
                rows
            )));
        }
        let power = self.stft.compression_power;
        let (mut tr, mut ti, mut tm) = (Vec::with_capacity(rows), Vec::with_capacity(rows), Vec::with_capacity(rows));
        for &z in clean.as_slice() {
            let (a, b, c) = compress_plain(z, power);
            tr.push(a);
            ti.push(b);
            tm.push(c);
        }
        let (cr, ci, cm) = compress_on_tape(tape, estimate.0, estimate.1, power);
        let tr = tape.input(Tensor::column(tr));
        let ti = tape.input(Tensor::column(ti));
        let tm = tape.input(Tensor::column(tm));
        let dr = tape.sub(cr, tr);
        let di = tape.sub(ci, ti);
        let dm = tape.sub(cm, tm);
        let dr = tape.square(dr);
        let di = tape.square(di);
        let dm = tape.square(dm);
        let s = tape.add(dr, di);
        let s = tape.add(s, dm);
        Ok(tape.mean(s))
    }

    fn check_poison(tape: &Tape) -> Result<()> {
        match tape.poisoned() {
            Some(p) => Err(Error::Poisoned(p.into())),
            None => Ok(()),
        }
    }

    fn spectrogram(&self, tape: &Tape, v: (Var, Var), frames: usize) -> Spectrogram {
        Spectrogram::from_vec(frames, self.bins(), join_complex(tape.value(v.0), tape.value(v.1))).expect("spectrogram shape")
    }

    /// Activations and 0th-order estimate for given beam outputs.
    pub fn forward_0th(&self, y: &BeamTensor) -> Result<(ActivationMatrix, Spectrogram)> {
        self.check_beams(y)?;
        let mut tape = Tape::new();
        let yv = self.beam_inputs(&mut tape, y);
        let ZerothOrder { g, s0, .. } = self.zeroth_order(&mut tape, &self.store, yv, y.frames());
        Self::check_poison(&tape)?;
        let ga = join_complex(tape.value(g.0), tape.value(g.1));
        let ga = ActivationMatrix::from_vec(y.frames(), y.bins(), y.beams(), ga)?;
        Ok((ga, self.spectrogram(&tape, s0, y.frames())))
    }

    /// One order transition `H_q → H_{q+1}` for given beam outputs.
    pub fn recursion_step(&self, q: usize, h: &Spectrogram, y: &BeamTensor) -> Result<Spectrogram> {
        self.check_beams(y)?;
        if q >= self.modules.len() {
            return Err(Error::InvalidParameter(msg!("order index {q} but the model has {} modules", self.modules.len())));
        }
        if (h.frames(), h.bins()) != (y.frames(), y.bins()) {
            return Err(Error::Shape(msg!("term {}x{} vs beams {}x{}", h.frames(), h.bins(), y.frames(), y.bins())));
        }
        let mut tape = Tape::new();
        let yv = self.beam_inputs(&mut tape, y);
        let z = self.zeroth_order(&mut tape, &self.store, yv, y.frames());
        let (hr, hi) = split_complex(h.as_slice(), h.frames() * h.bins(), 1);
        let hv = (tape.input(hr), tape.input(hi));
        let out = self.order_step(&mut tape, &self.store, q, &z, hv, y.frames());
        Self::check_poison(&tape)?;
        Ok(self.spectrogram(&tape, out, y.frames()))
    }

    fn check_beams(&self, y: &BeamTensor) -> Result<()> {
        if y.bins() != self.bins() || y.beams() != self.beams() {
            return Err(Error::Shape(msg!(
                "model expects {} bins x {} beams, got {} x {}",
                self.bins(),
                self.beams(),
                y.bins(),
                y.beams()
            )));
        }
        Ok(())
    }

    fn beam_inputs(&self, tape: &mut Tape, y: &BeamTensor) -> (Var, Var) {
        let (r, i) = split_complex(y.as_slice(), y.frames() * y.bins(), y.beams());
        (tape.input(r), tape.input(i))
    }

    /// Enhanced spectrum and all intermediate terms, truncated after `order` terms
    /// (the configured order when `None`).
    pub fn enhance_with_order(&self, x: &MultichannelSpectrogram, order: Option<usize>) -> Result<TaylorOutput> {
        let order = order.unwrap_or(self.config.order);
        if order > self.modules.len() {
            return Err(Error::InvalidParameter(msg!("order {order} exceeds the {} trained modules", self.modules.len())));
        }
        let mut tape = Tape::new();
        let y = self.project_vars(&mut tape, &self.store, x)?;
        let f = self.forward_from_beams(&mut tape, &self.store, y, x.frames(), order);
        Self::check_poison(&tape)?;
        let frames = x.frames();
        let g = join_complex(tape.value(f.g.0), tape.value(f.g.1));
        Ok(TaylorOutput {
            estimate: self.spectrogram(&tape, f.estimate, frames),
            s0: self.spectrogram(&tape, f.s0, frames),
            activations: ActivationMatrix::from_vec(frames, self.bins(), self.beams(), g)?,
            terms: f.terms.iter().map(|&t| self.spectrogram(&tape, t, frames)).collect(),
        })
    }

    pub fn enhance(&self, x: &MultichannelSpectrogram) -> Result<TaylorOutput> {
        self.enhance_with_order(x, None)
    }

    /// Loss and per-parameter gradients on one example.
    pub fn loss_and_gradients(&self, x: &MultichannelSpectrogram, clean: &Spectrogram) -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let f = self.forward_vars(&mut tape, &self.store, x)?;
        let loss = self.loss_vars(&mut tape, f.estimate, clean)?;
        Self::check_poison(&tape)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?.for_params(self.store.len());
        Ok((value, grads))
    }

    pub fn loss_value(&self, x: &MultichannelSpectrogram, clean: &Spectrogram) -> Result<f64> {
        let out = self.enhance(x)?;
        loss(&out.estimate, clean, self.stft.compression_power)
    }
}

/// Rows `(k, p)`, columns `m` of a dictionary.
fn beam_rows(d: &BeamDictionary) -> Vec<C64> {
    let mut out = Vec::with_capacity(d.bins() * d.beams() * d.mics());
    for k in 0..d.bins() {
        for p in 0..d.beams() {
            out.extend((0..d.mics()).map(|m| d.get(k, m, p)));
        }
    }
    out
}

/// Mean over T-F bins of `|c(Ŝ) − c(S)|² + (|Ŝ|^p − |S|^p)²`, where `c` compresses the
/// magnitude to the power `p` and keeps the phase.
pub fn loss(estimate: &Spectrogram, clean: &Spectrogram, power: f64) -> Result<f64> {
    estimate.check_same_shape(clean)?;
    let n = estimate.as_slice().len();
    if n == 0 {
        return Err(Error::Empty(msg!("empty spectrogram")));
    }
    let total: f64 = estimate
        .as_slice()
        .iter()
        .zip(clean.as_slice())
        .map(|(&e, &s)| {
            let (er, ei, em) = compress_plain(e, power);
            let (sr, si, sm) = compress_plain(s, power);
            (er - sr) * (er - sr) + (ei - si) * (ei - si) + (em - sm) * (em - sm)
        })
        .sum();
    Ok(total / n as f64)
}

/// One supervised example in the STFT domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub mixture: MultichannelSpectrogram,
    /// Direct-path target at the reference mic.
    pub clean: Spectrogram,
}

impl TrainExample {
    /// STFT of a rendered scene's mixture, with its reference-mic target as the label.
    pub fn from_scene(scene: &Scene, stft: &StftConfig) -> Result<Self> {
        Ok(Self { mixture: analyze(&scene.mixture, stft)?, clean: analyze_mono(scene.clean_ref(), stft)? })
    }

    /// Frames `start..start+len`.
    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        let frames = self.mixture.frames();
        if start + len > frames || len == 0 {
            return Err(Error::InvalidParameter(msg!("crop {start}+{len} of {frames} frames")));
        }
        let (k, m) = (self.mixture.bins(), self.mixture.channels());
        let mix = self.mixture.as_slice()[start * k * m..(start + len) * k * m].to_vec();
        let clean = self.clean.as_slice()[start * k..(start + len) * k].to_vec();
        Ok(Self {
            mixture: MultichannelSpectrogram::from_vec(len, m, mix, self.mixture.config().clone())?,
            clean: Spectrogram::from_vec(len, k, clean)?,
        })
    }
}

/// Mean SI-SNR (dB) of the unprocessed reference mic and of the model output over `scenes`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiSnrSummary {
    pub noisy_db: f64,
    pub enhanced_db: f64,
}

impl SiSnrSummary {
    pub fn improvement_db(&self) -> f64 {
        self.enhanced_db - self.noisy_db
    }
}

/// Time-domain output of the model for a multichannel waveform.
pub fn enhance_waveform(model: &TaylorModel, mixture: &[Vec<f64>]) -> Result<Vec<f64>> {
    let x = analyze(mixture, &model.stft)?;
    synthesize_mono(&model.enhance(&x)?.estimate, &model.stft)
}

/// Scores the model and the reference-mic mixture on every scene against the clean reference.
/// All three signals go through the same analysis/synthesis chain.
pub fn evaluate_si_snr(model: &TaylorModel, scenes: &[Scene]) -> Result<SiSnrSummary> {
    evaluate_si_snr_at(model, scenes, None)
}

/// [`evaluate_si_snr`] with the output truncated after `order` terms.
pub fn evaluate_si_snr_at(model: &TaylorModel, scenes: &[Scene], order: Option<usize>) -> Result<SiSnrSummary> {
    if scenes.is_empty() {
        return Err(Error::Empty(msg!("no scenes to evaluate")));
    }
    let (mut noisy, mut enhanced) = (0.0, 0.0);
    for s in scenes {
        let x = analyze(&s.mixture, &model.stft)?;
        let est = synthesize_mono(&model.enhance_with_order(&x, order)?.estimate, &model.stft)?;
        let reference = synthesize_mono(&x.channel(s.reference_index), &model.stft)?;
        let clean = resynthesize(&s.clean_ref(), &model.stft)?;
        let n = est.len().min(clean.len());
        noisy += si_snr(&clean[..n], &reference[..n])?;
        enhanced += si_snr(&clean[..n], &est[..n])?;
    }
    let n = scenes.len() as f64;
    Ok(SiSnrSummary { noisy_db: noisy / n, enhanced_db: enhanced / n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Optimizer and bookkeeping carried across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    pub schedule: PlateauHalving,
    pub epoch: usize,
    pub batches: usize,
    pub best_val_loss: f64,
    pub best_params: Option<ParamStore>,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(model: &TaylorModel) -> Self {
        Self {
            adam: AdamState::new(&model.store, model.config.learning_rate),
            schedule: PlateauHalving::new(model.config.patience),
            epoch: 0,
            batches: 0,
            best_val_loss: f64::INFINITY,
            best_params: None,
            log: Vec::new(),
        }
    }
}

/// One Adam step on the mean gradient of `batch`. Returns the mean loss.
pub fn train_batch(model: &mut TaylorModel, state: &mut TrainState, batch: &[TrainExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty(msg!("empty batch")));
    }
    let batch_id = state.batches;
    let poisoned = |e: Error| match e {
        Error::Poisoned(p) => Error::Poisoned(msg!("batch {batch_id}: {p}")),
        other => other,
    };
    let mut total = 0.0;
    let mut acc: Vec<Option<Tensor>> = vec![None; model.store.len()];
    for ex in batch {
        let (l, grads) = model.loss_and_gradients(&ex.mixture, &ex.clean).map_err(poisoned)?;
        if !l.is_finite() {
            return Err(Error::Poisoned(msg!("batch {batch_id}: non-finite loss")));
        }
        total += l;
        for (slot, g) in acc.iter_mut().zip(grads) {
            if let Some(g) = g {
                match slot {
                    Some(a) => a.add_assign(&g),
                    None => *slot = Some(g),
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let acc: Vec<Option<Tensor>> = acc.into_iter().map(|g| g.map(|g| g.map(|v| v * inv))).collect();
    state.adam.step(&mut model.store, &acc)?;
    state.batches += 1;
    Ok(total * inv)
}

/// Mean loss over `examples` without updating anything.
pub fn evaluate_loss(model: &TaylorModel, examples: &[TrainExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty(msg!("no validation examples")));
    }
    let mut total = 0.0;
    for ex in examples {
        total += model.loss_value(&ex.mixture, &ex.clean)?;
    }
    Ok(total / examples.len() as f64)
}

/// One epoch: seeded shuffle, optional random crops, Adam over batches, validation, learning
/// rate schedule and best-checkpoint tracking.
pub fn train_epoch(model: &mut TaylorModel, state: &mut TrainState, train: &[TrainExample], val: &[TrainExample]) -> Result<EpochLog> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty(msg!("training needs non-empty train and validation splits")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(state.epoch as u64 + 1)));
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut sum = 0.0;
    let mut count = 0;
    for chunk in order.chunks(model.config.batch_size) {
        let batch = chunk
            .iter()
            .map(|&i| match model.config.crop_frames {
                Some(len) if train[i].mixture.frames() > len => {
                    let start = rng.gen_range(0..=train[i].mixture.frames() - len);
                    train[i].crop(start, len)
                }
                _ => Ok(train[i].clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        sum += train_batch(model, state, &batch)? * batch.len() as f64;
        count += batch.len();
    }
    let val_loss = evaluate_loss(model, val)?;
    if !val_loss.is_finite() {
        return Err(Error::Poisoned(msg!("epoch {}: non-finite validation loss", state.epoch)));
    }
    if val_loss < state.best_val_loss {
        state.best_val_loss = val_loss;
        state.best_params = Some(model.store.clone());
    }
    let lr_used = state.adam.lr;
    state.schedule.observe(val_loss, &mut state.adam.lr);
    let log = EpochLog { epoch: state.epoch, train_loss: sum / count as f64, val_loss, lr: lr_used };
    state.log.push(log.clone());
    state.epoch += 1;
    Ok(log)
}

/// Runs `config.epochs` epochs, then restores the best validation checkpoint.
pub fn train(
    model: &mut TaylorModel,
    train_set: &[TrainExample],
    val_set: &[TrainExample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainState> {
    let mut state = TrainState::new(model);
    for _ in 0..model.config.epochs {
        let log = train_epoch(model, &mut state, train_set, val_set)?;
        on_epoch(&log);
    }
    if let Some(best) = &state.best_params {
        model.store = best.clone();
    }
    Ok(state)
}

/// End-to-end gradient check on a micro problem: 4-mic ring, 9 bins, 3 frames, random
/// spectra, and every parameter jittered off its initialization so zero-initialized layers
/// take part.
pub fn micro_grad_check(regime: Regime, order: usize, beams: usize, seed: u64) -> Result<GradCheckReport> {
    let geom = crate::array::circular_array(0.05, 4, false, 16000.0)?;
    let stft = StftConfig::new(16, 8, 16)?;
    let config = TaylorConfig { order, beams, regime, mixer_hidden: 5, module_hidden: 6, frames_context: 2, seed, ..TaylorConfig::default() };
    let mut model = TaylorModel::new(&geom, &stft, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v += 0.2 * rng.gen_range(-1.0..1.0);
        }
    }
    let (frames, bins, mics) = (3, stft.num_bins(), geom.num_mics());
    let mut draw = |n: usize| -> Vec<C64> { (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect() };
    let x = MultichannelSpectrogram::from_vec(frames, mics, draw(frames * bins * mics), stft.clone())?;
    let clean = Spectrogram::from_vec(frames, bins, draw(frames * bins))?;
    grad_check_with(&model.store, Difference::Ridders(MODEL_CHECK_STEP), None, |tape, store| {
        let f = model.forward_vars(tape, store, &x)?;
        model.loss_vars(tape, f.estimate, &clean)
    })
}
