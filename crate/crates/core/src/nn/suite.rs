//! Registered gradient checks for every tape operation, shared by the command line and the
//! acceptance gate.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gradcheck::grad_check;
use super::layer::{Activation, Mlp};
use super::param::{ParamId, ParamStore};
use super::tape::{GroupMap, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Central-difference step of the single-operation checks.
pub const CHECK_STEP: f64 = 1e-5;
/// Initial step of the extrapolated reference used for composed models.
pub const MODEL_CHECK_STEP: f64 = 1e-3;
/// Bound for a single operation checked in isolation.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Bound for composed models.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

type OpFn = fn(&mut Tape, &[Var]) -> Var;

struct OpCase {
    name: &'static str,
    shapes: &'static [(usize, usize)],
    positive: bool,
    op: OpFn,
}

const fn case(name: &'static str, shapes: &'static [(usize, usize)], positive: bool, op: OpFn) -> OpCase {
    OpCase { name, shapes, positive, op }
}

fn fixed_weights(t: &mut Tape, v: &[Var]) -> Var {
    let c = Tensor::from_vec(2, 3, vec![1.0, 0.0, -2.0, 0.5, 3.0, 1.0]).expect("constant shape");
    t.mul_const(v[0], c)
}

const CASES: &[OpCase] = &[
    case("matmul", &[(3, 4), (4, 5)], false, |t, v| t.matmul(v[0], v[1])),
    case("matmul_narrow", &[(6, 3), (3, 2)], false, |t, v| t.matmul(v[0], v[1])),
    case("matmul_t", &[(3, 4), (5, 4)], false, |t, v| t.matmul_t(v[0], v[1])),
    case("add_bias", &[(4, 3), (1, 3)], false, |t, v| t.add_bias(v[0], v[1])),
    case("add", &[(3, 3), (3, 3)], false, |t, v| t.add(v[0], v[1])),
    case("sub", &[(3, 3), (3, 3)], false, |t, v| t.sub(v[0], v[1])),
    case("mul", &[(3, 2), (3, 2)], false, |t, v| t.mul(v[0], v[1])),
    case("scale", &[(2, 5)], false, |t, v| t.scale(v[0], -2.5)),
    case("add_scalar", &[(2, 5)], false, |t, v| t.add_scalar(v[0], 0.75)),
    case("tanh", &[(4, 4)], false, |t, v| t.tanh(v[0])),
    case("sigmoid", &[(4, 4)], false, |t, v| t.sigmoid(v[0])),
    case("powf(0.5)", &[(3, 3)], true, |t, v| t.powf(v[0], 0.5)),
    case("powf(-0.5)", &[(3, 3)], true, |t, v| t.powf(v[0], -0.5)),
    case("powf(-1)", &[(3, 3)], true, |t, v| t.powf(v[0], -1.0)),
    case("square", &[(3, 3)], false, |t, v| t.square(v[0])),
    case("mul_col", &[(4, 3), (4, 1)], false, |t, v| t.mul_col(v[0], v[1])),
    case("mul_const", &[(2, 3)], false, fixed_weights),
    case("sum", &[(3, 4)], false, |t, v| {
        let s = t.sum(v[0]);
        t.square(s)
    }),
    case("mean", &[(3, 4)], false, |t, v| {
        let s = t.mean(v[0]);
        t.tanh(s)
    }),
    case("row_sum", &[(5, 3)], false, |t, v| t.row_sum(v[0])),
    case("row_mean", &[(5, 3)], false, |t, v| t.row_mean(v[0])),
    case("concat_cols", &[(3, 2), (3, 1)], false, |t, v| t.concat_cols(&[v[0], v[1], v[0]])),
    case("slice_cols", &[(3, 6)], false, |t, v| t.slice_cols(v[0], 1, 4)),
    case("reshape", &[(4, 3)], false, |t, v| {
        let r = t.reshape(v[0], 2, 6);
        t.square(r)
    }),
    case("repeat_rows", &[(3, 2)], false, |t, v| t.repeat_rows(v[0], 3)),
    case("grouped_matmul(modulo)", &[(6, 3), (6, 2)], false, |t, v| t.grouped_matmul(v[0], v[1], GroupMap::Modulo(2), 3, false)),
    case("grouped_matmul(div, transposed)", &[(6, 2), (9, 2)], false, |t, v| {
        t.grouped_matmul(v[0], v[1], GroupMap::Div(2), 3, true)
    }),
    case("frame_shift", &[(8, 2)], false, |t, v| t.frame_shift(v[0], 2, 1)),
    case("causal_ema", &[(8, 3)], false, |t, v| t.causal_ema(v[0], 2, 0.7)),
];

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).expect("tensor shape")
}

fn run_case(c: &OpCase, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = if c.positive { (0.3, 2.0) } else { (-1.5, 1.5) };
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = c
        .shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, cols))| store.add(alloc::format!("p{i}"), random_tensor(&mut rng, r, cols, lo, hi)))
        .collect();
    // random output weights give every output entry its own sensitivity
    let mut weights: Option<Tensor> = None;
    let report = grad_check(&store, CHECK_STEP, None, |tape, s| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
        let out = (c.op)(tape, &vars);
        let (r, cols) = tape.value(out).shape();
        let w = weights.get_or_insert_with(|| random_tensor(&mut rng, r, cols, -1.0, 1.0)).clone();
        let weighted = tape.mul_const(out, w);
        Ok(tape.sum(weighted))
    })?;
    Ok(report.max_relative_error)
}

/// Every tape operation in isolation, worst case over `seeds` random draws, plus a two-layer
/// tanh network.
pub fn op_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::with_capacity(CASES.len() + 1);
    for c in CASES {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds.max(1) {
            worst = worst.max(run_case(c, seed)?);
        }
        out.push(CheckResult { name: c.name, max_relative_error: worst, tolerance: OP_TOLERANCE });
    }
    out.push(CheckResult { name: "tanh network", max_relative_error: tanh_network(1234)?, tolerance: OP_TOLERANCE });
    Ok(out)
}

/// Two tanh layers on a squared-error objective.
pub fn tanh_network(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = Mlp::new(&mut store, "net", &[4, 6, 3], Activation::Tanh, Activation::Tanh, &mut rng);
    let x = random_tensor(&mut rng, 5, 4, -1.0, 1.0);
    let target = random_tensor(&mut rng, 5, 3, -0.5, 0.5);
    let report = grad_check(&store, CHECK_STEP, None, |tape, s| {
        let xi = tape.input(x.clone());
        let out = net.forward(tape, s, xi);
        let t = tape.input(target.clone());
        let d = tape.sub(out, t);
        let d = tape.square(d);
        Ok(tape.mean(d))
    })?;
    Ok(report.max_relative_error)
}
