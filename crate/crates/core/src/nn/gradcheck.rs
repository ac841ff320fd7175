use alloc::vec::Vec;

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: Option<ParamId>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Finite-difference reference of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Difference {
    /// `(f(θ+δ) − f(θ−δ)) / 2δ`.
    Central(f64),
    /// Ridders' extrapolation of central differences from this initial step. It shrinks the step
    /// geometrically and keeps the extrapolant with the smallest error estimate, so neither
    /// truncation nor rounding swamps tiny gradient entries of deep compositions.
    Ridders(f64),
}

/// [`grad_check_with`] using central differences of step `step`.
pub fn grad_check<F>(store: &ParamStore, step: f64, params: Option<&[ParamId]>, f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    grad_check_with(store, Difference::Central(step), params, f)
}

/// Compares reverse-mode gradients of the scalar built by `f` against the finite-difference
/// reference `diff`, coordinate by coordinate over `params` (all when `None`).
pub fn grad_check_with<F>(store: &ParamStore, diff: Difference, params: Option<&[ParamId]>, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let (Difference::Central(step) | Difference::Ridders(step)) = diff;
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?.for_params(store.len());
    drop(tape);

    let ids: Vec<ParamId> = params.map_or_else(|| store.ids().collect(), |p| p.to_vec());
    let mut work = store.clone();
    let mut eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        Ok(t.value(l).item())
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for id in ids {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[j] = orig + offset;
                eval(&work)
            };
            let numeric = match diff {
                Difference::Central(h) => (at(h)? - at(-h)?) / (2.0 * h),
                Difference::Ridders(h) => ridders(h, at)?,
            };
            work.get_mut(id).data_mut()[j] = orig;
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[j]);
            let err = relative_error(analytic, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst_param.is_none() {
                report = GradCheckReport {
                    max_relative_error: err.max(report.max_relative_error),
                    worst_param: Some(id),
                    worst_index: j,
                    analytic,
                    numeric,
                    coordinates: report.coordinates,
                };
            }
        }
    }
    Ok(report)
}

const RIDDERS_SHRINK: f64 = 1.4;
const RIDDERS_LEVELS: usize = 10;

/// Derivative at 0 of `g` by Ridders' method.
pub fn ridders(step: f64, mut g: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let shrink2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut central = |h: f64| -> Result<f64> { Ok((g(h)? - g(-h)?) / (2.0 * h)) };
    let mut h = step;
    let mut prev: Vec<f64> = alloc::vec![central(h)?];
    let (mut best, mut err) = (prev[0], f64::INFINITY);
    for _ in 1..RIDDERS_LEVELS {
        h /= RIDDERS_SHRINK;
        let mut row = alloc::vec![central(h)?];
        let mut fac = shrink2;
        for j in 1..=prev.len() {
            let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= shrink2;
            let e = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs());
            if e <= err {
                err = e;
                best = v;
            }
            row.push(v);
        }
        let (last, before) = (row[row.len() - 1], prev[prev.len() - 1]);
        prev = row;
        // higher orders have started to diverge
        if (last - before).abs() >= 2.0 * err {
            break;
        }
    }
    Ok(best)
}
