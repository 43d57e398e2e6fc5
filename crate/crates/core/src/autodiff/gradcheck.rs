//! Central-difference gradient verification.
//!
//! The numeric side always runs in `f64`: `(f(θ+εe) − f(θ−εe)) / 2ε` per
//! sampled coordinate, compared against an analytic gradient with the
//! relative error `|a − n| / max(|a|, |n|, floor)`. The floor keeps
//! gradients that are zero by construction from turning rounding noise into
//! unit relative error; it defaults to `1e-8` for `f64` tapes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Eager, Graph, Tape};
use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::params::{GradStore, ParamStore};
use crate::scalar::Scalar;

pub const F64_FLOOR: f64 = 1e-8;
/// Single-precision backward passes leave absolute noise up to about `1e-6`
/// after long reductions; coordinates below this floor are compared on an
/// absolute scale instead.
pub const F32_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckCfg {
    pub eps: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are
    /// checked exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckCfg {
    fn default() -> Self {
        GradCheckCfg {
            eps: 1e-3,
            samples_per_tensor: 64,
            seed: 0,
            floor: F64_FLOOR,
        }
    }
}

/// The coordinate with the largest disagreement.
#[derive(Debug, Clone, PartialEq)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub worst: Option<WorstCoordinate>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f` around `params`.
/// `f` must be deterministic; two evaluations at `params` that differ are a
/// contract error.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &ParamStore<f64>,
    analytic: &GradStore<f64>,
    cfg: &GradCheckCfg,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    if cfg.eps <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference eps {} must be positive",
            cfg.eps
        )));
    }
    if analytic.len() != params.len() {
        return Err(Error::Contract(format!(
            "analytic gradient has {} tensors, parameters {}",
            analytic.len(),
            params.len()
        )));
    }
    let (a, b) = (f(params)?, f(params)?);
    if a.to_bits() != b.to_bits() {
        return Err(Error::Contract(format!(
            "forward closure is not deterministic: {a} then {b}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    for id in params.ids() {
        let entry = params.entry(id);
        if !entry.trainable {
            continue;
        }
        let len = entry.value.len();
        let coords: Vec<usize> = if len <= cfg.samples_per_tensor {
            (0..len).collect()
        } else {
            let mut v = rand::seq::index::sample(&mut rng, len, cfg.samples_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        for i in coords {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + cfg.eps;
            let plus = f(&work)?;
            work.get_mut(id).data_mut()[i] = orig - cfg.eps;
            let minus = f(&work)?;
            work.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let an = analytic.get(id).data()[i];
            let rel = relative_error(an, numeric, cfg.floor);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(WorstCoordinate {
                    param: entry.name.clone(),
                    index: i,
                    analytic: an,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Precision of the analytic (tape) side of a check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// A scalar-valued function of a parameter store, written once against
/// [`Graph`] so it can run at either precision. Inputs that need gradients
/// are stored as trainable entries.
pub trait Probe {
    fn params(&self) -> &ParamStore<f32>;

    fn mode(&self) -> Mode {
        Mode::Train
    }

    fn loss<T: Scalar, G: Graph<T>>(&self, g: &mut G) -> Result<G::Var>;
}

fn analytic_at<T: Scalar, P: Probe>(probe: &P, seed: u64) -> Result<GradStore<f64>> {
    let store: ParamStore<T> = probe.params().cast();
    let mut tape = Tape::new(&store, probe.mode(), seed);
    let loss = probe.loss(&mut tape)?;
    let mut grads = GradStore::zeros_like(&store);
    tape.backward(loss, &mut grads)?;
    Ok(grads.cast())
}

/// Tape gradient of `probe` at `precision` versus `f64` central differences.
pub fn check_probe<P: Probe>(
    probe: &P,
    precision: Precision,
    cfg: &GradCheckCfg,
) -> Result<GradCheckReport> {
    let analytic = match precision {
        Precision::F32 => analytic_at::<f32, P>(probe, cfg.seed)?,
        Precision::F64 => analytic_at::<f64, P>(probe, cfg.seed)?,
    };
    let reference: ParamStore<f64> = probe.params().cast();
    let f = |s: &ParamStore<f64>| -> Result<f64> {
        let mut e = Eager::new(s, probe.mode(), cfg.seed);
        let l = probe.loss(&mut e)?;
        Ok(e.value(&l).data()[0])
    };
    finite_diff_check(f, &reference, &analytic, cfg)
}
