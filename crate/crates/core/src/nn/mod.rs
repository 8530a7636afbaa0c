//! Minimal differentiable layer: dense/sparse matrix primitives, a recorded
//! tape for reverse-mode gradients, Adam, and a finite-difference checker.

mod params;
mod tape;
mod tensor;

use rand::seq::index;

pub use params::{Gradients, ParamId, ParamStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{Tape, Var};
pub use tensor::Tensor2;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Sinusoidal timestep encoding: entry `2j` is `sin(t·ω_j)` and `2j+1` is
/// `cos(t·ω_j)` with `ω_j = 10000^{-2j/dim}`.
pub fn time_encoding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("time encoding dim {dim} must be even")));
    }
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim / 2 {
        let freq = 10_000f64.powf(-((2 * j) as f64) / dim as f64);
        let angle = t as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so exact zeros compare as equal.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coordinates: usize,
    /// (parameter name, flat index, backprop value, finite-difference value)
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares backprop gradients of the scalar `f` with central finite
/// differences on up to `max_coords` randomly chosen coordinates (all of
/// them when there are fewer).
pub fn grad_check<F>(store: &ParamStore, f: F, max_coords: usize, rng: &mut StreamRng) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out, store)?;

    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.value(id).data().len()).map(move |k| (id, k)))
        .collect();
    let picked: Vec<usize> = if coords.len() <= max_coords {
        (0..coords.len()).collect()
    } else {
        let mut v = index::sample(rng, coords.len(), max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = f(&mut t, s)?;
        Ok(t.value(v).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coordinates: picked.len(),
        worst: None,
    };
    let mut probe = store.clone();
    for &p in &picked {
        let (id, k) = coords[p];
        let orig = store.value(id).data()[k];
        probe.value_mut(id).data_mut()[k] = orig + GRAD_CHECK_STEP;
        let plus = eval(&probe)?;
        probe.value_mut(id).data_mut()[k] = orig - GRAD_CHECK_STEP;
        let minus = eval(&probe)?;
        probe.value_mut(id).data_mut()[k] = orig;

        let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        let analytic = grads.get(id).data()[k];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = Some((store.name(id).to_owned(), k, analytic, numeric));
        }
    }
    Ok(report)
}
