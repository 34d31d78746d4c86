//! Central finite-difference checking of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NamedTensor;
use crate::error::{Error, Result};

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_ERR_FLOOR)`
/// so that vanishing gradients are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many elements per parameter (never fewer than 64).
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, tolerance: 1e-4, max_elements: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of `build` against central differences on every
/// parameter in `params`.
///
/// `build` receives a fresh tape and one `Var` per parameter (in order) and must
/// return a scalar loss. On failure the error carries the worst element found.
pub fn finite_difference_check<F>(
    build: F,
    params: &[NamedTensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.tensor.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values: Vec<Tensor<f64>> = params.iter().map(|p| p.tensor.clone()).collect();
    let mut report = GradCheckReport::default();

    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]);
        let n = param.tensor.len();
        let elements: Vec<usize> = match opts.max_elements {
            Some(limit) if n > limit.max(64) => {
                let mut picked = index::sample(&mut rng, n, limit.max(64)).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };

        let mut check = ParamCheck {
            name: param.name.clone(),
            checked: elements.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &e in &elements {
            let orig = values[pi].data()[e];
            values[pi].data_mut()[e] = orig + opts.step;
            let plus = eval(&values)?;
            values[pi].data_mut()[e] = orig - opts.step;
            let minus = eval(&values)?;
            values[pi].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[e];
            let rel = relative_error(a, numeric);
            if rel > check.max_rel_err || e == elements[0] {
                check.max_rel_err = rel;
                check.worst_index = e;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }

    if let Some(worst) = report.worst() {
        if worst.max_rel_err > opts.tolerance {
            return Err(Error::GradCheck {
                param: worst.name.clone(),
                index: worst.worst_index,
                analytic: worst.analytic,
                numeric: worst.numeric,
                rel_err: worst.max_rel_err,
            });
        }
    }
    Ok(report)
}
