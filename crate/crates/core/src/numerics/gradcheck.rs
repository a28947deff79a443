use serde::Serialize;

use super::{Graph, ParamStore, ParamVars, Var};
use crate::error::Result;

/// Magnitudes below this are compared on an absolute rather than relative
/// scale, so that entries whose true gradient is ~0 do not divide by ~0.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failures == 0)
    }

    pub fn elements_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

/// Which elements of each parameter to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many evenly strided elements per parameter.
    Strided(usize),
}

/// Compares reverse-mode gradients of `f` against central differences with
/// the given `step`, element by element.
///
/// `f` must build a scalar on the supplied graph from the bound parameters;
/// it is re-run twice per probed element.
pub fn finite_difference_check<F>(
    f: F,
    params: &ParamStore<f64>,
    step: f64,
    tolerance: f64,
    coverage: Coverage,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamVars) -> Result<Var>,
{
    let evaluate = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let vars = g.bind_frozen(store);
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let vars = g.bind(params);
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut probe = params.clone();
    let mut checks = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let indices: Vec<usize> = match coverage {
            Coverage::All => (0..tensor.len()).collect(),
            Coverage::Strided(max) => {
                let stride = tensor.len().div_ceil(max.max(1)).max(1);
                (0..tensor.len()).step_by(stride).collect()
            }
        };
        let analytic = grads.get(name);
        let mut check = ParamCheck {
            name: name.to_string(),
            checked: indices.len(),
            failures: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in indices {
            let original = tensor.data()[i];
            probe.get_mut(name)?.data_mut()[i] = original + step;
            let plus = evaluate(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = original - step;
            let minus = evaluate(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.map_or(0.0, |t| t.data()[i]);
            let err = relative_error(a, numeric);
            if !(err <= tolerance) {
                check.failures += 1;
            }
            if err > check.max_rel_err || err.is_nan() {
                check.max_rel_err = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        checks.push(check);
    }
    Ok(GradCheckReport {
        step,
        tolerance,
        params: checks,
    })
}
