use std::collections::BTreeMap;

use super::params::ParameterStore;
use super::tape::{ParamVars, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn scalar_value(tape: &Tape, v: Var) -> Result<f64> {
    let x = tape.value(v).item()?;
    if !x.is_finite() {
        return Err(Error::NonFinite {
            what: "function value".into(),
            detail: x.to_string(),
        });
    }
    Ok(x)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the worst relative error
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("grad_check: step must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    scalar_value(&tape, y)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(p, true);
        let y = f(&mut t, x)?;
        scalar_value(&t, y)
    };
    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Worst finite-difference mismatch per parameter path.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub per_path: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_path.values().copied().fold(0.0, f64::max)
    }

    /// Worst error per parameter group, where the group is the path up to its
    /// layer index (e.g. `decoder.x2`).
    pub fn per_group(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (path, e) in &self.per_path {
            let parts: Vec<&str> = path.split('.').collect();
            let cut = parts
                .iter()
                .position(|p| p.parse::<usize>().is_ok())
                .unwrap_or(parts.len());
            let group = parts[..cut.max(1)].join(".");
            let slot = out.entry(group).or_insert(0.0f64);
            *slot = slot.max(*e);
        }
        out
    }
}

/// Finite-difference check of every parameter in `store` for a scalar
/// function built on a fresh tape. `f` must be deterministic (reseed any RNG
/// inside it).
pub fn grad_check_params<F>(f: F, store: &ParameterStore, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    grad_check_params_with(f, store, h, |_| {})
}

/// As [`grad_check_params`], with a hook to configure the analytic tape.
pub fn grad_check_params_with<F, S>(f: F, store: &ParameterStore, h: f64, setup: S) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
    S: Fn(&mut Tape),
{
    if !(h > 0.0) {
        return Err(Error::invalid("grad_check: step must be positive"));
    }
    let mut tape = Tape::new();
    setup(&mut tape);
    let vars = tape.bind(store);
    let y = f(&mut tape, &vars)?;
    scalar_value(&tape, y)?;
    let analytic = tape.backward(y)?.into_by_path();

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.bind(s);
        let y = f(&mut t, &v)?;
        scalar_value(&t, y)
    };
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (path, value) in store.iter() {
        let mut worst = 0.0f64;
        for i in 0..value.numel() {
            let orig = value.data()[i];
            work.get_mut(path)?.data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(path)?.data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(path)?.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic[path].data()[i], numeric));
        }
        report.per_path.insert(path.clone(), worst);
    }
    Ok(report)
}
