//! A latent dimension counts as collapsed at threshold `ε` when its
//! per-datapoint KL is below `ε` for at least a `1 − δ` fraction of the data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Tensor};
use crate::data::Dataset;
use crate::distributions::{gaussian_kl, GaussianParams};
use crate::error::{Error, Result};
use crate::model::CmmdModel;

/// Which two diagonal Gaussians are compared, per datapoint and dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Pairing {
    /// `KL(q(z | x_O, x_M, y) ‖ p(z | x_O))`.
    QVsPrior,
    /// `KL(p(z | x_O) ‖ N(0, I))`.
    PriorVsStd,
    /// `KL(q(z | x_O, x_M, y) ‖ N(0, I))`.
    QVsStd,
    /// `KL(p(z | x_O) ‖ q_M)`, where `q_M` is the encoder fed only `x_M`
    /// (observed and label blocks zeroed). The model has no standalone
    /// posterior over `x_M`, so this is a proxy.
    PriorOVsQM,
}

impl Pairing {
    pub const ALL: [Pairing; 4] = [Pairing::QVsPrior, Pairing::PriorVsStd, Pairing::QVsStd, Pairing::PriorOVsQM];

    pub fn name(self) -> &'static str {
        match self {
            Pairing::QVsPrior => "q_vs_prior",
            Pairing::PriorVsStd => "prior_vs_std",
            Pairing::QVsStd => "q_vs_std",
            Pairing::PriorOVsQM => "priorO_vs_qM",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Pairing::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown pairing `{s}`")))
    }
}

/// Sixty-one evenly spaced thresholds on `[0, 6]`.
pub fn default_epsilon_grid() -> Vec<f64> {
    (0..=60).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseConfig {
    pub delta: f64,
    pub epsilons: Vec<f64>,
    pub pairings: Vec<Pairing>,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self {
            delta: 0.01,
            epsilons: default_epsilon_grid(),
            pairings: Pairing::ALL.to_vec(),
        }
    }
}

impl CollapseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!("delta {} outside (0, 1)", self.delta)));
        }
        if self.epsilons.is_empty() || self.epsilons[0] < 0.0 || self.epsilons.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("epsilon grid must be nonnegative and strictly increasing"));
        }
        Ok(())
    }
}

/// Fraction of columns `i` with `#{n : m[n, i] < ε} ≥ (1 − δ)·N`.
pub fn collapse_fraction(matrix: &Tensor, epsilon: f64, delta: f64) -> f64 {
    let (n, d) = (matrix.rows(), matrix.cols());
    if n == 0 || d == 0 {
        return 0.0;
    }
    // Guards against (1 − δ)·N landing a rounding error above an integer.
    let need = (1.0 - delta) * n as f64 - 1e-9;
    let mut counts = vec![0usize; d];
    for r in 0..n {
        for (c, &v) in counts.iter_mut().zip(matrix.row(r)) {
            if v < epsilon {
                *c += 1;
            }
        }
    }
    counts.iter().filter(|&&c| c as f64 >= need).count() as f64 / d as f64
}

pub fn collapse_curve(matrix: &Tensor, epsilons: &[f64], delta: f64) -> Vec<f64> {
    epsilons.iter().map(|&e| collapse_fraction(matrix, e, delta)).collect()
}

/// The collapse count applied to raw decoder variances (`datapoints ×
/// features`).
pub fn variance_collapse(variances: &Tensor, epsilons: &[f64], delta: f64) -> Result<Vec<f64>> {
    if let Some(v) = variances.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain {
            op: "variance_collapse",
            value: *v,
        });
    }
    Ok(collapse_curve(variances, epsilons, delta))
}

fn eval_params(model: &CmmdModel, dataset: &Dataset, pairing: Pairing) -> Result<(Tape, GaussianParams, GaussianParams)> {
    dataset.manifest().check_partition(model.partition())?;
    let batch = dataset.full_batch();
    let n = batch.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let vars = tape.bind(&model.params);
    let needs_q = matches!(pairing, Pairing::QVsPrior | Pairing::QVsStd);
    if needs_q && batch.labels.is_none() {
        return Err(Error::invalid(format!("pairing {} needs labels", pairing.name())));
    }
    let inputs = model.input_vars(&mut tape, &batch, true)?;
    let x_m = inputs.x_missing.expect("targets requested");
    let d = model.arch.latent_dim;
    let (left, right) = match pairing {
        Pairing::QVsPrior => {
            let q = model.encode(&mut tape, &vars, inputs.x_observed, x_m, inputs.labels, false, &mut rng)?;
            let p = model.prior(&mut tape, &vars, inputs.x_observed, false, &mut rng)?;
            (q, p)
        }
        Pairing::QVsStd => {
            let q = model.encode(&mut tape, &vars, inputs.x_observed, x_m, inputs.labels, false, &mut rng)?;
            (q, GaussianParams::standard_normal(&mut tape, n, d))
        }
        Pairing::PriorVsStd => {
            let p = model.prior(&mut tape, &vars, inputs.x_observed, false, &mut rng)?;
            (p, GaussianParams::standard_normal(&mut tape, n, d))
        }
        Pairing::PriorOVsQM => {
            let p = model.prior(&mut tape, &vars, inputs.x_observed, false, &mut rng)?;
            let zeros_o = tape.constant(Tensor::zeros(&[n, model.partition().observed_width()]));
            let qm = model.encode(&mut tape, &vars, zeros_o, x_m, None, false, &mut rng)?;
            (p, qm)
        }
    };
    Ok((tape, left, right))
}

/// Per-datapoint, per-dimension KL for `pairing`, in evaluation mode.
pub fn per_dim_kl_matrix(model: &CmmdModel, dataset: &Dataset, pairing: Pairing) -> Result<Tensor> {
    let (mut tape, left, right) = eval_params(model, dataset, pairing)?;
    let (per_dim, _) = gaussian_kl(&mut tape, &left, &right)?;
    Ok(tape.value(per_dim).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseReport {
    /// `(pairing, ε, collapsed fraction)` rows in pairing-then-ε order.
    pub rows: Vec<(Pairing, f64, f64)>,
}

impl CollapseReport {
    pub fn fraction(&self, pairing: Pairing, epsilon: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|(p, e, _)| *p == pairing && *e == epsilon)
            .map(|r| r.2)
    }
}

pub fn collapse_report(model: &CmmdModel, dataset: &Dataset, cfg: &CollapseConfig) -> Result<CollapseReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &p in &cfg.pairings {
        let m = per_dim_kl_matrix(model, dataset, p)?;
        for (&e, f) in cfg.epsilons.iter().zip(collapse_curve(&m, &cfg.epsilons, cfg.delta)) {
            rows.push((p, e, f));
        }
    }
    Ok(CollapseReport { rows })
}
