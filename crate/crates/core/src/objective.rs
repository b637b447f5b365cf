//! The training objective and mutual-information diagnostics.
//!
//! The objective is maximized:
//!
//! ```text
//! total = recon + α·class − ω·kl − (1 − ω)·λ·mmd
//! ```
//!
//! where `recon` is the reconstruction log-likelihood of the missing
//! modalities under `z_q`, `class` the label log-likelihood under `z_p`, `kl`
//! the per-datapoint `KL(q(z|x_O,x_M,y) ‖ p(z|x_O))`, and `mmd` the squared
//! MMD between marginal-posterior samples and prior samples. Every term is a
//! batch mean. At `ω = 1` the MMD weight vanishes and the objective is the
//! ELBO.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamVars, Tape, Tensor, Var};
use crate::data::{Batch, Dataset};
use crate::distributions::{bernoulli_log_prob, categorical_log_prob, gaussian_kl, gaussian_log_prob};
use crate::error::{Error, Result};
use crate::mmd::{mmd_sq, Estimator, KernelConfig};
use crate::model::{sample_latent, CmmdModel, DecoderParams, ForwardOutputs, InputVars};

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub omega: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub kernel: KernelConfig,
    pub estimator: Estimator,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            omega: 0.5,
            alpha: 10.0,
            lambda: 1000.0,
            kernel: KernelConfig::default(),
            estimator: Estimator::UStatistic,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::config(format!("omega {} outside [0, 1]", self.omega)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be positive, got {}", self.lambda)));
        }
        self.kernel.validate()
    }

    /// Weight of the MMD term, `(1 − ω)·λ`.
    pub fn mmd_weight(&self) -> f64 {
        (1.0 - self.omega) * self.lambda
    }
}

/// The ω grid `0, 0.1, …, 1`.
pub fn omega_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Batch-mean values of each term. Larger `total_objective` is better.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveBreakdown {
    pub recon_log_prob: f64,
    pub class_log_prob: f64,
    pub kl_term: f64,
    pub mmd_term: f64,
    pub total_objective: f64,
}

impl ObjectiveBreakdown {
    /// Recomputes the total from the terms in the order used on the tape.
    pub fn assemble(recon: f64, class: f64, kl: f64, mmd: f64, cfg: &ObjectiveConfig) -> f64 {
        let c = cfg.mmd_weight();
        recon + cfg.alpha * class - cfg.omega * kl - c * mmd
    }
}

/// Tape handles of every term.
#[derive(Clone, Copy, Debug)]
pub struct TermVars {
    pub recon: Var,
    pub class: Var,
    pub kl: Var,
    pub mmd: Var,
    pub total: Var,
}

impl TermVars {
    pub fn breakdown(&self, tape: &Tape) -> ObjectiveBreakdown {
        let v = |x: Var| tape.value(x).data()[0];
        ObjectiveBreakdown {
            recon_log_prob: v(self.recon),
            class_log_prob: v(self.class),
            kl_term: v(self.kl),
            mmd_term: v(self.mmd),
            total_objective: v(self.total),
        }
    }
}

pub struct LossGraph {
    pub terms: TermVars,
    pub outputs: ForwardOutputs,
    pub marginal_z: Var,
}

/// Uniform indices into a batch of `n` rows, one per row.
pub fn resample_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// One sample per row from the marginal posterior `q(z | x_O)`: row `i`
/// pairs its own `x_O` with the `(x_M, y)` of a uniformly drawn row `j` of
/// the same batch, and draws one reparameterized `z` from the encoder.
pub fn marginal_q_samples<R: Rng + ?Sized>(
    model: &CmmdModel,
    tape: &mut Tape,
    vars: &ParamVars,
    inputs: &InputVars,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let x_missing = inputs
        .x_missing
        .ok_or_else(|| Error::invalid("marginal_q_samples needs the missing modalities"))?;
    let n = tape.value(inputs.x_observed).rows();
    if n < 2 {
        return Err(Error::invalid(format!("marginal_q_samples needs at least 2 rows, got {n}")));
    }
    let idx = resample_indices(n, rng);
    let xm = tape.value(x_missing).select_rows(&idx);
    let xm = tape.constant(xm);
    let y = match inputs.labels {
        Some(y) => {
            let t = tape.value(y).select_rows(&idx);
            Some(tape.constant(t))
        }
        None => None,
    };
    let q = model.encode(tape, vars, inputs.x_observed, xm, y, train, rng)?;
    sample_latent(tape, &q, rng)
}

/// Records the objective for one batch on `tape`.
///
/// Randomness is consumed by the forward pass first, then by the
/// marginal-posterior resampling. Batches without labels contribute a zero
/// class term and feed zeros to the encoder's label block.
#[allow(clippy::too_many_arguments)]
pub fn build_cmmd_loss<R: Rng + ?Sized>(
    model: &CmmdModel,
    tape: &mut Tape,
    vars: &ParamVars,
    batch: &Batch,
    cfg: &ObjectiveConfig,
    train: bool,
    rng: &mut R,
) -> Result<LossGraph> {
    cfg.validate()?;
    if batch.rows() < 2 {
        return Err(Error::invalid(format!("the objective needs at least 2 rows, got {}", batch.rows())));
    }
    let inputs = model.input_vars(tape, batch, true)?;
    let out = model.forward_train(tape, vars, &inputs, train, rng)?;
    let marginal_z = marginal_q_samples(model, tape, vars, &inputs, train, rng)?;

    let mut per_row: Option<Var> = None;
    for (dec, x) in out.decoders.iter().zip(&inputs.missing_parts) {
        let lp = match dec {
            DecoderParams::Gaussian(g) => gaussian_log_prob(tape, g, *x)?,
            DecoderParams::Bernoulli(b) => bernoulli_log_prob(tape, b, *x)?,
        };
        per_row = Some(match per_row {
            Some(acc) => tape.add(acc, lp)?,
            None => lp,
        });
    }
    let recon = tape.mean(per_row.expect("at least one missing modality"))?;
    let class = match inputs.labels {
        Some(y) => {
            let lp = categorical_log_prob(tape, &out.class, y)?;
            tape.mean(lp)?
        }
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let (_, kl_rows) = gaussian_kl(tape, &out.q, &out.prior)?;
    let kl = tape.mean(kl_rows)?;
    let mmd = mmd_sq(tape, marginal_z, out.z_p, &cfg.kernel, cfg.estimator)?;

    let c = cfg.mmd_weight();
    let a_class = tape.scale(class, cfg.alpha)?;
    let t = tape.add(recon, a_class)?;
    let w_kl = tape.scale(kl, cfg.omega)?;
    let t = tape.sub(t, w_kl)?;
    let w_mmd = tape.scale(mmd, c)?;
    let total = tape.sub(t, w_mmd)?;

    let terms = TermVars {
        recon,
        class,
        kl,
        mmd,
        total,
    };
    let b = terms.breakdown(tape);
    if !b.total_objective.is_finite() {
        return Err(Error::NonFinite {
            what: "objective".into(),
            detail: format!("{b:?}"),
        });
    }
    Ok(LossGraph {
        terms,
        outputs: out,
        marginal_z,
    })
}

/// Evaluates the objective on one batch.
pub fn cmmd_loss<R: Rng + ?Sized>(
    model: &CmmdModel,
    batch: &Batch,
    cfg: &ObjectiveConfig,
    train: bool,
    rng: &mut R,
) -> Result<ObjectiveBreakdown> {
    let mut tape = Tape::new();
    let vars = tape.bind(&model.params);
    let g = build_cmmd_loss(model, &mut tape, &vars, batch, cfg, train, rng)?;
    Ok(g.terms.breakdown(&tape))
}

/// The ELBO: the objective at `ω = 1`, with the MMD reported but weighted by
/// zero.
pub fn elbo<R: Rng + ?Sized>(
    model: &CmmdModel,
    batch: &Batch,
    cfg: &ObjectiveConfig,
    train: bool,
    rng: &mut R,
) -> Result<ObjectiveBreakdown> {
    let cfg = ObjectiveConfig {
        omega: 1.0,
        ..cfg.clone()
    };
    cmmd_loss(model, batch, &cfg, train, rng)
}

/// Controls the mixture Monte Carlo of [`mi_decomposition`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiOptions {
    /// Mixture components per datapoint. When at least the dataset size, every
    /// row is used once; otherwise components are resampled with replacement.
    pub n_mc: usize,
    /// Latent draws per datapoint.
    pub draws: usize,
}

impl Default for MiOptions {
    fn default() -> Self {
        Self { n_mc: 256, draws: 16 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiReport {
    pub avg_kl: f64,
    pub marginal_kl: f64,
    pub mi_estimate: f64,
    /// Monte-Carlo standard error of `mi_estimate`.
    pub standard_error: f64,
    /// `avg_kl ≥ mi_estimate − 3·standard_error`.
    pub holds: bool,
}

/// Log-density of a diagonal Gaussian at `z`.
pub fn diag_gaussian_log_density(z: &[f64], mean: &[f64], log_var: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((x, m), l) in z.iter().zip(mean).zip(log_var) {
        s += -0.5 * ((2.0 * PI).ln() + l + (x - m) * (x - m) / l.exp());
    }
    s
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Evaluation-mode encoder and prior parameters as plain matrices.
struct Posteriors {
    q_mean: Tensor,
    q_log_var: Tensor,
}

fn encode_values(model: &CmmdModel, x_o: &Tensor, x_m: &Tensor, y: &Tensor) -> Result<Posteriors> {
    let mut tape = Tape::new();
    let vars = tape.bind(&model.params);
    let (xo, xm, yv) = (tape.constant(x_o.clone()), tape.constant(x_m.clone()), tape.constant(y.clone()));
    // Evaluation mode draws nothing from the generator.
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let q = model.encode(&mut tape, &vars, xo, xm, Some(yv), false, &mut unused)?;
    Ok(Posteriors {
        q_mean: q.mean_value(&tape).clone(),
        q_log_var: q.log_var_value(&tape).clone(),
    })
}

fn prior_values(model: &CmmdModel, x_o: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = tape.bind(&model.params);
    let xo = tape.constant(x_o.clone());
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let p = model.prior(&mut tape, &vars, xo, false, &mut unused)?;
    Ok((p.mean_value(&tape).clone(), p.log_var_value(&tape).clone()))
}

fn kl_scalar(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    let d = lq - lp;
    0.5 * (d.exp() + (mq - mp) * (mq - mp) / lp.exp() - 1.0 - d)
}

/// Splits the average term-by-term KL into the conditional mutual
/// information `I(x_M, y; z | x_O)` and the marginal KL
/// `E[KL(q(z|x_O) ‖ p(z|x_O))]`.
///
/// `q(z | x_O)` is the mixture of encoder outputs over `(x_M, y)` tuples
/// drawn from the dataset. For each datapoint the marginal KL is estimated
/// by sampling that mixture and averaging `log mix(z) − log p(z | x_O)`. The
/// standard error comes from the spread of the per-datapoint differences
/// `KL_n − marginal_n`. Runs in evaluation mode.
pub fn mi_decomposition<R: Rng + ?Sized>(model: &CmmdModel, dataset: &Dataset, opts: MiOptions, rng: &mut R) -> Result<MiReport> {
    let n = dataset.rows();
    if n == 0 {
        return Err(Error::invalid("mi_decomposition needs a nonempty dataset"));
    }
    if opts.n_mc == 0 || opts.draws == 0 {
        return Err(Error::invalid("mi_decomposition needs n_mc ≥ 1 and draws ≥ 1"));
    }
    dataset.manifest().check_partition(model.partition())?;
    let full = dataset.full_batch();
    let x_o = Tensor::concat_cols(&full.observed.iter().collect::<Vec<_>>())?;
    let x_m = Tensor::concat_cols(&full.missing.iter().collect::<Vec<_>>())?;
    let y = full
        .labels
        .clone()
        .unwrap_or_else(|| Tensor::zeros(&[n, model.arch.label_width()]));

    let own = encode_values(model, &x_o, &x_m, &y)?;
    let (p_mean, p_log_var) = prior_values(model, &x_o)?;
    let d = model.arch.latent_dim;

    let mut diffs = Vec::with_capacity(n);
    let (mut kl_sum, mut marg_sum) = (0.0, 0.0);
    for i in 0..n {
        let kl_i: f64 = (0..d)
            .map(|k| {
                kl_scalar(
                    own.q_mean.get2(i, k),
                    own.q_log_var.get2(i, k),
                    p_mean.get2(i, k),
                    p_log_var.get2(i, k),
                )
            })
            .sum();
        let comps: Vec<usize> = if opts.n_mc >= n {
            (0..n).collect()
        } else {
            (0..opts.n_mc).map(|_| rng.random_range(0..n)).collect()
        };
        let rep: Vec<usize> = vec![i; comps.len()];
        let mix = encode_values(model, &x_o.select_rows(&rep), &x_m.select_rows(&comps), &y.select_rows(&comps))?;
        let k = comps.len();
        let mut m_i = 0.0;
        let mut logs = vec![0.0; k];
        for _ in 0..opts.draws {
            let c = rng.random_range(0..k);
            let z: Vec<f64> = (0..d)
                .map(|j| {
                    let e: f64 = rng.sample(rand_distr::StandardNormal);
                    mix.q_mean.get2(c, j) + (0.5 * mix.q_log_var.get2(c, j)).exp() * e
                })
                .collect();
            for (c2, l) in logs.iter_mut().enumerate() {
                *l = diag_gaussian_log_density(&z, mix.q_mean.row(c2), mix.q_log_var.row(c2));
            }
            let log_mix = log_sum_exp(&logs) - (k as f64).ln();
            m_i += log_mix - diag_gaussian_log_density(&z, p_mean.row(i), p_log_var.row(i));
        }
        m_i /= opts.draws as f64;
        kl_sum += kl_i;
        marg_sum += m_i;
        diffs.push(kl_i - m_i);
    }
    let avg_kl = kl_sum / n as f64;
    let marginal_kl = marg_sum / n as f64;
    let mi_estimate = avg_kl - marginal_kl;
    let mean_d = diffs.iter().sum::<f64>() / n as f64;
    let var_d = if n > 1 {
        diffs.iter().map(|x| (x - mean_d).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let standard_error = (var_d / n as f64).sqrt();
    Ok(MiReport {
        avg_kl,
        marginal_kl,
        mi_estimate,
        standard_error,
        holds: avg_kl >= mi_estimate - 3.0 * standard_error,
    })
}

/// Checks that the average KL bounds the mutual information from above.
pub fn mi_upper_bound_check<R: Rng + ?Sized>(model: &CmmdModel, dataset: &Dataset, rng: &mut R) -> Result<MiReport> {
    mi_decomposition(model, dataset, MiOptions::default(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omega_grid_has_eleven_points() {
        let g = omega_grid();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[3], 0.3);
        assert_eq!(g[10], 1.0);
    }

    #[test]
    fn mmd_weight_vanishes_at_one() {
        let cfg = ObjectiveConfig {
            omega: 1.0,
            ..Default::default()
        };
        assert_eq!(cfg.mmd_weight(), 0.0);
    }

    #[test]
    fn invalid_omega_rejected() {
        let cfg = ObjectiveConfig {
            omega: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let v = [0.1, -2.0, 3.0];
        let direct = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - direct).abs() < 1e-12);
    }
}
