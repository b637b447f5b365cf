//! Diagonal Gaussian, Bernoulli and categorical primitives on the tape.
//!
//! Every function records its computation on the supplied [`Tape`], so the
//! results are differentiable with respect to the distribution parameters.

use std::f64::consts::PI;

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lower clamp for log-variance heads.
pub const LOG_VAR_MIN: f64 = -7.0;
/// Upper clamp for log-variance heads.
pub const LOG_VAR_MAX: f64 = 7.0;
/// Probabilities of Bernoulli likelihoods are clamped to `[PROB_EPS, 1 − PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

/// Diagonal Gaussian with per-row mean and log-variance (`batch × dim`).
#[derive(Clone, Copy, Debug)]
pub struct GaussianParams {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianParams {
    /// Builds parameters from raw network heads, clamping the log-variance.
    pub fn from_heads(tape: &mut Tape, mean: Var, raw_log_var: Var) -> Result<Self> {
        check_same("gaussian", tape, mean, raw_log_var)?;
        let log_var = tape.clamp(raw_log_var, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(Self { mean, log_var })
    }

    /// `N(0, I)` for `rows × dim`, recorded as constants.
    pub fn standard_normal(tape: &mut Tape, rows: usize, dim: usize) -> Self {
        let mean = tape.constant(Tensor::zeros(&[rows, dim]));
        let log_var = tape.constant(Tensor::zeros(&[rows, dim]));
        Self { mean, log_var }
    }

    pub fn mean_value<'a>(&self, tape: &'a Tape) -> &'a Tensor {
        tape.value(self.mean)
    }

    pub fn log_var_value<'a>(&self, tape: &'a Tape) -> &'a Tensor {
        tape.value(self.log_var)
    }

    /// Element-wise variances `exp(log_var)`.
    pub fn variance(&self, tape: &Tape) -> Tensor {
        tape.value(self.log_var).map(f64::exp)
    }
}

/// Independent Bernoulli variables parameterized by logits.
#[derive(Clone, Copy, Debug)]
pub struct BernoulliParams {
    pub logits: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CategoricalMode {
    /// One of `K` classes; targets are one-hot rows.
    Softmax,
    /// `K` independent labels; targets are multi-hot rows.
    MultiSigmoid,
    /// A single binary label; logits and targets have one column.
    Sigmoid,
}

impl CategoricalMode {
    pub fn name(self) -> &'static str {
        match self {
            CategoricalMode::Softmax => "softmax",
            CategoricalMode::MultiSigmoid => "multi_sigmoid",
            CategoricalMode::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(CategoricalMode::Softmax),
            "multi_sigmoid" => Ok(CategoricalMode::MultiSigmoid),
            "sigmoid" => Ok(CategoricalMode::Sigmoid),
            other => Err(Error::config(format!("unknown label mode `{other}`"))),
        }
    }

    /// Width of the logit/target rows for `classes` classes.
    pub fn output_width(self, classes: usize) -> usize {
        match self {
            CategoricalMode::Sigmoid => 1,
            _ => classes,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CategoricalParams {
    pub logits: Var,
    pub mode: CategoricalMode,
}

impl CategoricalParams {
    /// Class probabilities: softmax rows, or per-column sigmoids.
    pub fn probabilities(&self, tape: &Tape) -> Tensor {
        let logits = tape.value(self.logits);
        match self.mode {
            CategoricalMode::Softmax => softmax_rows(logits),
            _ => logits.map(crate::autograd::tape::stable_sigmoid),
        }
    }
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let k = logits.cols();
    for row in out.data_mut().chunks_mut(k.max(1)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn check_same(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::Shape {
            op,
            left: sa.to_vec(),
            right: sb.to_vec(),
        });
    }
    Ok(())
}

/// `mean + exp(log_var / 2) ⊙ noise`, with `noise` drawn by the caller from a
/// standard normal.
pub fn reparam_sample(tape: &mut Tape, params: &GaussianParams, noise: Var) -> Result<Var> {
    check_same("reparam_sample", tape, params.mean, noise)?;
    let half = tape.scale(params.log_var, 0.5)?;
    let std = tape.exp(half)?;
    let scaled = tape.mul(std, noise)?;
    tape.add(params.mean, scaled)
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
///
/// Returns the per-dimension matrix and its row sums. The per-dimension value
/// is `½(exp(lq − lp) + (μq − μp)² / exp(lp) − 1 − (lq − lp))`, which is exactly
/// zero when `q` and `p` coincide.
pub fn gaussian_kl(tape: &mut Tape, q: &GaussianParams, p: &GaussianParams) -> Result<(Var, Var)> {
    check_same("gaussian_kl", tape, q.mean, p.mean)?;
    check_same("gaussian_kl", tape, q.log_var, p.log_var)?;
    check_same("gaussian_kl", tape, q.mean, q.log_var)?;
    let d = tape.sub(q.log_var, p.log_var)?;
    let ratio = tape.exp(d)?;
    let diff = tape.sub(q.mean, p.mean)?;
    let sq = tape.square(diff)?;
    let var_p = tape.exp(p.log_var)?;
    let maha = tape.div(sq, var_p)?;
    let s = tape.add(ratio, maha)?;
    let s = tape.offset(s, -1.0)?;
    let s = tape.sub(s, d)?;
    let per_dim = tape.scale(s, 0.5)?;
    let total = tape.sum_last_axis(per_dim)?;
    Ok((per_dim, total))
}

/// Per-row Gaussian log-density, summed over dimensions.
pub fn gaussian_log_prob(tape: &mut Tape, params: &GaussianParams, x: Var) -> Result<Var> {
    check_same("gaussian_log_prob", tape, params.mean, x)?;
    let diff = tape.sub(x, params.mean)?;
    let sq = tape.square(diff)?;
    let var = tape.exp(params.log_var)?;
    let maha = tape.div(sq, var)?;
    let s = tape.add(params.log_var, maha)?;
    let s = tape.offset(s, (2.0 * PI).ln())?;
    let s = tape.scale(s, -0.5)?;
    tape.sum_last_axis(s)
}

/// Per-row Bernoulli log-likelihood of targets in `[0, 1]`, with clamped
/// probabilities.
pub fn bernoulli_log_prob(tape: &mut Tape, params: &BernoulliParams, x: Var) -> Result<Var> {
    check_same("bernoulli_log_prob", tape, params.logits, x)?;
    let p = tape.sigmoid(params.logits)?;
    let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = tape.log(p)?;
    let one_minus_p = tape.neg(p)?;
    let one_minus_p = tape.offset(one_minus_p, 1.0)?;
    let log_q = tape.log(one_minus_p)?;
    let one_minus_x = tape.neg(x)?;
    let one_minus_x = tape.offset(one_minus_x, 1.0)?;
    let a = tape.mul(x, log_p)?;
    let b = tape.mul(one_minus_x, log_q)?;
    let s = tape.add(a, b)?;
    tape.sum_last_axis(s)
}

/// Per-row log-likelihood of one-hot (softmax) or multi-hot/binary (sigmoid)
/// targets.
pub fn categorical_log_prob(tape: &mut Tape, params: &CategoricalParams, y: Var) -> Result<Var> {
    check_same("categorical_log_prob", tape, params.logits, y)?;
    match params.mode {
        CategoricalMode::Softmax => {
            let t = tape.value(y);
            for r in 0..t.rows() {
                let row = t.row(r);
                let ones = row.iter().filter(|&&v| v == 1.0).count();
                let zeros = row.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || ones + zeros != row.len() {
                    return Err(Error::invalid(format!(
                        "categorical_log_prob: row {r} is not one-hot"
                    )));
                }
            }
            let ls = tape.log_softmax(params.logits)?;
            let picked = tape.mul(ls, y)?;
            tape.sum_last_axis(picked)
        }
        CategoricalMode::MultiSigmoid | CategoricalMode::Sigmoid => {
            bernoulli_log_prob(tape, &BernoulliParams { logits: params.logits }, y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.leaf(Tensor::from_rows(rows).unwrap(), true)
    }

    #[test]
    fn standard_normal_log_prob_at_zero() {
        let mut t = Tape::new();
        let p = GaussianParams::standard_normal(&mut t, 1, 1);
        let x = t.constant(Tensor::zeros(&[1, 1]));
        let lp = gaussian_log_prob(&mut t, &p, x).unwrap();
        assert!((t.value(lp).data()[0] + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_is_exactly_zero() {
        let mut t = Tape::new();
        let m = leaf(&mut t, &[vec![0.3, -2.0], vec![1e3, 0.0]]);
        let l = leaf(&mut t, &[vec![-6.9, 0.4], vec![2.0, 7.0]]);
        let q = GaussianParams { mean: m, log_var: l };
        let (per_dim, total) = gaussian_kl(&mut t, &q, &q).unwrap();
        assert!(t.value(per_dim).data().iter().all(|&v| v == 0.0));
        assert!(t.value(total).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kl_unit_shift_is_half() {
        let mut t = Tape::new();
        let q = GaussianParams {
            mean: t.constant(Tensor::full(&[1, 3], 1.0)),
            log_var: t.constant(Tensor::zeros(&[1, 3])),
        };
        let p = GaussianParams::standard_normal(&mut t, 1, 3);
        let (per_dim, total) = gaussian_kl(&mut t, &q, &p).unwrap();
        assert_eq!(t.value(per_dim).data(), &[0.5, 0.5, 0.5]);
        assert_eq!(t.value(total).data(), &[1.5]);
    }

    #[test]
    fn reparam_with_zero_noise_returns_mean() {
        let mut t = Tape::new();
        let m = leaf(&mut t, &[vec![0.25, -1.5]]);
        let l = leaf(&mut t, &[vec![3.0, -3.0]]);
        let noise = t.constant(Tensor::zeros(&[1, 2]));
        let z = reparam_sample(&mut t, &GaussianParams { mean: m, log_var: l }, noise).unwrap();
        assert_eq!(t.value(z), t.value(m));
    }

    #[test]
    fn reparam_unit_noise_adds_one() {
        let mut t = Tape::new();
        let m = leaf(&mut t, &[vec![0.25, -1.5]]);
        let l = t.constant(Tensor::zeros(&[1, 2]));
        let noise = t.constant(Tensor::full(&[1, 2], 1.0));
        let z = reparam_sample(&mut t, &GaussianParams { mean: m, log_var: l }, noise).unwrap();
        assert_eq!(t.value(z).data(), &[1.25, -0.5]);
    }

    #[test]
    fn log_var_heads_are_clamped() {
        let mut t = Tape::new();
        let m = t.constant(Tensor::zeros(&[1, 3]));
        let raw = t.constant(Tensor::from_rows(&[vec![-20.0, 0.5, 20.0]]).unwrap());
        let g = GaussianParams::from_heads(&mut t, m, raw).unwrap();
        assert_eq!(t.value(g.log_var).data(), &[-7.0, 0.5, 7.0]);
    }

    #[test]
    fn bernoulli_half_probability() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(&[1, 4]));
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 1.0]]).unwrap());
        let lp = bernoulli_log_prob(&mut t, &BernoulliParams { logits }, x).unwrap();
        assert!((t.value(lp).data()[0] - 4.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_saturated_logit_hits_clamp() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::full(&[1, 1], 1e4));
        let x = t.constant(Tensor::full(&[1, 1], 1.0));
        let lp = bernoulli_log_prob(&mut t, &BernoulliParams { logits }, x).unwrap();
        assert!((t.value(lp).data()[0] - (1.0 - PROB_EPS).ln()).abs() < 1e-15);
    }

    #[test]
    fn categorical_uniform_and_sharp() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(&[1, 5]));
        let y = t.constant(Tensor::from_rows(&[vec![0.0, 0.0, 1.0, 0.0, 0.0]]).unwrap());
        let cp = CategoricalParams { logits, mode: CategoricalMode::Softmax };
        let lp = categorical_log_prob(&mut t, &cp, y).unwrap();
        assert!((t.value(lp).data()[0] - (0.2f64).ln()).abs() < 1e-12);

        let logits = t.constant(Tensor::from_rows(&[vec![10.0, -10.0]]).unwrap());
        let y = t.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let cp = CategoricalParams { logits, mode: CategoricalMode::Softmax };
        let lp = categorical_log_prob(&mut t, &cp, y).unwrap();
        let expected = -(-20.0f64).exp().ln_1p();
        assert!((t.value(lp).data()[0] - expected).abs() < 1e-6 * expected.abs());
    }

    #[test]
    fn softmax_rejects_non_one_hot() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(&[1, 3]));
        let y = t.constant(Tensor::from_rows(&[vec![1.0, 1.0, 0.0]]).unwrap());
        let cp = CategoricalParams { logits, mode: CategoricalMode::Softmax };
        assert!(categorical_log_prob(&mut t, &cp, y).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let p = GaussianParams::standard_normal(&mut t, 2, 3);
        let x = t.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(gaussian_log_prob(&mut t, &p, x), Err(Error::Shape { .. })));
    }
}
