//! Gaussian-kernel maximum mean discrepancy.

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// How the kernel bandwidth σ² is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// σ² equals the sample dimension.
    LatentDim,
    /// σ² is half the median pairwise squared distance of the pooled samples,
    /// treated as a constant for differentiation.
    MedianHeuristic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
    /// Multipliers applied to σ²; the kernel averages over them.
    pub scales: Vec<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::LatentDim,
            scales: vec![1.0],
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::config("kernel needs at least one scale"));
        }
        if self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config(format!("kernel scales must be positive: {:?}", self.scales)));
        }
        if let Bandwidth::Fixed(s2) = self.bandwidth {
            if !(s2 > 0.0 && s2.is_finite()) {
                return Err(Error::config(format!("fixed bandwidth must be positive, got {s2}")));
            }
        }
        Ok(())
    }

    /// Concrete σ² for samples of dimension `dim`. The median heuristic looks
    /// at the pooled rows of `a` and `b`.
    pub fn resolve(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        self.validate()?;
        let s2 = match self.bandwidth {
            Bandwidth::Fixed(s2) => s2,
            Bandwidth::LatentDim => a.cols() as f64,
            Bandwidth::MedianHeuristic => median_heuristic(a, b),
        };
        if !(s2 > 0.0 && s2.is_finite()) {
            return Err(Error::invalid(format!("kernel bandwidth resolved to {s2}")));
        }
        Ok(s2)
    }
}

fn median_heuristic(a: &Tensor, b: &Tensor) -> f64 {
    let pooled = Tensor::concat_rows(&[a, b]).expect("equal widths checked by caller");
    let n = pooled.rows();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(pooled.row(i), pooled.row(j)));
        }
    }
    if d.is_empty() {
        return f64::NAN;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 1 { d[mid] } else { 0.5 * (d[mid - 1] + d[mid]) };
    med / 2.0
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// `mean over scales of exp(−‖a − b‖² / (2σ²·scale))`.
pub fn gaussian_kernel(a: &[f64], b: &[f64], sigma2: f64, scales: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "gaussian_kernel",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    if !(sigma2 > 0.0) || scales.is_empty() || scales.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("gaussian_kernel: bandwidth and scales must be positive"));
    }
    let d = sq_dist(a, b);
    let s: f64 = scales.iter().map(|s| (-d / (2.0 * sigma2 * s)).exp()).sum();
    Ok(s / scales.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    /// Unbiased: within-set averages skip the diagonal.
    UStatistic,
    /// Biased: within-set averages include the diagonal.
    VStatistic,
}

fn kernel_matrix(tape: &mut Tape, a: Var, b: Var, sigma2: f64, scales: &[f64]) -> Result<Var> {
    let d = tape.squared_distances(a, b)?;
    let mut acc: Option<Var> = None;
    for &s in scales {
        let e = tape.scale(d, -1.0 / (2.0 * sigma2 * s))?;
        let k = tape.exp(e)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, k)?,
            None => k,
        });
    }
    let acc = acc.expect("at least one scale");
    if scales.len() == 1 {
        Ok(acc)
    } else {
        // Divide rather than scale by the reciprocal so the diagonal stays exactly one.
        let count = tape.constant(Tensor::scalar(scales.len() as f64));
        tape.div(acc, count)
    }
}

fn within(tape: &mut Tape, x: Var, sigma2: f64, scales: &[f64], est: Estimator) -> Result<Var> {
    let n = tape.value(x).rows() as f64;
    let k = kernel_matrix(tape, x, x, sigma2, scales)?;
    let s = tape.sum(k)?;
    match est {
        Estimator::UStatistic => {
            // The diagonal is exactly one.
            let off = tape.offset(s, -n)?;
            tape.scale(off, 1.0 / (n * (n - 1.0)))
        }
        Estimator::VStatistic => tape.scale(s, 1.0 / (n * n)),
    }
}

/// Squared MMD between the rows of `a` (`n × d`) and `b` (`m × d`).
///
/// The result is exactly symmetric in its arguments: the cross term averages
/// the kernel matrix summed in both orders.
pub fn mmd_sq(tape: &mut Tape, a: Var, b: Var, cfg: &KernelConfig, est: Estimator) -> Result<Var> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols() {
        return Err(Error::Shape {
            op: "mmd_sq",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        });
    }
    let (n, m) = (ta.rows(), tb.rows());
    let min_rows = if est == Estimator::UStatistic { 2 } else { 1 };
    if n < min_rows || m < min_rows {
        return Err(Error::invalid(format!(
            "mmd_sq: need at least {min_rows} rows per sample set, got {n} and {m}"
        )));
    }
    let sigma2 = cfg.resolve(ta, tb)?;
    let scales = cfg.scales.clone();

    let eaa = within(tape, a, sigma2, &scales, est)?;
    let ebb = within(tape, b, sigma2, &scales, est)?;
    let kab = kernel_matrix(tape, a, b, sigma2, &scales)?;
    let kba = tape.transpose(kab)?;
    let s1 = tape.sum(kab)?;
    let s2 = tape.sum(kba)?;
    let both = tape.add(s1, s2)?;
    let cross = tape.scale(both, 0.5 / (n as f64 * m as f64))?;
    let within_sum = tape.add(eaa, ebb)?;
    let cross2 = tape.scale(cross, 2.0)?;
    tape.sub(within_sum, cross2)
}

/// [`mmd_sq`] on plain matrices.
pub fn mmd_sq_value(a: &Tensor, b: &Tensor, cfg: &KernelConfig, est: Estimator) -> Result<f64> {
    let mut tape = Tape::new();
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let r = mmd_sq(&mut tape, va, vb, cfg, est)?;
    tape.value(r).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_of_equal_points_is_one() {
        let a = [0.3, -1.2, 4.0];
        assert_eq!(gaussian_kernel(&a, &a, 2.5, &[1.0]).unwrap(), 1.0);
    }

    #[test]
    fn kernel_at_two_sigma_squared_distance() {
        // ‖a − b‖² = 2 with σ² = 1.
        let k = gaussian_kernel(&[1.0, 0.0], &[0.0, 1.0], 1.0, &[1.0]).unwrap();
        assert!((k - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn non_positive_bandwidth_rejected() {
        assert!(gaussian_kernel(&[0.0], &[1.0], 0.0, &[1.0]).is_err());
        assert!(gaussian_kernel(&[0.0], &[1.0], 1.0, &[-1.0]).is_err());
        let cfg = KernelConfig {
            bandwidth: Bandwidth::Fixed(-1.0),
            scales: vec![1.0],
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn v_statistic_of_identical_sets_is_zero() {
        let a = Tensor::from_rows(&[vec![0.1, 2.0], vec![-1.0, 0.5], vec![3.0, 3.0]]).unwrap();
        let v = mmd_sq_value(&a, &a, &KernelConfig::default(), Estimator::VStatistic).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn u_statistic_needs_two_rows() {
        let a = Tensor::from_rows(&[vec![0.1, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.1, 2.0], vec![1.0, 1.0]]).unwrap();
        assert!(mmd_sq_value(&a, &b, &KernelConfig::default(), Estimator::UStatistic).is_err());
    }

    #[test]
    fn median_heuristic_of_three_collinear_points() {
        // Pairwise squared distances 1, 4, 9 → median 4 → σ² = 2.
        let a = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0]]).unwrap();
        let cfg = KernelConfig {
            bandwidth: Bandwidth::MedianHeuristic,
            scales: vec![1.0],
        };
        assert_eq!(cfg.resolve(&a, &b).unwrap(), 2.0);
    }
}
