use rand::Rng;

use crate::autograd::Tensor;
use crate::data::{argmax, Dataset};
use crate::distributions::CategoricalMode;
use crate::error::{Error, Result};
use crate::model::CmmdModel;

/// Class predictions from probabilities: the row argmax (ties to the lowest
/// index), or `p > 0.5` for a single sigmoid column.
pub fn predict_classes(probs: &Tensor, mode: CategoricalMode) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| match mode {
            CategoricalMode::Sigmoid => usize::from(probs.row(r)[0] > 0.5),
            _ => argmax(probs.row(r)),
        })
        .collect()
}

pub fn error_rate(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::invalid(format!(
            "error_rate: {} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("error_rate: no labels"));
    }
    let wrong = predicted.iter().zip(truth).filter(|(p, t)| p != t).count();
    Ok(wrong as f64 / truth.len() as f64)
}

/// Root mean squared difference over all entries.
pub fn rmse(generated: &Tensor, truth: &Tensor) -> Result<f64> {
    if generated.shape() != truth.shape() {
        return Err(Error::Shape {
            op: "rmse",
            left: generated.shape().to_vec(),
            right: truth.shape().to_vec(),
        });
    }
    if truth.numel() == 0 {
        return Err(Error::invalid("rmse: empty input"));
    }
    let s: f64 = generated
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((s / truth.numel() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    pub map: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes without any positive example.
    pub skipped: Vec<usize>,
}

/// Mean over classes of average precision. Within a class, rows are ranked
/// by descending score with ties broken by row index; AP is the mean of the
/// precision at each positive's rank.
pub fn mean_average_precision(scores: &Tensor, labels: &Tensor) -> Result<MapResult> {
    if scores.shape() != labels.shape() || scores.rank() != 2 {
        return Err(Error::Shape {
            op: "mean_average_precision",
            left: scores.shape().to_vec(),
            right: labels.shape().to_vec(),
        });
    }
    let (n, k) = (scores.rows(), scores.cols());
    let mut per_class = Vec::with_capacity(k);
    let mut skipped = Vec::new();
    for c in 0..k {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores.get2(b, c).total_cmp(&scores.get2(a, c)).then(a.cmp(&b)));
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            if labels.get2(i, c) > 0.5 {
                hits += 1;
                sum += hits as f64 / (rank + 1) as f64;
            }
        }
        if hits == 0 {
            skipped.push(c);
            per_class.push(None);
        } else {
            per_class.push(Some(sum / hits as f64));
        }
    }
    let aps: Vec<f64> = per_class.iter().flatten().copied().collect();
    if aps.is_empty() {
        return Err(Error::invalid("mean_average_precision: no positive labels"));
    }
    Ok(MapResult {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        per_class,
        skipped,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub error_rate: Option<f64>,
    pub map: Option<f64>,
    /// `(modality, rmse)` per missing modality, on the stored feature scale.
    pub rmse: Vec<(String, f64)>,
}

impl MetricsReport {
    /// `(metric, target, value)` rows.
    pub fn rows(&self) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        if let Some(e) = self.error_rate {
            out.push(("error_rate".into(), "labels".into(), e));
        }
        if let Some(m) = self.map {
            out.push(("map".into(), "labels".into(), m));
        }
        for (name, v) in &self.rmse {
            out.push(("rmse".into(), name.clone(), *v));
        }
        out
    }
}

/// Test-time evaluation: the model sees only the observed modalities.
pub fn evaluate<R: Rng + ?Sized>(model: &CmmdModel, dataset: &Dataset, samples: usize, rng: &mut R) -> Result<MetricsReport> {
    dataset.manifest().check_partition(model.partition())?;
    let out = model.forward_test(&dataset.observed(), samples, rng)?;
    let mut report = MetricsReport::default();
    if let Some(y) = dataset.labels() {
        match model.arch.label_mode {
            CategoricalMode::MultiSigmoid => {
                report.map = Some(mean_average_precision(&out.class_probs, y)?.map);
            }
            mode => {
                let pred = predict_classes(&out.class_probs, mode);
                report.error_rate = Some(error_rate(&pred, &dataset.class_indices()?)?);
            }
        }
    }
    for ((m, g), truth) in model.partition().missing.iter().zip(&out.generated).zip(dataset.missing()) {
        report.rmse.push((m.name.clone(), rmse(g, &truth)?));
    }
    Ok(report)
}
