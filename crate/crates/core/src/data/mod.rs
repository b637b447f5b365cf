//! Datasets: the in-memory container, on-disk storage, generators and
//! batching.

pub mod batches;
pub mod digits;
pub mod idx;
pub mod store;
pub mod synth;

pub use batches::{batch_indices, Batches};
pub use digits::{make_two_view_digits, rotate_image, TwoViewOptions};
pub use idx::{load_idx, parse_idx};
pub use store::{load_dataset, read_matrix, save_dataset, write_matrix};
pub use synth::{gen_synth_multimodal, SynthConfig, SynthModality, SynthOutput};

use crate::autograd::Tensor;
use crate::distributions::CategoricalMode;
use crate::error::{Error, Result};
use crate::model::{Family, Modality, ModalityPartition};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Observed,
    Missing,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Observed => "observed",
            Role::Missing => "missing",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "observed" => Ok(Role::Observed),
            "missing" => Ok(Role::Missing),
            other => Err(Error::format(format!("unknown modality role `{other}`"))),
        }
    }
}

/// Per-feature affine standardization `(x − mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Column statistics of `x`; constant columns get unit scale.
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n.max(1) as f64).sqrt();
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        out
    }

    pub fn invert(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = *v * self.std[j] + self.mean[j];
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityInfo {
    pub name: String,
    pub width: usize,
    pub family: Family,
    pub role: Role,
    /// Present iff the stored values are standardized.
    pub stats: Option<Standardization>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub modalities: Vec<ModalityInfo>,
    pub classes: usize,
    pub label_mode: CategoricalMode,
    pub has_labels: bool,
    pub rows: usize,
}

impl DatasetManifest {
    pub fn partition(&self) -> Result<ModalityPartition> {
        let pick = |role| {
            self.modalities
                .iter()
                .filter(|m| m.role == role)
                .map(|m| Modality::new(&m.name, m.width, m.family))
                .collect()
        };
        ModalityPartition::new(pick(Role::Observed), pick(Role::Missing))
    }

    pub fn label_width(&self) -> usize {
        self.label_mode.output_width(self.classes)
    }

    pub fn modality(&self, name: &str) -> Option<&ModalityInfo> {
        self.modalities.iter().find(|m| m.name == name)
    }

    /// Checks that a model partition agrees with this dataset's modalities.
    pub fn check_partition(&self, partition: &ModalityPartition) -> Result<()> {
        let ours = self.partition()?;
        if &ours != partition {
            return Err(Error::invalid(format!(
                "dataset partition {} does not match model partition {}",
                describe(&ours),
                describe(partition)
            )));
        }
        Ok(())
    }
}

fn describe(p: &ModalityPartition) -> String {
    let f = |ms: &[Modality]| {
        ms.iter()
            .map(|m| format!("{}:{}:{}", m.name, m.width, m.family.name()))
            .collect::<Vec<_>>()
            .join(",")
    };
    format!("O=[{}] M=[{}]", f(&p.observed), f(&p.missing))
}

/// One minibatch split by role, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub observed: Vec<Tensor>,
    pub missing: Vec<Tensor>,
    pub labels: Option<Tensor>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.indices.len()
    }
}

/// A validated multi-modal dataset held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    manifest: DatasetManifest,
    data: Vec<Tensor>,
    labels: Option<Tensor>,
}

impl Dataset {
    /// `data` holds one `rows × width` matrix per manifest modality;
    /// `labels` has the manifest's label width.
    pub fn new(manifest: DatasetManifest, data: Vec<Tensor>, labels: Option<Tensor>) -> Result<Self> {
        if data.len() != manifest.modalities.len() {
            return Err(Error::format(format!(
                "manifest lists {} modalities, got {} matrices",
                manifest.modalities.len(),
                data.len()
            )));
        }
        for (m, t) in manifest.modalities.iter().zip(&data) {
            if t.rank() != 2 || t.cols() != m.width {
                return Err(Error::Width {
                    modality: m.name.clone(),
                    expected: m.width,
                    actual: t.cols(),
                });
            }
            if t.rows() != manifest.rows {
                return Err(Error::format(format!(
                    "modality `{}` has {} rows, manifest says {}",
                    m.name,
                    t.rows(),
                    manifest.rows
                )));
            }
            if let Some(s) = &m.stats {
                if s.mean.len() != m.width || s.std.len() != m.width {
                    return Err(Error::format(format!("modality `{}` has malformed statistics", m.name)));
                }
            }
        }
        match (&labels, manifest.has_labels) {
            (Some(y), true) => {
                if y.rank() != 2 || y.rows() != manifest.rows || y.cols() != manifest.label_width() {
                    return Err(Error::format(format!(
                        "labels have shape {:?}, expected [{}, {}]",
                        y.shape(),
                        manifest.rows,
                        manifest.label_width()
                    )));
                }
            }
            (None, false) => {}
            _ => return Err(Error::format("label presence disagrees with the manifest")),
        }
        if manifest.classes == 0 {
            return Err(Error::format("class count must be positive"));
        }
        Ok(Self { manifest, data, labels })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn rows(&self) -> usize {
        self.manifest.rows
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.rows == 0
    }

    pub fn matrices(&self) -> &[Tensor] {
        &self.data
    }

    pub fn matrix(&self, name: &str) -> Result<&Tensor> {
        self.manifest
            .modalities
            .iter()
            .position(|m| m.name == name)
            .map(|i| &self.data[i])
            .ok_or_else(|| Error::invalid(format!("no modality named `{name}`")))
    }

    pub fn labels(&self) -> Option<&Tensor> {
        self.labels.as_ref()
    }

    fn by_role(&self, role: Role) -> Vec<&Tensor> {
        self.manifest
            .modalities
            .iter()
            .zip(&self.data)
            .filter(|(m, _)| m.role == role)
            .map(|(_, t)| t)
            .collect()
    }

    /// All observed blocks.
    pub fn observed(&self) -> Vec<Tensor> {
        self.by_role(Role::Observed).into_iter().cloned().collect()
    }

    /// All missing blocks.
    pub fn missing(&self) -> Vec<Tensor> {
        self.by_role(Role::Missing).into_iter().cloned().collect()
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            observed: self.by_role(Role::Observed).iter().map(|t| t.select_rows(indices)).collect(),
            missing: self.by_role(Role::Missing).iter().map(|t| t.select_rows(indices)).collect(),
            labels: self.labels.as_ref().map(|y| y.select_rows(indices)),
            indices: indices.to_vec(),
        }
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> Batch {
        let idx: Vec<usize> = (0..self.rows()).collect();
        self.batch(&idx)
    }

    /// A dataset of the given rows, keeping the manifest's statistics.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut manifest = self.manifest.clone();
        manifest.rows = indices.len();
        Dataset {
            manifest,
            data: self.data.iter().map(|t| t.select_rows(indices)).collect(),
            labels: self.labels.as_ref().map(|y| y.select_rows(indices)),
        }
    }

    /// The same rows without labels.
    pub fn without_labels(&self) -> Dataset {
        let mut manifest = self.manifest.clone();
        manifest.has_labels = false;
        Dataset {
            manifest,
            data: self.data.clone(),
            labels: None,
        }
    }

    /// Integer class per row: the one-hot position (softmax) or the binary
    /// value (sigmoid). Multi-label datasets have no single class.
    pub fn class_indices(&self) -> Result<Vec<usize>> {
        let y = self.labels.as_ref().ok_or_else(|| Error::invalid("dataset has no labels"))?;
        match self.manifest.label_mode {
            CategoricalMode::Softmax => Ok((0..y.rows()).map(|r| argmax(y.row(r))).collect()),
            CategoricalMode::Sigmoid => Ok((0..y.rows()).map(|r| usize::from(y.row(r)[0] > 0.5)).collect()),
            CategoricalMode::MultiSigmoid => Err(Error::invalid("multi-label data has no single class per row")),
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One-hot rows for `classes` classes.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &c) in labels.iter().enumerate() {
        t.data_mut()[r * classes + c] = 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardization_inverts() {
        let x = Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0], vec![8.0, 5.0]]).unwrap();
        let s = Standardization::fit(&x);
        assert_eq!(s.std[1], 1.0);
        let back = s.invert(&s.apply(&x));
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 2.0, 2.0]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }
}
