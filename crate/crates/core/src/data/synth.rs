//! Seeded synthetic multi-modal data with class structure.
//!
//! Each row draws a class `c`, a latent `t ~ N(μ_c, I)` with the class means
//! placed on a regular simplex, and one view per modality: `depth` random
//! `tanh` layers on `t`, a random affine map to the modality width, then
//! Gaussian noise.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{one_hot, Dataset, DatasetManifest, ModalityInfo, Role, Standardization};
use crate::autograd::Tensor;
use crate::distributions::CategoricalMode;
use crate::error::{Error, Result};
use crate::model::Family;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthModality {
    pub name: String,
    pub width: usize,
    pub role: Role,
    /// Number of `tanh` layers before the output map.
    pub depth: usize,
    /// Standard deviation of the additive noise.
    pub noise: f64,
    /// When set, each feature draws its own noise variance uniformly from
    /// this range instead of using `noise`.
    pub noise_var_range: Option<(f64, f64)>,
    /// Bernoulli modalities are thresholded to {0, 1} instead of standardized.
    pub family: Family,
    pub standardize: bool,
}

impl SynthModality {
    pub fn gaussian(name: &str, width: usize, role: Role) -> Self {
        Self {
            name: name.to_string(),
            width,
            role,
            depth: 1,
            noise: 0.5,
            noise_var_range: None,
            family: Family::Gaussian,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub latent_dim: usize,
    /// Distance of each class mean from the origin.
    pub class_separation: f64,
    pub modalities: Vec<SynthModality>,
    pub label_mode: CategoricalMode,
    pub label_noise: f64,
    pub train_rows: usize,
    pub test_rows: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            latent_dim: 8,
            class_separation: 2.0,
            modalities: vec![
                SynthModality::gaussian("x1", 30, Role::Observed),
                SynthModality::gaussian("x2", 20, Role::Missing),
            ],
            label_mode: CategoricalMode::Softmax,
            label_noise: 0.0,
            train_rows: 4000,
            test_rows: 1000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.latent_dim == 0 {
            return Err(Error::config("classes and latent_dim must be positive"));
        }
        if self.label_mode == CategoricalMode::Sigmoid && self.classes != 2 {
            return Err(Error::config("sigmoid label mode needs exactly 2 classes"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::config("label_noise must lie in [0, 1]"));
        }
        if !(self.class_separation >= 0.0) {
            return Err(Error::config("class_separation must be non-negative"));
        }
        if self.modalities.is_empty() {
            return Err(Error::config("at least one modality is required"));
        }
        for m in &self.modalities {
            if m.width == 0 {
                return Err(Error::config(format!("modality `{}` has zero width", m.name)));
            }
            if !(m.noise >= 0.0) {
                return Err(Error::config(format!("modality `{}` has negative noise", m.name)));
            }
            if let Some((lo, hi)) = m.noise_var_range {
                if !(lo >= 0.0 && hi >= lo) {
                    return Err(Error::config(format!("modality `{}` has a bad noise range", m.name)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub train: Dataset,
    pub test: Dataset,
    /// Ground-truth class of every train row, before label noise.
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Orthonormalizes the columns of a `rows × cols` matrix in place
/// (Gram–Schmidt); requires `cols ≤ rows`.
fn orthonormal_columns(m: &mut [f64], rows: usize, cols: usize) {
    for j in 0..cols {
        for k in 0..j {
            let dot: f64 = (0..rows).map(|i| m[i * cols + j] * m[i * cols + k]).sum();
            for i in 0..rows {
                m[i * cols + j] -= dot * m[i * cols + k];
            }
        }
        let norm = (0..rows).map(|i| m[i * cols + j].powi(2)).sum::<f64>().sqrt();
        for i in 0..rows {
            m[i * cols + j] /= norm;
        }
    }
}

/// Class means: the centred standard basis of `R^K` (a regular simplex),
/// mapped into the latent space and rescaled to norm `separation`.
fn class_means(k: usize, dim: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if k == 1 {
        return vec![vec![0.0; dim]];
    }
    let mut proj = gaussian_matrix(dim, k, 1.0, rng);
    if k <= dim {
        orthonormal_columns(&mut proj, dim, k);
    }
    (0..k)
        .map(|c| {
            let v: Vec<f64> = (0..k).map(|j| if j == c { 1.0 } else { 0.0 } - 1.0 / k as f64).collect();
            let mut mu: Vec<f64> = (0..dim).map(|i| (0..k).map(|j| proj[i * k + j] * v[j]).sum()).collect();
            let norm = mu.iter().map(|x| x * x).sum::<f64>().sqrt();
            mu.iter_mut().for_each(|x| *x *= separation / norm);
            mu
        })
        .collect()
}

struct ViewMap {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
    noise_sd: Vec<f64>,
}

impl ViewMap {
    fn sample(m: &SynthModality, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        let layers = (0..m.depth)
            .map(|_| (gaussian_matrix(dim, dim, 1.5 * s, rng), gaussian_matrix(1, dim, 0.1, rng)))
            .collect();
        let out_w = gaussian_matrix(dim, m.width, s, rng);
        let out_b = gaussian_matrix(1, m.width, 0.5, rng);
        let noise_sd = match m.noise_var_range {
            Some((lo, hi)) => (0..m.width)
                .map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo }.sqrt())
                .collect(),
            None => vec![m.noise; m.width],
        };
        Self {
            layers,
            out_w,
            out_b,
            noise_sd,
        }
    }

    fn apply(&self, t: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let dim = t.len();
        let mut h = t.to_vec();
        for (w, b) in &self.layers {
            h = (0..dim)
                .map(|j| ((0..dim).map(|i| h[i] * w[i * dim + j]).sum::<f64>() + b[j]).tanh())
                .collect();
        }
        let width = self.out_b.len();
        (0..width)
            .map(|j| {
                let signal: f64 = (0..dim).map(|i| h[i] * self.out_w[i * width + j]).sum::<f64>() + self.out_b[j];
                signal + self.noise_sd[j] * rng.sample::<f64, _>(StandardNormal)
            })
            .collect()
    }
}

/// Generates train and test splits from the same seeded population.
///
/// Gaussian modalities with `standardize` set are standardized with train
/// statistics, which are stored in both manifests. Bernoulli modalities are
/// thresholded at zero.
pub fn gen_synth_multimodal(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = class_means(cfg.classes, cfg.latent_dim, cfg.class_separation, &mut rng);
    let maps: Vec<ViewMap> = cfg
        .modalities
        .iter()
        .map(|m| ViewMap::sample(m, cfg.latent_dim, &mut rng))
        .collect();
    // Directions for multi-label attributes.
    let label_dirs = gaussian_matrix(cfg.classes, cfg.latent_dim, 1.0, &mut rng);

    let total = cfg.train_rows + cfg.test_rows;
    let mut views: Vec<Vec<f64>> = cfg.modalities.iter().map(|m| Vec::with_capacity(total * m.width)).collect();
    let mut classes = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut multi = Vec::with_capacity(total * cfg.classes);
    for _ in 0..total {
        let c = rng.random_range(0..cfg.classes);
        let t: Vec<f64> = means[c]
            .iter()
            .map(|mu| mu + rng.sample::<f64, _>(StandardNormal))
            .collect();
        for (v, map) in views.iter_mut().zip(&maps) {
            v.extend(map.apply(&t, &mut rng));
        }
        classes.push(c);
        let flip = cfg.label_noise > 0.0 && rng.random::<f64>() < cfg.label_noise && cfg.classes > 1;
        labels.push(if flip {
            let others: Vec<usize> = (0..cfg.classes).filter(|&k| k != c).collect();
            *others.choose(&mut rng).expect("at least one other class")
        } else {
            c
        });
        for k in 0..cfg.classes {
            let s: f64 = (0..cfg.latent_dim).map(|i| label_dirs[k * cfg.latent_dim + i] * t[i]).sum();
            multi.push(if s > 0.0 { 1.0 } else { 0.0 });
        }
    }

    let label_tensor = match cfg.label_mode {
        CategoricalMode::Softmax => one_hot(&labels, cfg.classes),
        CategoricalMode::Sigmoid => Tensor::matrix(total, 1, labels.iter().map(|&l| l as f64).collect())?,
        CategoricalMode::MultiSigmoid => Tensor::matrix(total, cfg.classes, multi)?,
    };
    let train_idx: Vec<usize> = (0..cfg.train_rows).collect();
    let test_idx: Vec<usize> = (cfg.train_rows..total).collect();

    let mut infos = Vec::new();
    let mut train_data = Vec::new();
    let mut test_data = Vec::new();
    for (m, v) in cfg.modalities.iter().zip(views) {
        let full = Tensor::matrix(total, m.width, v)?;
        let (train, test) = (full.select_rows(&train_idx), full.select_rows(&test_idx));
        let (train, test, stats) = match m.family {
            Family::Bernoulli => {
                let bin = |t: &Tensor| t.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                (bin(&train), bin(&test), None)
            }
            Family::Gaussian if m.standardize => {
                let s = Standardization::fit(&train);
                (s.apply(&train), s.apply(&test), Some(s))
            }
            Family::Gaussian => (train, test, None),
        };
        train_data.push(train);
        test_data.push(test);
        infos.push(ModalityInfo {
            name: m.name.clone(),
            width: m.width,
            family: m.family,
            role: m.role,
            stats,
        });
    }
    let manifest = |rows| DatasetManifest {
        modalities: infos.clone(),
        classes: cfg.classes,
        label_mode: cfg.label_mode,
        has_labels: true,
        rows,
    };
    let train = Dataset::new(manifest(cfg.train_rows), train_data, Some(label_tensor.select_rows(&train_idx)))?;
    let test = Dataset::new(manifest(cfg.test_rows), test_data, Some(label_tensor.select_rows(&test_idx)))?;
    Ok(SynthOutput {
        train,
        test,
        train_classes: classes[..cfg.train_rows].to_vec(),
        test_classes: classes[cfg.train_rows..].to_vec(),
    })
}
