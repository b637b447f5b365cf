#![allow(dead_code)]

use cmmd::autograd::Tensor;
use cmmd::data::synth::{gen_synth_multimodal, SynthConfig, SynthModality};
use cmmd::data::{Dataset, Role};
use cmmd::distributions::CategoricalMode;
use cmmd::autograd::MlpSpec;
use cmmd::model::{Architecture, CmmdModel, Family, ENCODER, PRIOR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Small synthetic dataset: one Gaussian observed block, one Gaussian and one
/// Bernoulli missing block, four classes.
pub fn tiny_dataset(rows: usize, seed: u64) -> Dataset {
    let mut bern = SynthModality::gaussian("xb", 3, Role::Missing);
    bern.family = Family::Bernoulli;
    let cfg = SynthConfig {
        classes: 4,
        latent_dim: 3,
        modalities: vec![
            SynthModality::gaussian("xo", 5, Role::Observed),
            SynthModality::gaussian("xg", 4, Role::Missing),
            bern,
        ],
        train_rows: rows,
        test_rows: 2,
        seed,
        ..Default::default()
    };
    gen_synth_multimodal(&cfg).unwrap().train
}

pub fn tiny_arch(ds: &Dataset) -> Architecture {
    let m = ds.manifest();
    Architecture::new(m.partition().unwrap(), 2, m.classes, m.label_mode).with_hidden(4, 1)
}

pub fn tiny_model(ds: &Dataset, seed: u64) -> CmmdModel {
    CmmdModel::new(tiny_arch(ds), &mut rng(seed)).unwrap()
}

pub fn softmax_arch(ds: &Dataset, hidden: usize) -> Architecture {
    let m = ds.manifest();
    Architecture::new(m.partition().unwrap(), 3, m.classes, CategoricalMode::Softmax).with_hidden(hidden, 2)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Makes the encoder compute the prior network: first-layer rows for
/// `x_M` and the labels are zeroed, everything else is copied.
pub fn encoder_from_prior(model: &mut CmmdModel) {
    let n_prior = model.arch.prior_spec().num_layers();
    for l in 0..n_prior {
        let w = model.params.get(&MlpSpec::weight_path(PRIOR, l)).unwrap().clone();
        let b = model.params.get(&MlpSpec::bias_path(PRIOR, l)).unwrap().clone();
        let ew = model.params.get_mut(&MlpSpec::weight_path(ENCODER, l)).unwrap();
        if l == 0 {
            ew.data_mut().iter_mut().for_each(|v| *v = 0.0);
            let cols = w.cols();
            ew.data_mut()[..w.numel()].copy_from_slice(w.data());
            assert_eq!(cols, ew.cols());
        } else {
            *ew = w;
        }
        *model.params.get_mut(&MlpSpec::bias_path(ENCODER, l)).unwrap() = b;
    }
}
