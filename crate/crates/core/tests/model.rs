mod common;

use cmmd::autograd::{MlpSpec, Tape, Tensor};
use cmmd::data::{argmax, Batch};
use cmmd::distributions::{categorical_log_prob, gaussian_log_prob, reparam_sample, CategoricalMode};
use cmmd::model::{
    Architecture, CmmdModel, DecoderParams, Family, Modality, ModalityPartition, PriorMode, CLASSIFIER, ENCODER, PRIOR,
};
use common::{encoder_from_prior, random_matrix, rng, tiny_dataset, tiny_model};
use proptest::prelude::*;

fn softplus(x: f64) -> f64 {
    if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() }
}

fn batch_of(ds: &cmmd::data::Dataset, n: usize) -> Batch {
    ds.batch(&(0..n).collect::<Vec<_>>())
}

#[test]
fn encoder_heads_have_latent_shape_and_commute_with_permutation() {
    let ds = tiny_dataset(6, 1);
    let model = tiny_model(&ds, 2);
    let encode_rows = |idx: &[usize]| {
        let b = ds.batch(idx);
        let mut t = Tape::new();
        let v = t.bind(&model.params);
        let iv = model.input_vars(&mut t, &b, true).unwrap();
        let q = model
            .encode(&mut t, &v, iv.x_observed, iv.x_missing.unwrap(), iv.labels, false, &mut rng(0))
            .unwrap();
        (q.mean_value(&t).clone(), q.log_var_value(&t).clone())
    };
    let (m, l) = encode_rows(&[0, 1, 2, 3, 4, 5]);
    assert_eq!(m.shape(), &[6, 2]);
    assert_eq!(l.shape(), &[6, 2]);
    let perm = [3, 5, 0, 1, 4, 2];
    let (pm, pl) = encode_rows(&perm);
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(pm.row(i), m.row(p));
        assert_eq!(pl.row(i), l.row(p));
    }
}

fn two_unit_arch() -> Architecture {
    let p = ModalityPartition::new(
        vec![Modality::new("o", 2, Family::Gaussian)],
        vec![Modality::new("m", 1, Family::Gaussian)],
    )
    .unwrap();
    let mut a = Architecture::new(p, 1, 2, CategoricalMode::Softmax);
    a.encoder_hidden = vec![2];
    a.prior_hidden = vec![2];
    a.decoder_hidden = vec![2];
    a.classifier_hidden = vec![2];
    a
}

/// One hidden softplus layer followed by an affine output, by hand.
fn hand_mlp(x: &[f64], w0: &Tensor, b0: &Tensor, w1: &Tensor, b1: &Tensor) -> Vec<f64> {
    let h: Vec<f64> = (0..w0.cols())
        .map(|j| softplus(b0.data()[j] + x.iter().enumerate().map(|(i, xi)| xi * w0.get2(i, j)).sum::<f64>()))
        .collect();
    (0..w1.cols())
        .map(|k| b1.data()[k] + h.iter().enumerate().map(|(j, hj)| hj * w1.get2(j, k)).sum::<f64>())
        .collect()
}

#[test]
fn two_unit_encoder_and_classifier_match_hand_computation() {
    let model = CmmdModel::new(two_unit_arch(), &mut rng(3)).unwrap();
    let p = |s: &str| model.params.get(s).unwrap();
    let x_o = Tensor::from_rows(&[vec![0.4, -1.3], vec![2.0, 0.1]]).unwrap();
    let x_m = Tensor::from_rows(&[vec![0.7], vec![-0.2]]).unwrap();
    let y = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let mut t = Tape::new();
    let v = t.bind(&model.params);
    let (o, m, yv) = (t.constant(x_o.clone()), t.constant(x_m.clone()), t.constant(y.clone()));
    let q = model.encode(&mut t, &v, o, m, Some(yv), false, &mut rng(0)).unwrap();
    let z = t.constant(Tensor::from_rows(&[vec![0.3], vec![-0.8]]).unwrap());
    let c = model.classify(&mut t, &v, z, false, &mut rng(0)).unwrap();
    for r in 0..2 {
        let input = [x_o.get2(r, 0), x_o.get2(r, 1), x_m.get2(r, 0), y.get2(r, 0), y.get2(r, 1)];
        let out = hand_mlp(&input, p("encoder.0.weight"), p("encoder.0.bias"), p("encoder.1.weight"), p("encoder.1.bias"));
        assert!((q.mean_value(&t).get2(r, 0) - out[0]).abs() < 1e-12);
        assert!((q.log_var_value(&t).get2(r, 0) - out[1].clamp(-7.0, 7.0)).abs() < 1e-12);
        let zr = [t.value(z).get2(r, 0)];
        let logits = hand_mlp(&zr, p("classifier.0.weight"), p("classifier.0.bias"), p("classifier.1.weight"), p("classifier.1.bias"));
        for k in 0..2 {
            assert!((t.value(c.logits).get2(r, k) - logits[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn prior_modes() {
    let ds = tiny_dataset(5, 4);
    let mut model = tiny_model(&ds, 5);
    let b = batch_of(&ds, 5);
    let prior_of = |model: &CmmdModel, obs: &[Tensor]| {
        let mut t = Tape::new();
        let v = t.bind(&model.params);
        let o = model.observed_var(&mut t, obs).unwrap();
        let p = model.prior(&mut t, &v, o, false, &mut rng(0)).unwrap();
        (p.mean_value(&t).clone(), p.log_var_value(&t).clone())
    };
    for (path, value) in model.params.iter_mut() {
        if path.starts_with(PRIOR) && path.ends_with("weight") {
            value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let last = model.arch.prior_spec().num_layers() - 1;
    let bias = model.params.get(&MlpSpec::bias_path(PRIOR, last)).unwrap().clone();
    let (m, _) = prior_of(&model, &b.observed);
    for r in 0..5 {
        assert_eq!(m.row(r), &bias.data()[..2]);
    }

    model.arch.prior_mode = PriorMode::StandardNormal;
    let (m1, l1) = prior_of(&model, &b.observed);
    let other: Vec<Tensor> = b.observed.iter().map(|x| x.map(|v| 3.0 * v - 1.0)).collect();
    let (m2, l2) = prior_of(&model, &other);
    assert_eq!(m1, Tensor::zeros(&[5, 2]));
    assert_eq!(l1, Tensor::zeros(&[5, 2]));
    assert_eq!((m1, l1), (m2, l2));
}

#[test]
fn distinct_observations_get_distinct_prior_means() {
    for seed in 0..100 {
        let ds = tiny_dataset(2, seed);
        let model = tiny_model(&ds, seed + 1000);
        let b = batch_of(&ds, 2);
        let mut t = Tape::new();
        let v = t.bind(&model.params);
        let o = model.observed_var(&mut t, &b.observed).unwrap();
        let p = model.prior(&mut t, &v, o, false, &mut rng(0)).unwrap();
        assert_ne!(p.mean_value(&t).row(0), p.mean_value(&t).row(1), "seed {seed}");
    }
}

#[test]
fn three_modality_decoders() {
    let p = ModalityPartition::new(
        vec![Modality::new("img", 6, Family::Gaussian)],
        vec![Modality::new("txt", 4, Family::Bernoulli), Modality::new("aud", 3, Family::Gaussian)],
    )
    .unwrap();
    let model = CmmdModel::new(Architecture::new(p, 2, 3, CategoricalMode::Softmax).with_hidden(5, 1), &mut rng(6)).unwrap();
    let mut t = Tape::new();
    let v = t.bind(&model.params);
    let o = t.constant(random_matrix(4, 6, 1.0, &mut rng(7)));
    let z = t.constant(random_matrix(4, 2, 1.0, &mut rng(8)));
    let decs = model.decode(&mut t, &v, o, z, false, &mut rng(0)).unwrap();
    assert_eq!(decs.len(), 2);
    match decs[0] {
        DecoderParams::Bernoulli(b) => {
            assert_eq!(t.value(b.logits).shape(), &[4, 4]);
            let probs = t.value(b.logits).map(|x| 1.0 / (1.0 + (-x).exp()));
            assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
        _ => panic!("first missing modality is Bernoulli"),
    }
    match decs[1] {
        DecoderParams::Gaussian(g) => {
            assert_eq!(g.mean_value(&t).shape(), &[4, 3]);
            assert_eq!(g.log_var_value(&t).shape(), &[4, 3]);
        }
        _ => panic!("second missing modality is Gaussian"),
    }
}

#[test]
fn classifier_logits_are_finite_and_argmax_is_shift_invariant() {
    let ds = tiny_dataset(4, 9);
    let model = tiny_model(&ds, 10);
    let mut t = Tape::new();
    let v = t.bind(&model.params);
    let z = t.constant(random_matrix(50, 2, 5.0, &mut rng(11)));
    let c = model.classify(&mut t, &v, z, false, &mut rng(0)).unwrap();
    let logits = t.value(c.logits).clone();
    assert!(logits.is_finite());
    let shifted = logits.map(|x| x + 123.25);
    for r in 0..50 {
        assert_eq!(argmax(logits.row(r)), argmax(shifted.row(r)));
    }
}

#[test]
fn identical_networks_and_shared_noise_give_identical_samples() {
    let ds = tiny_dataset(5, 12);
    let mut model = tiny_model(&ds, 13);
    encoder_from_prior(&mut model);
    let b = batch_of(&ds, 5);
    let mut t = Tape::new();
    let v = t.bind(&model.params);
    let iv = model.input_vars(&mut t, &b, true).unwrap();
    let q = model.encode(&mut t, &v, iv.x_observed, iv.x_missing.unwrap(), iv.labels, false, &mut rng(0)).unwrap();
    let p = model.prior(&mut t, &v, iv.x_observed, false, &mut rng(0)).unwrap();
    let noise = t.constant(random_matrix(5, 2, 1.0, &mut rng(14)));
    let zq = reparam_sample(&mut t, &q, noise).unwrap();
    let zp = reparam_sample(&mut t, &p, noise).unwrap();
    assert_eq!(t.value(zq), t.value(zp));
}

fn recon_and_class(model: &CmmdModel, b: &Batch, seed: u64) -> (Tape, cmmd::autograd::Var, cmmd::autograd::Var) {
    let mut t = Tape::new();
    let v = t.bind(&model.params);
    let iv = model.input_vars(&mut t, b, true).unwrap();
    let out = model.forward_train(&mut t, &v, &iv, true, &mut rng(seed)).unwrap();
    let mut recon = None;
    for (d, x) in out.decoders.iter().zip(&iv.missing_parts) {
        let lp = match d {
            DecoderParams::Gaussian(g) => gaussian_log_prob(&mut t, g, *x).unwrap(),
            DecoderParams::Bernoulli(bp) => cmmd::distributions::bernoulli_log_prob(&mut t, bp, *x).unwrap(),
        };
        recon = Some(match recon {
            Some(a) => t.add(a, lp).unwrap(),
            None => lp,
        });
    }
    let recon = t.mean(recon.unwrap()).unwrap();
    let cl = categorical_log_prob(&mut t, &out.class, iv.labels.unwrap()).unwrap();
    let class = t.mean(cl).unwrap();
    (t, recon, class)
}

#[test]
fn routing_invariants_hold_for_gradients() {
    let ds = tiny_dataset(6, 15);
    let model = tiny_model(&ds, 16);
    let b = batch_of(&ds, 6);
    let (t, recon, class) = recon_and_class(&model, &b, 17);
    let gc = t.backward(class).unwrap().into_by_path();
    for (path, g) in &gc {
        if path.starts_with(ENCODER) || path.starts_with("decoder") {
            assert!(g.data().iter().all(|&x| x == 0.0), "{path}");
        }
    }
    assert!(gc.iter().any(|(p, g)| p.starts_with(PRIOR) && g.data().iter().any(|&x| x != 0.0)));
    let gr = t.backward(recon).unwrap().into_by_path();
    for (path, g) in &gr {
        if path.starts_with(PRIOR) || path.starts_with(CLASSIFIER) {
            assert!(g.data().iter().all(|&x| x == 0.0), "{path}");
        }
    }
    let enc_bias = &gr[&MlpSpec::bias_path(ENCODER, model.arch.encoder_spec().num_layers() - 1)];
    assert!(enc_bias.data()[..2].iter().any(|&x| x != 0.0), "reconstruction must depend on the encoder mean");
}

#[test]
fn class_output_ignores_missing_modalities() {
    let ds = tiny_dataset(6, 18);
    let model = tiny_model(&ds, 19);
    let b = batch_of(&ds, 6);
    let mut perturbed = b.clone();
    for m in &mut perturbed.missing {
        *m = m.map(|v| v + 5.0);
    }
    let logits = |batch: &Batch| {
        let mut t = Tape::new();
        let v = t.bind(&model.params);
        let iv = model.input_vars(&mut t, batch, true).unwrap();
        let out = model.forward_train(&mut t, &v, &iv, false, &mut rng(20)).unwrap();
        t.value(out.class.logits).clone()
    };
    assert_eq!(logits(&b), logits(&perturbed));
}

#[test]
fn forward_test_is_deterministic_per_seed() {
    let ds = tiny_dataset(6, 21);
    let model = tiny_model(&ds, 22);
    let obs = ds.observed();
    let a = model.forward_test(&obs, 1, &mut rng(23)).unwrap();
    let b = model.forward_test(&obs, 1, &mut rng(23)).unwrap();
    assert_eq!(a.generated, b.generated);
    assert_eq!(a.class_probs, b.class_probs);
    assert!(a.generated[1].data().iter().all(|&p| p > 0.0 && p < 1.0));
}

fn modality_list(prefix: &str, spec: &[(usize, bool)]) -> Vec<Modality> {
    spec.iter()
        .enumerate()
        .map(|(i, &(w, bern))| {
            Modality::new(&format!("{prefix}{i}"), w, if bern { Family::Bernoulli } else { Family::Gaussian })
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shapes_close_over_random_partitions(
        obs in prop::collection::vec((1usize..5, any::<bool>()), 1..=3),
        mis in prop::collection::vec((1usize..5, any::<bool>()), 1..=3),
        latent in 1usize..4,
        classes in 2usize..5,
        rows in 2usize..5,
        seed in any::<u64>(),
    ) {
        let part = ModalityPartition::new(modality_list("o", &obs), modality_list("m", &mis)).unwrap();
        let model = CmmdModel::new(Architecture::new(part.clone(), latent, classes, CategoricalMode::Softmax).with_hidden(3, 1), &mut rng(seed)).unwrap();
        let mut r = rng(seed ^ 7);
        let observed: Vec<Tensor> = part.observed.iter().map(|m| random_matrix(rows, m.width, 1.0, &mut r)).collect();
        let missing: Vec<Tensor> = part.missing.iter().map(|m| random_matrix(rows, m.width, 0.5, &mut r).map(|v| v + 0.5)).collect();
        let labels = cmmd::data::one_hot(&(0..rows).map(|i| i % classes).collect::<Vec<_>>(), classes);
        let batch = Batch { observed: observed.clone(), missing, labels: Some(labels), indices: (0..rows).collect() };
        let mut t = Tape::new();
        let v = t.bind(&model.params);
        let iv = model.input_vars(&mut t, &batch, true).unwrap();
        let out = model.forward_train(&mut t, &v, &iv, true, &mut r).unwrap();
        prop_assert_eq!(t.value(out.z_q).shape(), &[rows, latent]);
        prop_assert_eq!(t.value(out.z_p).shape(), &[rows, latent]);
        prop_assert_eq!(t.value(out.class.logits).shape(), &[rows, classes]);
        for (d, m) in out.decoders.iter().zip(&part.missing) {
            let w = match d {
                DecoderParams::Gaussian(g) => t.value(g.mean).cols(),
                DecoderParams::Bernoulli(b) => t.value(b.logits).cols(),
            };
            prop_assert_eq!(w, m.width);
        }
        let test = model.forward_test(&observed, 2, &mut r).unwrap();
        for (g, m) in test.generated.iter().zip(&part.missing) {
            prop_assert_eq!(g.shape(), &[rows, m.width]);
        }
        prop_assert_eq!(test.class_probs.shape(), &[rows, classes]);
    }
}
