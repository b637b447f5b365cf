mod common;

use std::collections::BTreeSet;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use cmmd::autograd::Tensor;
use cmmd::data::store::{modality_file, LABELS_FILE};
use cmmd::data::{
    batch_indices, gen_synth_multimodal, load_dataset, make_two_view_digits, parse_idx, rotate_image, save_dataset,
    write_matrix, Role, SynthConfig, SynthModality, TwoViewOptions,
};
use common::{rng, tiny_dataset};
use proptest::prelude::*;

fn idx_bytes(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend(d.to_be_bytes());
    }
    b.extend_from_slice(body);
    b
}

#[test]
fn idx_images_scale_to_unit_interval() {
    let bytes = idx_bytes(0x0803, &[2, 2, 2], &[0, 255, 51, 102, 255, 0, 0, 153]);
    let t = parse_idx(&bytes).unwrap();
    assert_eq!(t.shape(), &[2, 2, 2]);
    assert_eq!(t.data(), &[0.0, 1.0, 0.2, 0.4, 1.0, 0.0, 0.0, 0.6]);
    assert!(parse_idx(&bytes[..bytes.len() - 1]).is_err());
    assert!(parse_idx(&bytes[..6]).is_err());
}

#[test]
fn idx_labels_keep_values() {
    let t = parse_idx(&idx_bytes(0x0801, &[3], &[7, 0, 9])).unwrap();
    assert_eq!(t.data(), &[7.0, 0.0, 9.0]);
}

#[test]
fn dataset_store_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(9, 1);
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest().modalities.len(), 3);
    assert_eq!(back.manifest().classes, 4);
    assert_eq!(back.labels(), ds.labels());
    for (a, b) in back.matrices().iter().zip(ds.matrices()) {
        let single: Vec<f64> = b.data().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(a.data(), single.as_slice());
    }
    // The manifest keeps the standardization statistics.
    assert_eq!(back.manifest().modality("xo").unwrap().stats.is_some(), ds.manifest().modality("xo").unwrap().stats.is_some());

    let empty = dir.path().join("empty");
    save_dataset(&ds.subset(&[]), &empty).unwrap();
    assert_eq!(load_dataset(&empty).unwrap().rows(), 0);
}

#[test]
fn row_count_mismatch_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(6, 2);
    save_dataset(&ds, dir.path()).unwrap();
    let short = ds.matrix("xg").unwrap().select_rows(&[0, 1, 2]);
    write_matrix(std::fs::File::create(dir.path().join(modality_file("xg"))).unwrap(), &short).unwrap();
    assert!(load_dataset(dir.path()).is_err());

    save_dataset(&ds, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join(LABELS_FILE)).unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

#[test]
fn synth_is_reproducible() {
    let cfg = SynthConfig { train_rows: 50, test_rows: 10, seed: 9, ..Default::default() };
    let a = gen_synth_multimodal(&cfg).unwrap();
    let b = gen_synth_multimodal(&cfg).unwrap();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_dataset(&a.train, da.path()).unwrap();
    save_dataset(&b.train, db.path()).unwrap();
    for f in std::fs::read_dir(da.path()).unwrap() {
        let name = f.unwrap().file_name();
        assert_eq!(std::fs::read(da.path().join(&name)).unwrap(), std::fs::read(db.path().join(&name)).unwrap());
    }
    let c = gen_synth_multimodal(&SynthConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(c.train.matrices()[0], a.train.matrices()[0]);
}

/// Number of linearly independent centred rows, by Gram-Schmidt.
fn centred_rank(x: &Tensor) -> usize {
    let (n, w) = (x.rows(), x.cols());
    let mean: Vec<f64> = (0..w).map(|j| (0..n).map(|i| x.get2(i, j)).sum::<f64>() / n as f64).collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let mut v: Vec<f64> = (0..w).map(|j| x.get2(i, j) - mean[j]).collect();
        let scale = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            v.iter_mut().zip(b).for_each(|(a, c)| *a -= d * c);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 * scale.max(1.0) {
            basis.push(v.iter().map(|a| a / norm).collect());
        }
    }
    basis.len()
}

#[test]
fn noiseless_linear_views_span_the_latent_dimension() {
    let mut m = SynthModality::gaussian("x", 12, Role::Observed);
    m.depth = 0;
    m.noise = 0.0;
    let mut miss = m.clone();
    miss.name = "y".into();
    miss.role = Role::Missing;
    let cfg = SynthConfig { latent_dim: 5, modalities: vec![m, miss], train_rows: 200, test_rows: 1, seed: 3, ..Default::default() };
    let out = gen_synth_multimodal(&cfg).unwrap();
    assert_eq!(centred_rank(out.train.matrix("x").unwrap()), 5);

    let mut noisy = cfg.clone();
    noisy.modalities[0].noise = 0.1;
    let out = gen_synth_multimodal(&noisy).unwrap();
    assert_eq!(centred_rank(out.train.matrix("x").unwrap()), 12);
}

#[test]
fn single_class_synth() {
    let cfg = SynthConfig { classes: 1, train_rows: 20, test_rows: 5, ..Default::default() };
    let out = gen_synth_multimodal(&cfg).unwrap();
    assert!(out.train_classes.iter().all(|&c| c == 0));
    assert_eq!(out.train.class_indices().unwrap(), vec![0; 20]);
}

#[test]
fn rotation_by_quarter_pi_matches_bilinear_oracle() {
    let side = 5;
    let mut img = vec![0.0; 25];
    img[2 * side + 3] = 1.0;
    let out = rotate_image(&img, side, FRAC_PI_4, false);
    // Output pixel (3, 3) samples the source at (row 2, col 2 + √2).
    assert!((out[3 * side + 3] - (2.0 - 2f64.sqrt())).abs() < 1e-12);

    let quarter = rotate_image(&img, side, FRAC_PI_2, false);
    let hot: Vec<usize> = quarter.iter().enumerate().filter(|(_, &v)| v > 1e-9).map(|(i, _)| i).collect();
    assert_eq!(hot.len(), 1);
    assert!((quarter[hot[0]] - 1.0).abs() < 1e-12);

    let mut centre = vec![0.0; 25];
    centre[12] = 1.0;
    for a in [0.3, -1.1, FRAC_PI_4] {
        assert!((rotate_image(&centre, side, a, true)[12] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn two_view_pairs_stay_in_range_and_share_the_class() {
    let side = 4;
    let labels = vec![0, 1, 0, 1, 1, 0];
    let data: Vec<f64> = labels.iter().flat_map(|&c| vec![c as f64; side * side]).collect();
    let images = Tensor::matrix(6, side * side, data).unwrap();
    let (xo, xm) = make_two_view_digits(&images, &labels, TwoViewOptions::default(), &mut rng(4)).unwrap();
    assert_eq!(xo.shape(), &[6, 16]);
    assert!(xo.data().iter().chain(xm.data()).all(|v| (0.0..=1.0).contains(v)));
    for (i, &c) in labels.iter().enumerate() {
        if c == 1 {
            assert!(xm.row(i).iter().all(|&v| v == 1.0));
        } else {
            assert!(xm.row(i).iter().all(|&v| v < 1.0));
        }
    }
    assert!(make_two_view_digits(&images, &labels[..5], TwoViewOptions::default(), &mut rng(4)).is_err());
    let bad = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
    assert!(make_two_view_digits(&bad, &[0], TwoViewOptions::default(), &mut rng(4)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batches_cover_every_row_once(rows in 0usize..200, bs in 1usize..70, shuffle: bool, seed in any::<u64>()) {
        let plan = batch_indices(rows, bs, shuffle, false, &mut rng(seed));
        let all: Vec<usize> = plan.iter().flatten().copied().collect();
        prop_assert_eq!(all.len(), rows);
        prop_assert_eq!(all.iter().copied().collect::<BTreeSet<_>>().len(), rows);
        prop_assert!(plan.iter().all(|b| !b.is_empty() && b.len() <= bs));
        prop_assert!(plan.iter().rev().skip(1).all(|b| b.len() == bs));

        let dropped = batch_indices(rows, bs, shuffle, true, &mut rng(seed));
        prop_assert!(dropped.iter().all(|b| b.len() >= 2 || b.len() == bs && bs < 2));
    }
}
