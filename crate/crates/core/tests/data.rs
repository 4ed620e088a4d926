use std::collections::BTreeSet;
use std::fs;

use cplsr_core::data::{
    load_dataset, read_ppm, save_dataset, split_roles, synth_dataset, write_ppm, Family, ImageFormat, Role,
    SynthConfig, SynthSuite,
};
use cplsr_core::tensor::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn cfg(name: &str, role: Role, family: Family, classes: usize, first_class_id: u32) -> SynthConfig {
    SynthConfig {
        name: name.into(),
        role,
        family,
        classes,
        first_class_id,
        ..SynthConfig::default()
    }
}

/// Held-out accuracy of a minimum-norm least-squares map from raw pixels
/// (plus a bias) to one-hot labels, fitted on the first half of each class.
/// Both nuisance sources (pixel noise and distractor squares) are off.
fn least_squares_probe(family: Family, seed: u64) -> f64 {
    let data = synth_dataset(&SynthConfig {
        family,
        noise: 0.0,
        clutter: 0,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let k = data.num_classes();
    let per = data.classes[0].images.len();
    let dim = data.image(0, 0).numel() + 1;
    let split = per / 2;
    let design = |range: std::ops::Range<usize>| {
        let rows: Vec<(usize, &Tensor<f64>)> = data
            .classes
            .iter()
            .enumerate()
            .flat_map(|(c, cls)| cls.images[range.clone()].iter().map(move |img| (c, img)))
            .collect();
        let x = DMatrix::from_fn(
            rows.len(),
            dim,
            |r, j| if j + 1 == dim { 1.0 } else { rows[r].1.data()[j] },
        );
        let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
        (x, labels)
    };
    let (x_train, y_train) = design(0..split);
    let (x_test, y_test) = design(split..per);
    let targets = DMatrix::from_fn(y_train.len(), k, |r, c| if y_train[r] == c { 1.0 } else { 0.0 });
    let w = x_train.svd(true, true).solve(&targets, 1e-10).unwrap();
    let scores = x_test * w;
    let correct = (0..y_test.len())
        .filter(|&r| scores.row(r).transpose().argmax().0 == y_test[r])
        .count();
    correct as f64 / y_test.len() as f64
}

#[test]
fn base_classes_are_linearly_separable_without_noise() {
    let base = SynthSuite::default().base.family;
    for seed in [0, 1, 2] {
        let acc = least_squares_probe(base, seed);
        assert!(acc >= 0.9, "{base:?} seed {seed}: probe accuracy {acc}");
    }
}

#[test]
fn default_counts() {
    let ds = synth_dataset(&SynthConfig::default()).unwrap();
    assert_eq!((ds.num_classes(), ds.num_samples()), (8, 320));
    assert_eq!(ds.geometry, (3, 32, 32));
}

#[test]
fn roles_have_disjoint_ids_and_distinct_families() {
    let (b, v, t) = split_roles(
        &cfg("b", Role::Base, Family::GaussianBlobs, 8, 0),
        &cfg("v", Role::Validation, Family::GaussianBlobs, 4, 8),
        &cfg("t", Role::Target, Family::RingPatterns, 5, 12),
    )
    .unwrap();
    let sets: Vec<BTreeSet<u32>> = [&b, &v, &t]
        .iter()
        .map(|d| d.class_ids().into_iter().collect())
        .collect();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(sets[i].is_disjoint(&sets[j]));
        }
    }
    assert_eq!((b.role, v.role, t.role), (Role::Base, Role::Validation, Role::Target));

    let overlap = split_roles(
        &cfg("b", Role::Base, Family::GaussianBlobs, 8, 0),
        &cfg("v", Role::Validation, Family::GaussianBlobs, 4, 7),
        &cfg("t", Role::Target, Family::RingPatterns, 5, 20),
    );
    assert_eq!(overlap.unwrap_err().exit_code(), 2);
    let same_family = split_roles(
        &cfg("b", Role::Base, Family::GaussianBlobs, 8, 0),
        &cfg("v", Role::Validation, Family::GaussianBlobs, 4, 8),
        &cfg("t", Role::Target, Family::GaussianBlobs, 5, 12),
    );
    assert_eq!(same_family.unwrap_err().exit_code(), 2);
}

#[test]
fn default_suite_is_disjoint() {
    let (b, v, targets) = SynthSuite::with_seed(4).generate().unwrap();
    let mut all = BTreeSet::new();
    for d in std::iter::once(&b).chain(std::iter::once(&v)).chain(&targets) {
        for id in d.class_ids() {
            assert!(all.insert(id), "class id {id} reused");
        }
        assert_eq!(d.geometry, (3, 32, 32));
    }
    assert_ne!(targets[0].classes[0].images[0], b.classes[0].images[0]);
}

#[test]
fn manifest_round_trip_and_errors() {
    let ds = synth_dataset(&SynthConfig {
        classes: 2,
        samples_per_class: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(&ds, dir.path(), ImageFormat::Tensor).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back.num_samples(), 6);
    assert_eq!(back, ds);
    for (a, b) in back.classes.iter().zip(&ds.classes) {
        for (x, y) in a.images.iter().zip(&b.images) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    let text = fs::read_to_string(&manifest).unwrap();
    let body_start = text.find("\n\n").unwrap() + 2;
    let first_line = text[body_start..].lines().next().unwrap().to_string();
    let dup = dir.path().join("dup.txt");
    fs::write(&dup, format!("{text}{first_line}\n")).unwrap();
    let err = load_dataset(&dup).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("duplicate class id 0"), "{err}");

    let wrong = dir.path().join("class_1/0002.cptn");
    cplsr_core::tensor::io::save_tensor(&wrong, &Tensor::<f64>::zeros(&[3, 16, 32])).unwrap();
    let msg = load_dataset(&manifest).unwrap_err().to_string();
    assert!(msg.contains("class_1/0002.cptn"), "{msg}");

    let err = load_dataset(dir.path().join("absent.txt")).unwrap_err();
    assert!(err.to_string().contains("absent.txt"), "{err}");
}

#[test]
fn ppm_quantizes_to_byte_levels_and_stays_in_range() {
    let ds = synth_dataset(&SynthConfig {
        classes: 2,
        samples_per_class: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let back = load_dataset(save_dataset(&ds, dir.path(), ImageFormat::Ppm).unwrap()).unwrap();
    for (a, b) in back.classes.iter().zip(&ds.classes) {
        for (x, y) in a.images.iter().zip(&b.images) {
            assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(x.max_abs_diff(y).unwrap() <= 0.5 / 255.0 + 1e-12);
        }
    }
    let img = read_ppm(b"P6\n# comment\n2 1\n255\n\x00\x80\xff\x10\x20\x30").unwrap();
    assert_eq!(img.shape(), &[3, 1, 2]);
    assert_eq!(img.data()[0], 0.0);
    assert_eq!(img.data()[4], 255.0 / 255.0);
    assert_eq!(read_ppm(&write_ppm(&img).unwrap()).unwrap(), img);
    assert!(read_ppm(b"P5\n1 1\n255\n\x00").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generators_are_pure(seed in any::<u64>(), family in 0usize..3, classes in 1usize..4, noise in 0.0f64..0.2) {
        let family = [Family::GaussianBlobs, Family::OrientedBars, Family::RingPatterns][family];
        let c = SynthConfig { family, classes, samples_per_class: 3, height: 12, width: 12, noise, seed, ..SynthConfig::default() };
        let a = synth_dataset(&c).unwrap();
        prop_assert_eq!(&a, &synth_dataset(&c).unwrap());
        prop_assert_eq!(a.num_samples(), classes * 3);
        for cls in &a.classes {
            for img in &cls.images {
                prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        let other = synth_dataset(&SynthConfig { seed: seed.wrapping_add(1), ..c }).unwrap();
        prop_assert_ne!(a, other);
    }
}
