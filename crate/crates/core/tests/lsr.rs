mod common;

use common::{bits, cosine_distance, plain_losses};
use cplsr_core::data::{synth_dataset, Dataset, SynthConfig};
use cplsr_core::episode::{sample_from_sizes, train, EpisodeConfig, TrainConfig};
use cplsr_core::lsr::{
    expand_episode_sst, generate_pseudo_classes, merge_pseudo, rotate90, save_pseudo_batch, LsrConfig, PnSchedule,
};
use cplsr_core::model::{VitConfig, VitModel};
use cplsr_core::tensor::{RngStream, StreamPurpose, Tensor};
use proptest::prelude::*;

fn small_data(name: &str, classes: usize, first_class_id: u32) -> Dataset {
    synth_dataset(&SynthConfig {
        name: name.into(),
        classes,
        samples_per_class: 10,
        height: 16,
        width: 16,
        first_class_id,
        seed: 8,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_model() -> VitModel<f64> {
    VitModel::with_cp(VitConfig {
        image_height: 16,
        image_width: 16,
        patch: 8,
        dim: 16,
        heads: 2,
        depth: 2,
        mlp_dim: 24,
        init_seed: 4,
        ..VitConfig::toy()
    })
    .unwrap()
}

#[test]
fn no_augmentation_reproduces_plain_training_bitwise() {
    let base = small_data("b", 6, 0);
    let val = small_data("v", 5, 100);
    let cfg = TrainConfig {
        episodes: 8,
        val_episodes: 4,
        val_every: 4,
        episode: EpisodeConfig::new(3, 1, 3),
        val_queries: 3,
        seed: 21,
        ..TrainConfig::desk()
    };
    let expected = plain_losses(small_model(), &base, &cfg);
    let variants = [
        LsrConfig::none(),
        // Pseudo-class settings are inert while pn_episodes is zero.
        LsrConfig {
            epsilon: 0.5,
            n0: 7,
            min_sep: 1.5,
            pn_schedule: PnSchedule::Interleaved,
            ..LsrConfig::none()
        },
    ];
    for lsr in variants {
        let out = train(small_model(), &base, &val, &cfg, &lsr, |_| {}).unwrap();
        let got: Vec<f64> = out.log.iter().map(|r| r.loss).collect();
        assert_eq!(bits(&got), bits(&expected));
        assert!(out.log.iter().all(|r| r.pseudo_classes == 0 && r.ways == 3));
    }
}

#[test]
fn impossible_separation_is_reported() {
    // In one dimension every direction is parallel to one of the two prototypes.
    let base = Tensor::<f64>::from_rows(&[&[1.0], &[-2.0]]).unwrap();
    let cfg = LsrConfig {
        min_sep: 0.5,
        max_attempts: 50,
        ..LsrConfig::default()
    };
    let err = generate_pseudo_classes(&base, &cfg, &mut RngStream::new(0), 0).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(err.to_string().contains("min_sep"), "{err}");
    let zero = Tensor::<f64>::zeros(&[2, 3]);
    assert!(generate_pseudo_classes(&zero, &LsrConfig::default(), &mut RngStream::new(0), 0).is_err());
}

#[test]
fn config_contracts() {
    assert!(LsrConfig::default().validate(1000).is_ok());
    assert_eq!(LsrConfig::default().validate(50).unwrap_err().exit_code(), 2);
    for bad in [
        LsrConfig {
            sst_rotations: vec![45],
            ..LsrConfig::default()
        },
        LsrConfig {
            sst_rotations: vec![90, 90],
            ..LsrConfig::default()
        },
        LsrConfig {
            min_sep: 2.0,
            ..LsrConfig::default()
        },
        LsrConfig {
            epsilon: 0.0,
            ..LsrConfig::default()
        },
        LsrConfig {
            n0: 0,
            ..LsrConfig::default()
        },
    ] {
        assert!(bad.validate(1000).is_err(), "{bad:?}");
    }
    assert_eq!(LsrConfig::default().quarter_turns().unwrap(), vec![1, 2, 3]);
}

#[test]
fn merge_without_pseudo_is_identity_and_with_pseudo_appends_classes() {
    let support = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]).unwrap();
    let labels = vec![0, 1, 2];
    let (same, same_labels) = merge_pseudo(&support, &labels, None).unwrap();
    assert_eq!((same, same_labels), (support.clone(), labels.clone()));
    let cfg = LsrConfig {
        n0: 2,
        members_per_pseudo: 3,
        ..LsrConfig::default()
    };
    let batch = generate_pseudo_classes(&support, &cfg, &mut RngStream::new(1), 0).unwrap();
    let (merged, merged_labels) = merge_pseudo(&support, &labels, Some(&batch)).unwrap();
    assert_eq!(merged.shape(), &[9, 2]);
    assert_eq!(merged_labels, vec![0, 1, 2, 3, 3, 3, 4, 4, 4]);
}

#[test]
fn pseudo_batches_export_with_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let base: Tensor<f32> = RngStream::new(3).gaussian_tensor(&[5, 8], 1.0);
    let cfg = LsrConfig::default();
    let batch =
        generate_pseudo_classes(&base, &cfg, &mut RngStream::new(3).derive(StreamPurpose::Pseudo, 7), 7).unwrap();
    let sidecar = save_pseudo_batch(&batch, &cfg, dir.path().join("ep7")).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sidecar).unwrap()).unwrap();
    assert_eq!(meta["episode"], 7);
    assert_eq!(meta["n0"], 2);
    let protos: Tensor<f32> = cplsr_core::tensor::io::load_tensor(dir.path().join("ep7.prototypes.cptn")).unwrap();
    assert_eq!(protos, batch.prototypes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn four_quarter_turns_are_identity(seed in any::<u64>(), c in 1usize..4, n in 1usize..9) {
        let img: Tensor<f64> = RngStream::new(seed).gaussian_tensor(&[c, n, n], 1.0);
        let mut x = img.clone();
        for _ in 0..4 {
            x = rotate90(&x, 1).unwrap();
        }
        prop_assert_eq!(x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), img.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let single: Tensor<f32> = img.cast();
        prop_assert_eq!(rotate90(&rotate90(&single, 1).unwrap(), 3).unwrap(), single.clone());
        prop_assert_eq!(rotate90(&rotate90(&single, 2).unwrap(), 1).unwrap(), rotate90(&single, 3).unwrap());
    }

    #[test]
    fn expansion_keeps_original_pairs(seed in any::<u64>(), ways in 2usize..6, shots in 1usize..3, queries in 1usize..4, turns in prop::sample::subsequence(vec![1u8, 2, 3], 0..=3)) {
        let ep = sample_from_sizes(&vec![shots + queries + 2; ways + 2], &EpisodeConfig::new(ways, shots, queries), &mut RngStream::new(seed)).unwrap();
        let big = expand_episode_sst(&ep, &turns).unwrap();
        prop_assert_eq!(big.ways(), ways * (turns.len() + 1));
        prop_assert_eq!(&big.support[..ep.support.len()], ep.support.as_slice());
        prop_assert_eq!(&big.query[..ep.query.len()], ep.query.as_slice());
        for it in big.items() {
            prop_assert_eq!(big.classes[it.label].class, it.class);
            prop_assert_eq!(big.classes[it.label].rotation, it.rotation);
        }
        for label in 0..big.ways() {
            prop_assert_eq!(big.support_labels().iter().filter(|&&l| l == label).count(), shots);
            prop_assert_eq!(big.query_labels().iter().filter(|&&l| l == label).count(), queries);
        }
    }

    #[test]
    fn pseudo_prototypes_keep_their_distance(seed in any::<u64>(), n in 2usize..8, d in 3usize..12, min_sep in 0.05f64..0.5, n0 in 1usize..4) {
        let base: Tensor<f64> = RngStream::new(seed).gaussian_tensor(&[n, d], 1.0);
        let cfg = LsrConfig { min_sep, n0, members_per_pseudo: 4, max_attempts: 5000, ..LsrConfig::default() };
        let stream = RngStream::new(seed).derive(StreamPurpose::Pseudo, 3);
        match generate_pseudo_classes(&base, &cfg, &mut stream.clone(), 3) {
            Ok(batch) => {
                prop_assert_eq!(batch.prototypes.shape(), &[n0, d]);
                prop_assert_eq!(batch.members.shape(), &[n0 * 4, d]);
                for p in 0..n0 {
                    for b in 0..n {
                        prop_assert!(cosine_distance(batch.prototypes.row(p), base.row(b)) >= min_sep);
                    }
                    for m in 0..4 {
                        let gap: f64 = batch.members.row(p * 4 + m).iter().zip(batch.prototypes.row(p)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                        prop_assert!(gap <= cfg.epsilon * ((d as f64).sqrt() + 8.0));
                    }
                }
                let again = generate_pseudo_classes(&base, &cfg, &mut stream.clone(), 3).unwrap();
                prop_assert_eq!(batch, again);
            }
            Err(e) => prop_assert_eq!(e.exit_code(), 4),
        }
    }

    #[test]
    fn schedules_activate_exactly_pn_episodes(total in 1usize..400, frac in 0.0f64..=1.0, interleaved in any::<bool>()) {
        let pn = ((total as f64) * frac) as usize;
        let cfg = LsrConfig {
            pn_episodes: pn,
            pn_schedule: if interleaved { PnSchedule::Interleaved } else { PnSchedule::First },
            ..LsrConfig::default()
        };
        prop_assert_eq!((0..total).filter(|&t| cfg.pseudo_active(t, total)).count(), pn);
    }
}
