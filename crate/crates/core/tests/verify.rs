use cplsr_core::data::{synth_dataset, Dataset, SynthConfig};
use cplsr_core::episode::{
    episode_loss, proto_logits, sample_episode, sample_from_sizes, EpisodeConfig, Metric, ProtoHead,
};
use cplsr_core::model::{AdapterKind, CpVariant, VitConfig, VitModel};
use cplsr_core::tensor::{GradFault, RngStream, Tensor};
use cplsr_core::verify::{
    flop_count, grad_check_model, grad_check_with_fault, proto_oracle, symbolic_block_macs, GradCheckOptions,
};
use proptest::prelude::*;

fn geometries() -> Vec<(&'static str, VitConfig)> {
    let toy = VitConfig::toy();
    vec![
        ("toy", toy.clone()),
        ("vit-s16", VitConfig::vit_s16()),
        (
            "toy-qk",
            VitConfig {
                cp_variant: CpVariant::QkBilinear,
                ..toy.clone()
            },
        ),
        (
            "wide-image",
            VitConfig {
                image_width: 48,
                heads: 8,
                ..toy.clone()
            },
        ),
        (
            "fine-patches",
            VitConfig {
                patch: 4,
                depth: 2,
                mlp_dim: 96,
                ..toy.clone()
            },
        ),
        (
            "single-head",
            VitConfig {
                heads: 1,
                dim: 24,
                mlp_dim: 40,
                prompt_len: 3,
                ..toy.clone()
            },
        ),
        (
            "grey",
            VitConfig {
                channels: 1,
                image_height: 24,
                image_width: 24,
                patch: 6,
                ..toy
            },
        ),
    ]
}

#[test]
fn symbolic_and_instrumented_counts_agree() {
    for (name, cfg) in geometries() {
        for kind in [AdapterKind::Frozen, AdapterKind::Cp, AdapterKind::Prompts] {
            let r = flop_count(&cfg, kind).unwrap_or_else(|e| panic!("{name} {kind}: {e}"));
            let l = cfg.depth as u64;
            assert_eq!(r.instrumented.total(), l * r.per_block.total(), "{name} {kind}");
            assert_eq!(r.instrumented_patch_embed, r.patch_embed, "{name} {kind}");
            assert_eq!(r.model_total, r.terms.total() + r.patch_embed, "{name} {kind}");
            let expected_len = if kind == AdapterKind::Prompts {
                cfg.tokens() + cfg.prompt_len
            } else {
                cfg.tokens()
            };
            assert_eq!(r.seq_lens, vec![expected_len; cfg.depth], "{name} {kind}");
        }
    }
}

#[test]
fn totals_follow_the_asymptotic_terms() {
    for (name, cfg) in geometries() {
        let (l, a, d, dh, m) = (
            cfg.depth as u64,
            cfg.tokens() as u64,
            cfg.dim as u64,
            cfg.head_dim() as u64,
            cfg.mlp_dim as u64,
        );
        let frozen = flop_count(&cfg, AdapterKind::Frozen).unwrap();
        // Score product plus value mixing, q/k/v plus output projection, two MLP layers.
        assert_eq!(frozen.terms.token_quadratic, l * 2 * d * a * a, "{name}");
        assert_eq!(frozen.terms.token_linear, l * 4 * a * d * d, "{name}");
        assert_eq!(frozen.terms.mlp, l * 2 * a * d * m, "{name}");
        let cp = flop_count(&cfg, AdapterKind::Cp).unwrap();
        let extra_quadratic = if cfg.cp_variant == CpVariant::AdditiveBilinear {
            d * a * a
        } else {
            0
        };
        assert_eq!(
            cp.terms.token_quadratic,
            frozen.terms.token_quadratic + l * extra_quadratic,
            "{name}"
        );
        assert_eq!(
            cp.terms.token_linear,
            frozen.terms.token_linear + l * a * d * dh,
            "{name}"
        );
        assert_eq!(cp.terms.mlp, frozen.terms.mlp, "{name}");
    }
}

#[test]
fn token_counts_for_both_geometries() {
    for (cfg, a) in [(VitConfig::vit_s16(), 197), (VitConfig::toy(), 17)] {
        assert_eq!(cfg.tokens(), a);
        assert_eq!(flop_count(&cfg, AdapterKind::Cp).unwrap().seq_lens, vec![a; cfg.depth]);
        let prompts = VitConfig { prompt_len: 2, ..cfg };
        assert_eq!(
            flop_count(&prompts, AdapterKind::Prompts).unwrap().seq_lens,
            vec![a + 2; prompts.depth]
        );
    }
}

/// Oracle inputs (queries, prototypes, labels) plus the engine's support and query tensors.
type Instance = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>, Tensor<f64>, Tensor<f64>);

fn random_instance(rng: &mut RngStream, shots: usize, d: usize) -> Instance {
    let ways = 5;
    let queries = 3;
    let support: Tensor<f64> = rng.gaussian_tensor(&[ways * shots, d], 1.0);
    let query: Tensor<f64> = rng.gaussian_tensor(&[ways * queries, d], 1.0);
    let labels: Vec<usize> = (0..ways * queries).map(|i| i / queries).collect();
    let protos: Vec<Vec<f64>> = (0..ways)
        .map(|c| {
            (0..d)
                .map(|j| (0..shots).map(|s| support.row(c * shots + s)[j]).sum::<f64>() / shots as f64)
                .collect()
        })
        .collect();
    let qs: Vec<Vec<f64>> = (0..ways * queries).map(|i| query.row(i).to_vec()).collect();
    (qs, protos, labels, support, query)
}

#[test]
fn episodic_loss_matches_the_brute_force_oracle() {
    let mut rng = RngStream::new(2024);
    let mut worst = 0.0f64;
    for instance in 0..100 {
        let shots = if instance % 2 == 0 { 1 } else { 5 };
        let metric = if instance % 4 < 2 {
            Metric::SqEuclidean
        } else {
            Metric::Cosine
        };
        let tau = if metric == Metric::Cosine { 0.1 } else { 1.0 };
        let (qs, protos, labels, support, query) = random_instance(&mut rng, shots, 8);
        let support_labels: Vec<usize> = (0..5 * shots).map(|i| i / shots).collect();
        let engine_protos = cplsr_core::episode::compute_prototypes(&support, &support_labels).unwrap();
        let logits = proto_logits(&query, &engine_protos, metric, tau).unwrap();
        let engine = episode_loss(&logits, &labels).unwrap();
        let oracle = proto_oracle(&qs, &protos, &labels, metric, tau);
        worst = worst.max((engine - oracle).abs());
    }
    assert!(worst < 1e-9, "largest gap {worst:e}");
    let uniform = episode_loss(&Tensor::<f64>::zeros(&[5, 5]), &[0, 1, 2, 3, 4]).unwrap();
    assert!((uniform - 5f64.ln()).abs() < 1e-12);
}

fn small_cfg(variant: CpVariant) -> VitConfig {
    VitConfig {
        image_height: 16,
        image_width: 16,
        patch: 8,
        dim: 16,
        heads: 2,
        depth: 2,
        mlp_dim: 24,
        cp_variant: variant,
        init_seed: 6,
        ..VitConfig::toy()
    }
}

fn small_base() -> Dataset {
    synth_dataset(&SynthConfig {
        classes: 4,
        samples_per_class: 6,
        height: 16,
        width: 16,
        seed: 6,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn perturb(model: &mut VitModel<f64>, seed: u64, std: f64) {
    let mut rng = RngStream::new(seed);
    for p in model.trainable_params_mut() {
        for v in p.data_mut() {
            *v += std * rng.gaussian();
        }
    }
}

#[test]
fn small_models_pass_at_the_release_tolerance() {
    let base = small_base();
    let episode = sample_episode(&base, &EpisodeConfig::new(3, 1, 1), &mut RngStream::new(1)).unwrap();
    let head = ProtoHead::default();
    for kind in [AdapterKind::Cp, AdapterKind::Prompts] {
        for variant in [CpVariant::AdditiveBilinear, CpVariant::QkBilinear] {
            let model = VitModel::<f64>::with_kind(small_cfg(variant), kind).unwrap();
            let r = grad_check_model(&model, &base, &episode, &head, &GradCheckOptions::default()).unwrap();
            assert!(
                r.passed,
                "{kind} {variant:?}: max {:e}, failures {:?}",
                r.max_rel_err, r.failures
            );
            assert_eq!(r.checked, model.trainable_scalar_count());
        }
    }
}

#[test]
fn trained_point_passes_with_a_wider_step() {
    // Away from the initial point several entries have gradients near 1e-6,
    // where a 1e-5 step is dominated by rounding in the loss difference.
    let base = small_base();
    let episode = sample_episode(&base, &EpisodeConfig::new(3, 1, 1), &mut RngStream::new(2)).unwrap();
    for (variant, metric) in [
        (CpVariant::AdditiveBilinear, Metric::SqEuclidean),
        (CpVariant::QkBilinear, Metric::Cosine),
    ] {
        let mut model = VitModel::<f64>::with_cp(small_cfg(variant)).unwrap();
        perturb(&mut model, 3, 0.05);
        let head = ProtoHead {
            metric,
            temperature: 0.5,
        };
        let opts = GradCheckOptions {
            step: 1e-4,
            ..GradCheckOptions::default()
        };
        let r = grad_check_model(&model, &base, &episode, &head, &opts).unwrap();
        assert!(
            r.passed,
            "{variant:?}: max {:e}, failures {:?}",
            r.max_rel_err, r.failures
        );
    }
}

#[test]
fn faulty_backward_is_caught() {
    let base = small_base();
    let episode = sample_episode(&base, &EpisodeConfig::new(3, 1, 1), &mut RngStream::new(1)).unwrap();
    let mut model = VitModel::<f64>::with_cp(small_cfg(CpVariant::AdditiveBilinear)).unwrap();
    perturb(&mut model, 4, 0.05);
    let r = grad_check_with_fault(
        &model,
        &base,
        &episode,
        &ProtoHead::default(),
        &GradCheckOptions::default(),
        GradFault::SoftmaxScaled,
    )
    .unwrap();
    assert!(!r.passed);
    assert!(!r.failures.is_empty());
}

#[test]
fn frozen_model_has_nothing_to_check() {
    let base = small_base();
    let episode = sample_episode(&base, &EpisodeConfig::new(3, 1, 1), &mut RngStream::new(1)).unwrap();
    let model = VitModel::<f64>::frozen(small_cfg(CpVariant::AdditiveBilinear)).unwrap();
    let err = grad_check_model(
        &model,
        &base,
        &episode,
        &ProtoHead::default(),
        &GradCheckOptions::default(),
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn additive_cp_doubles_the_score_product(patches in 1usize..300, heads in 1usize..13, dh in 1usize..65, depth in 1usize..13) {
        let cfg = VitConfig {
            image_height: patches,
            image_width: 1,
            patch: 1,
            dim: heads * dh,
            heads,
            depth,
            ..VitConfig::toy()
        };
        let cp = symbolic_block_macs(&cfg, AdapterKind::Cp);
        let base = symbolic_block_macs(&cfg, AdapterKind::Frozen);
        prop_assert_eq!(cp.score_product(), 2 * base.score_product());
        prop_assert_eq!(base.score_product(), (cfg.tokens() * cfg.tokens() * cfg.dim) as u64);
    }

    #[test]
    fn oracle_agrees_on_arbitrary_episodes(seed in any::<u64>(), shots in 1usize..6, d in 1usize..10) {
        let mut rng = RngStream::new(seed);
        let (qs, protos, labels, support, query) = random_instance(&mut rng, shots, d);
        let support_labels: Vec<usize> = (0..5 * shots).map(|i| i / shots).collect();
        let p = cplsr_core::episode::compute_prototypes(&support, &support_labels).unwrap();
        let engine = episode_loss(&proto_logits(&query, &p, Metric::SqEuclidean, 1.0).unwrap(), &labels).unwrap();
        prop_assert!((engine - proto_oracle(&qs, &protos, &labels, Metric::SqEuclidean, 1.0)).abs() < 1e-9);
        let ep = sample_from_sizes(&[shots + 3; 7], &EpisodeConfig::new(5, shots, 3), &mut rng).unwrap();
        prop_assert_eq!(ep.query_labels(), labels);
    }
}
