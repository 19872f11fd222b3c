use proptest::prelude::*;
use unlearn_core::factworld::{EncodedSample, Split, Source, Variant};
use unlearn_core::lm::{param_arith, ModelConfig, ModelParams};
use unlearn_core::metrics::{frt, model_utility, ngram_entropy, rouge_l_recall, token_f1};
use unlearn_core::sensitivity::{normalize, profile_from_lambda, spearman, subject_sensitivity_ratio, top_k_sensitive};

fn tokens(max: usize) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..6, 0..max)
}

fn positive(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..1e3, n)
}

proptest! {
    #[test]
    fn rouge_recall_is_bounded_and_reflexive(a in tokens(12), b in tokens(12)) {
        let r = rouge_l_recall(&a, &b);
        prop_assert!((0.0..=1.0).contains(&r));
        if !a.is_empty() {
            prop_assert_eq!(rouge_l_recall(&a, &a), 1.0);
        }
    }

    #[test]
    fn token_f1_is_symmetric_and_bounded(a in tokens(10), b in tokens(10)) {
        let f = token_f1(&a, &b);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((f - token_f1(&b, &a)).abs() < 1e-15);
    }

    #[test]
    fn entropy_is_at_most_log_of_ngram_count(texts in prop::collection::vec(tokens(10), 1..5), n in 1usize..4) {
        let h = ngram_entropy(&texts, n);
        let count: usize = texts.iter().map(|t| t.len().saturating_sub(n - 1)).sum();
        prop_assert!(h >= 0.0);
        if count > 0 {
            prop_assert!(h <= (count as f64).log2() + 1e-12);
        }
    }

    #[test]
    fn harmonic_mean_lies_between_min_and_arithmetic_mean(v in prop::collection::vec(1e-3f64..1.0, 1..9)) {
        let (mu, _) = model_utility(&v);
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!(mu >= min - 1e-12 && mu <= mean + 1e-12);
    }

    #[test]
    fn frt_grows_as_forget_scores_fall(mu in 0.01f64..1.0, rg in 0.01f64..1.0, pr in 0.01f64..1.0, s in 0.1f64..0.99) {
        let a = frt(mu, rg, pr).unwrap();
        let b = frt(mu, rg * s, pr * s).unwrap();
        prop_assert!(b > a);
    }

    #[test]
    fn top_k_picks_the_largest_and_ignores_monotone_maps(lambda in positive(1..30), k in 0.05f64..1.0) {
        let idx = top_k_sensitive(&lambda, k);
        prop_assert!(!idx.is_empty() && idx.len() <= lambda.len());
        let chosen_min = idx.iter().map(|&i| lambda[i]).fold(f64::INFINITY, f64::min);
        let rest_max = (0..lambda.len()).filter(|i| !idx.contains(i)).map(|i| lambda[i]).fold(0.0, f64::max);
        prop_assert!(chosen_min >= rest_max);
        let logged: Vec<f64> = lambda.iter().map(|x| x.ln()).collect();
        prop_assert_eq!(top_k_sensitive(&logged, k), idx);
    }

    #[test]
    fn normalised_sensitivity_peaks_at_one(lambda in positive(1..30)) {
        let n = normalize(&lambda);
        let max = n.iter().copied().fold(0.0, f64::max);
        prop_assert!((max - 1.0).abs() < 1e-12);
        prop_assert!(n.iter().all(|&x| x > 0.0 && x <= 1.0));
    }

    #[test]
    fn spearman_is_bounded_and_rank_based(x in positive(3..20), y in positive(3..20)) {
        let n = x.len().min(y.len());
        let (x, y) = (&x[..n], &y[..n]);
        if let Some(r) = spearman(x, y) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            let cubed: Vec<f64> = x.iter().map(|v| v.powi(3)).collect();
            prop_assert!((spearman(&cubed, y).unwrap() - r).abs() < 1e-12);
        }
        if let Some(r) = spearman(x, x) {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn subject_ratio_scales_with_subject_sensitivity(other in 0.01f64..1.0, factor in 1.01f64..10.0, len in 3usize..10) {
        let mut lambda = vec![other; len];
        lambda[1] = other * factor;
        let sample = EncodedSample {
            id: "s".into(),
            source: Source::Main,
            split: Split::Forget,
            variant: Variant::Base,
            question: vec![5; len],
            answer: vec![6, 2],
            fact: 0,
            subject_span: Some((1, 2)),
            paraphrased: vec![],
            perturbed: vec![],
            distractors: vec![],
        };
        let profile = profile_from_lambda("s", lambda, 0.4, 0);
        let r = subject_sensitivity_ratio(&[profile], &[sample]).unwrap();
        prop_assert!((r - factor).abs() < 1e-9 * factor);
    }
}

fn model(seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        context_len: 8,
        d_ff: 8,
        ..Default::default()
    };
    ModelParams::init(cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn parameter_arithmetic_fixed_points(seed in 0u64..1000, a in -3.0f64..3.0) {
        let p = model(seed);
        let q = model(seed + 1);
        prop_assert_eq!(param_arith(1.0, &p, 0.0, &q).unwrap().content_hash(), p.content_hash());
        let back = param_arith(1.0, &param_arith(1.0, &p, a, &q).unwrap(), -a, &q).unwrap();
        for (x, y) in back.tensors().zip(p.tensors()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }
}
