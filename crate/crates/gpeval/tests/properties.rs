//! Property tests over the library invariants that hold for all inputs, not
//! just the worked examples.

use proptest::prelude::*;

use gpeval::baselines::{acquisition_from_surrogate, SurrogateModel};
use gpeval::gp::{
    FeatureVector, GpInput, GpPosterior, GpPrior, KernelSpec, MaternNu, MeanSpec, Observations,
};
use gpeval::metrics::topic_entropy;
use gpeval::selection::{select_sources, spearman, ModelProfile, SelectionStrategy};
use gpeval::transfer::{fuse_embeddings, EncoderSpec};

fn fv(v: Vec<f64>) -> FeatureVector {
    FeatureVector::new(v).unwrap()
}

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Conditioning on a permutation of the same observations yields the
    /// same predictions.
    #[test]
    fn posterior_is_order_invariant(
        points in prop::collection::vec((finite_vec(3), -2.0..2.0f64), 2..6),
        probe in finite_vec(3),
    ) {
        let prior = GpPrior::new(
            MeanSpec::Constant(0.2),
            KernelSpec::Matern { nu: MaternNu::ThreeHalves, lengthscale: 1.0, signal_variance: 1.0 },
            0.1,
        ).unwrap();
        let build = |pts: &[(Vec<f64>, f64)]| {
            let inputs = pts.iter().enumerate()
                .map(|(i, (p, _))| GpInput::new(format!("i{i}"), fv(p.clone())))
                .collect();
            let values = pts.iter().map(|(_, y)| *y).collect();
            GpPosterior::condition(prior.clone(), Observations::new(inputs, values).unwrap()).unwrap()
        };
        let fwd = build(&points);
        let mut reversed = points.clone();
        reversed.reverse();
        let rev = build(&reversed);
        let probe = GpInput::new("probe", fv(probe));
        let (m1, v1) = fwd.predict(&probe, &probe).unwrap();
        let (m2, v2) = rev.predict(&probe, &probe).unwrap();
        prop_assert!((m1 - m2).abs() <= 1e-8 * m1.abs().max(1.0));
        prop_assert!((v1 - v2).abs() <= 1e-8 * v1.abs().max(1.0));
    }

    /// Conditioning never increases the marginal variance at any probe.
    #[test]
    fn variance_is_monotone_in_observations(
        points in prop::collection::vec((finite_vec(2), 0.0..1.0f64), 1..6),
        probe in finite_vec(2),
    ) {
        let prior = GpPrior::new(MeanSpec::Constant(0.0), KernelSpec::matern_default(), 0.05).unwrap();
        let probe = GpInput::new("probe", fv(probe));
        let mut post = GpPosterior::condition(prior, Observations::empty()).unwrap();
        let mut last = post.variance(&probe).unwrap();
        for (i, (p, y)) in points.into_iter().enumerate() {
            post = post.extend(GpInput::new(format!("p{i}"), fv(p)), y).unwrap();
            let v = post.variance(&probe).unwrap();
            prop_assert!(v <= last + 1e-7, "variance grew {last} -> {v}");
            last = v;
        }
    }

    /// Spearman correlation is invariant under strictly monotone transforms
    /// of either argument.
    #[test]
    fn spearman_monotone_invariance(
        base in prop::collection::vec(-100.0..100.0f64, 3..12),
        scale in 0.1..5.0f64,
    ) {
        let other: Vec<f64> = base.iter().rev().cloned().collect();
        let (r1, d1) = spearman(&base, &other).unwrap();
        let transformed: Vec<f64> = base.iter().map(|v| (scale * v).exp()).collect();
        let (r2, d2) = spearman(&transformed, &other).unwrap();
        prop_assert_eq!(d1, d2);
        if !d1 {
            prop_assert!((r1 - r2).abs() < 1e-9);
        }
    }

    /// The target never appears in a selection result.
    #[test]
    fn selection_excludes_target(
        features in prop::collection::vec(finite_vec(3), 4..10),
        target_idx_seed in 0usize..100,
    ) {
        let profiles: Vec<ModelProfile> = features.iter().enumerate()
            .map(|(i, f)| ModelProfile { model_id: format!("m{i}"), features: fv(f.clone()) })
            .collect();
        let target = format!("m{}", target_idx_seed % profiles.len());
        for strategy in [
            SelectionStrategy::LooPrior { spearman_threshold: None },
            SelectionStrategy::Mahalanobis { top_k: 2, ood_alpha: None },
            SelectionStrategy::MardiaTest { top_k: 2 },
        ] {
            let result = select_sources(&strategy, &profiles, None, &target).unwrap();
            prop_assert!(!result.selected.contains(&target));
        }
    }

    /// Fused embeddings are linear in each argument and idempotent when the
    /// arguments coincide.
    #[test]
    fn fusion_linearity_and_idempotence(
        q in finite_vec(4),
        t in finite_vec(4),
        alpha in 0.0..=1.0f64,
    ) {
        let q = fv(q);
        let t = fv(t);
        let fused = fuse_embeddings(&q, &t, alpha).unwrap();
        for ((f, a), b) in fused.as_slice().iter().zip(q.as_slice()).zip(t.as_slice()) {
            prop_assert!((f - (alpha * a + (1.0 - alpha) * b)).abs() < 1e-12);
        }
        let same = fuse_embeddings(&q, &q, alpha).unwrap();
        for (s, a) in same.as_slice().iter().zip(q.as_slice()) {
            prop_assert!((s - a).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    /// Encoder outputs always sum to zero across their own coordinates.
    #[test]
    fn encoder_centering_universal(raw in prop::collection::vec(-50.0..50.0f64, 2..24)) {
        let spec = EncoderSpec::raw(raw.len());
        let phi = spec.encode(&fv(raw)).unwrap();
        let sum: f64 = phi.as_slice().iter().sum();
        prop_assert!(sum.abs() < 1e-9, "coordinate sum {sum}");
    }

    /// Acquisition distributions are proper distributions with full support.
    #[test]
    fn acquisition_distribution_is_proper(
        weights in prop::collection::vec(-3.0..3.0f64, 1..4),
        n in 2usize..12,
    ) {
        let mut w = weights;
        w.push(0.0); // bias
        let model = SurrogateModel {
            weights: w,
            regularization: 0.1,
            degenerate: None,
            converged: true,
            iterations: 1,
        };
        let dim = model.weights.len() - 1;
        let candidates: Vec<(String, FeatureVector)> = (0..n)
            .map(|i| (format!("c{i}"), fv((0..dim).map(|j| ((i + j) as f64).sin()).collect())))
            .collect();
        let floor = 0.5 / (n as f64 * 10.0);
        let dist = acquisition_from_surrogate(&model, &candidates, floor).unwrap();
        let total: f64 = dist.probabilities.values().sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
        prop_assert!(dist.probabilities.values().all(|p| *p > 0.0));
    }

    /// Topic entropy is 1 exactly on uniform assignments over >= 2 topics
    /// and always within [0, 1].
    #[test]
    fn entropy_bounds_and_uniform_maximum(
        n_topics in 2usize..8,
        repeats in 1usize..6,
        extra in prop::collection::vec(0usize..8, 0..12),
    ) {
        let uniform: Vec<String> = (0..n_topics)
            .flat_map(|t| std::iter::repeat(format!("t{t}")).take(repeats))
            .collect();
        let h = topic_entropy(&uniform).unwrap();
        prop_assert!((h - 1.0).abs() < 1e-12);
        let skewed: Vec<String> = extra.iter().map(|t| format!("t{t}")).chain(uniform).collect();
        let h = topic_entropy(&skewed).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&h));
    }
}
