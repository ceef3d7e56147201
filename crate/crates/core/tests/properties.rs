use flowr_core::baselines::{protonet_predict, prototype_update, PrototypeState};
use flowr_core::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use flowr_core::crp::{predictive_class_probs, ClassCounts, CrpParams};
use flowr_core::data::{parse_dataset, write_dataset_to, EmbeddingDataset, Sample};
use flowr_core::encoder::{AffineLayer, Encoder};
use flowr_core::gaussian::{batch_posterior, NoiseModel, SharedPrior};
use flowr_core::meta::MetaParams;
use flowr_core::metrics::{accuracy_suite, auroc, h_measure, roc_area, roc_curve, QueryKind, ScoreSet, ScoredQuery};
use flowr_core::model::ModelState;
use proptest::prelude::*;

fn scores() -> impl Strategy<Value = ScoreSet> {
    (
        prop::collection::vec(-20i32..20, 1..40),
        prop::collection::vec(-20i32..20, 1..40),
    )
        .prop_map(|(p, n)| {
            ScoreSet::new(
                p.into_iter().map(f64::from).collect(),
                n.into_iter().map(f64::from).collect(),
            )
            .unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_metrics_ignore_monotone_transforms(s in scores(), k in 0.1f64..3.0) {
        let t = ScoreSet::new(
            s.positives.iter().map(|x| (k * x / 10.0).exp()).collect(),
            s.negatives.iter().map(|x| (k * x / 10.0).exp()).collect(),
        ).unwrap();
        prop_assert_eq!(auroc(&s), auroc(&t));
        prop_assert!((h_measure(&s, 2.0, 2.0).unwrap() - h_measure(&t, 2.0, 2.0).unwrap()).abs() < 1e-9);
        prop_assert!((roc_area(&roc_curve(&s)) - auroc(&s)).abs() < 1e-12);
    }

    #[test]
    fn h_measure_is_bounded(s in scores()) {
        let h = h_measure(&s, 2.0, 2.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
    }

    #[test]
    fn crp_probs_sum_to_one(a in 0.0f64..0.95, b in 0.01f64..10.0, counts in prop::collection::vec(0u64..50, 0..20), mass in 0.0f64..0.1) {
        let p = CrpParams::with_b(a, b).unwrap().with_empty_class_mass(mass);
        let probs = predictive_class_probs(&ClassCounts::from_counts(counts), &p).unwrap();
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(probs.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn conditioning_order_does_not_matter(zs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..20), var in 0.1f64..10.0) {
        let prior = SharedPrior::centered(3, var).unwrap();
        let noise = NoiseModel::new(0.5).unwrap();
        let forward = batch_posterior(&prior, &zs, noise).unwrap();
        let mut rev = prior.stats.clone();
        for z in zs.iter().rev() {
            rev.condition_in_place(z, noise).unwrap();
        }
        prop_assert!((forward.lambda - rev.lambda).abs() <= 1e-9 * forward.lambda);
        for (a, b) in forward.q.iter().zip(&rev.q) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn predictions_are_distributions(labels in prop::collection::vec(0usize..4, 0..25), x in prop::collection::vec(-20.0f64..20.0, 2)) {
        let mut s = ModelState::empty(
            Encoder::identity(2),
            SharedPrior::centered(2, 4.0).unwrap(),
            CrpParams::with_b(0.5, 1.0).unwrap(),
            NoiseModel::new(0.5).unwrap(),
        ).unwrap();
        for (i, l) in labels.iter().enumerate() {
            let y = (*l).min(s.n_classes()) + 1;
            s.update(&[i as f64 - 10.0, *l as f64], y).unwrap();
        }
        let p = s.predict(&x).unwrap();
        prop_assert_eq!(p.probs.len(), s.n_classes() + 1);
        prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn protonet_probs_sum_to_one(points in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..10), z in prop::collection::vec(-5.0f64..5.0, 2)) {
        let mut s = PrototypeState::new(2);
        for p in &points {
            let next = s.n_classes() + 1;
            prototype_update(&mut s, p, next).unwrap();
        }
        let (probs, score) = protonet_predict(&s, &z).unwrap();
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(score >= 0.0);
    }

    #[test]
    fn dataset_round_trip(dim in 1usize..6, labels in prop::collection::vec(1usize..5, 0..30), seed in 0u64..1000) {
        let mut seen = 0;
        let samples: Vec<Sample> = labels.iter().enumerate().map(|(i, &l)| {
            let y = l.min(seen + 1);
            seen = seen.max(y);
            Sample::new(y, (0..dim).map(|k| ((i * 7 + k) as f32 * 0.25 + seed as f32) as f64).collect())
        }).collect();
        let ds = EmbeddingDataset::new(dim, samples).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, &ds).unwrap();
        prop_assert_eq!(buf.len(), 20 + ds.len() * (4 + 4 * dim));
        prop_assert_eq!(parse_dataset(&buf).unwrap(), ds);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(weights in prop::collection::vec(-1e3f64..1e3, 6), q0 in prop::collection::vec(-5.0f64..5.0, 2), ll in -5.0f64..5.0, rho in -5.0f64..5.0) {
        let enc = Encoder::Affine(AffineLayer::new(2, 2, weights[..4].to_vec(), weights[4..].to_vec()).unwrap());
        let mut p = MetaParams::small_context(enc, CrpParams::new(0.5, rho).unwrap(), NoiseModel::new(0.5).unwrap());
        p.q0 = q0;
        p.log_lambda0 = ll;
        let ck = Checkpoint::new(p, None, None);
        let back = decode_checkpoint(&encode_checkpoint(&ck)).unwrap();
        prop_assert_eq!(back.params.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        ck.params.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn accuracy_is_weighted_mean(kinds in prop::collection::vec((0u8..3, 0.0f64..1.0, any::<bool>()), 1..60), tau in 0.0f64..1.0) {
        let records: Vec<ScoredQuery> = kinds.iter().enumerate().map(|(i, &(k, s, right))| ScoredQuery {
            episode: 0,
            index: i,
            kind: [QueryKind::Support, QueryKind::NovelFirst, QueryKind::Incremental][k as usize],
            novelty_score: s,
            known_argmax: Some(1),
            true_label: if right { 1 } else { 2 },
        }).collect();
        let s = accuracy_suite(&records, tau).unwrap();
        let parts = [
            (s.support_accuracy, s.n_support),
            (s.incremental_accuracy, s.n_incremental),
            (s.novel_detection_accuracy, s.n_novel_first),
        ];
        let weighted: f64 = parts.iter().map(|(a, n)| a.unwrap_or(0.0) * *n as f64).sum::<f64>() / s.n_queries as f64;
        prop_assert!((s.accuracy.unwrap() - weighted).abs() < 1e-12);
    }
}
