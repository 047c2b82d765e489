use proptest::prelude::*;

use imbda::eval::{l1_distance, per_class_accuracies, per_class_mean_accuracy, pseudo_label_audit};
use imbda::kernel::Tensor;
use imbda::lsc::{calibrate, estimate_target_distribution, source_distribution, weighting_matrix, PseudoLabel};

fn probs(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, c).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn rows_and_metric() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (2usize..7).prop_flat_map(|c| {
        (
            Just(c),
            prop::collection::vec(probs(c), 1..20).prop_map(|rows| rows.concat()),
            prop::collection::vec(-3.0f64..3.0, c).prop_map(|e| e.into_iter().map(|x| 10f64.powf(x)).collect()),
        )
    })
}

fn labelled(c: usize, max: usize) -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
    (1..=max).prop_flat_map(move |n| (Just(c), prop::collection::vec(0..c, n), prop::collection::vec(0..c, n)))
}

proptest! {
    #[test]
    fn calibrated_confidence_never_exceeds_raw((c, values, metric) in rows_and_metric(), h_m in 0.5f64..4.0) {
        let n = values.len() / c;
        let table = Tensor::new(n, c, values).unwrap();
        let weights = weighting_matrix(&metric, h_m).unwrap();
        for (r, label) in calibrate(&table, &weights).unwrap().into_iter().enumerate() {
            let row = table.row(r);
            prop_assert_eq!(label.raw_confidence, row[label.raw_label]);
            prop_assert_eq!(label.calibrated_confidence, row[label.calibrated_label]);
            prop_assert!(label.calibrated_confidence <= label.raw_confidence);
            if !label.is_calibrated() {
                prop_assert_eq!(label.calibrated_confidence, label.raw_confidence);
            }
        }
    }

    #[test]
    fn estimated_distributions_are_positive_and_normalised(
        labels in prop::collection::vec(0usize..5, 1..60),
        confidences in prop::collection::vec(0.0f64..1.0, 60),
        threshold in 0.0f64..0.99,
    ) {
        let ps = source_distribution(&labels, 5).unwrap();
        prop_assert!((ps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(ps.iter().all(|&p| p > 0.0));
        let pseudo: Vec<PseudoLabel> = labels
            .iter()
            .zip(&confidences)
            .map(|(&y, &conf)| PseudoLabel { raw_label: y, raw_confidence: conf, calibrated_label: y, calibrated_confidence: conf })
            .collect();
        let pt = estimate_target_distribution(&pseudo, threshold, 5).unwrap();
        prop_assert!((pt.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(pt.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn mean_accuracy_ignores_class_relabeling((c, pred, truth) in labelled(5, 40), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let relabel = |v: &[usize]| v.iter().map(|&y| perm[y]).collect::<Vec<_>>();
        let a = per_class_mean_accuracy(&pred, &truth, c).unwrap();
        let b = per_class_mean_accuracy(&relabel(&pred), &relabel(&truth), c).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn per_class_accuracy_matches_a_direct_count((c, pred, truth) in labelled(4, 40)) {
        let acc = per_class_accuracies(&pred, &truth, c).unwrap();
        prop_assert_eq!(acc.len(), c);
        for (k, a) in acc.iter().enumerate() {
            let members: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == k).collect();
            match *a {
                None => prop_assert!(members.is_empty()),
                Some(a) => {
                    let hits = members.iter().filter(|&&i| pred[i] == k).count();
                    prop_assert_eq!(a, hits as f64 / members.len() as f64);
                }
            }
        }
    }

    #[test]
    fn audit_matches_brute_force(
        records in prop::collection::vec((0usize..4, 0usize..4, 0usize..4), 1..50),
    ) {
        let pseudo: Vec<PseudoLabel> = records
            .iter()
            .map(|&(raw, cal, _)| PseudoLabel { raw_label: raw, raw_confidence: 0.9, calibrated_label: cal, calibrated_confidence: 0.5 })
            .collect();
        let truth: Vec<usize> = records.iter().map(|r| r.2).collect();
        let audit = pseudo_label_audit(&pseudo, &truth).unwrap();

        let n = records.len() as f64;
        let raw = records.iter().filter(|r| r.0 == r.2).count() as f64 / n;
        let cal = records.iter().filter(|r| r.1 == r.2).count() as f64 / n;
        let flipped: Vec<_> = records.iter().filter(|r| r.0 != r.1).collect();
        prop_assert_eq!(audit.raw_accuracy, raw);
        prop_assert_eq!(audit.calibrated_accuracy, cal);
        prop_assert_eq!(audit.calibrated_proportion, flipped.len() as f64 / n);
        if flipped.is_empty() {
            prop_assert!(audit.subset_raw_accuracy.is_none() && audit.subset_calibrated_accuracy.is_none());
        } else {
            let m = flipped.len() as f64;
            prop_assert_eq!(audit.subset_raw_accuracy, Some(flipped.iter().filter(|r| r.0 == r.2).count() as f64 / m));
            prop_assert_eq!(audit.subset_calibrated_accuracy, Some(flipped.iter().filter(|r| r.1 == r.2).count() as f64 / m));
        }
    }

    #[test]
    fn l1_distance_is_a_metric(a in probs(4), b in probs(4), c in probs(4)) {
        prop_assert_eq!(l1_distance(&a, &a), 0.0);
        prop_assert!((l1_distance(&a, &b) - l1_distance(&b, &a)).abs() < 1e-15);
        prop_assert!(l1_distance(&a, &c) <= l1_distance(&a, &b) + l1_distance(&b, &c) + 1e-12);
        prop_assert!(l1_distance(&a, &b) <= 2.0 + 1e-12);
    }
}

#[test]
fn mismatched_inputs_are_errors() {
    assert!(per_class_accuracies(&[0, 1], &[0], 2).is_err());
    assert!(pseudo_label_audit(&[], &[]).is_err());
    assert!(calibrate(&Tensor::new(1, 3, vec![0.2, 0.3, 0.5]).unwrap(), &[1.0, 1.0]).is_err());
    assert!(weighting_matrix(&[1.0, 0.0], 1.5).is_err());
    assert!(weighting_matrix(&[1.0, 1.0], 0.0).is_err());
}
