use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("c{i}")).collect()
}

fn three() -> Vec<String> {
    THREE_CLASS_ROWS.iter().map(|s| s.to_string()).collect()
}

#[test]
fn perfect_and_constant_predictors() {
    let truth: Vec<usize> = (0..30).map(|i| i / 10).collect();
    let cm = ConfusionMatrix::from_predictions(names(3), &truth, &truth).unwrap();
    assert_eq!((cm.trace(), cm.total()), (30, 30));
    assert!((0..3).all(|i| cm.get(i, i) == 10));
    let zeros = vec![0; 30];
    let cm = ConfusionMatrix::from_predictions(names(3), &truth, &zeros).unwrap();
    assert_eq!(cm.col_total(0), 30);
    assert_eq!(cm.col_total(1) + cm.col_total(2), 0);
    let r = metrics(&cm).unwrap();
    assert_eq!(r.precision_undefined, vec![false, true, true]);
    assert_eq!(r.precision[1], 0.0);
}

#[test]
fn diagonal_matrix_scores_one() {
    let cm = ConfusionMatrix::from_counts(names(3), &[vec![4, 0, 0], vec![0, 7, 0], vec![0, 0, 1]]).unwrap();
    let r = metrics(&cm).unwrap();
    for v in [r.macro_recall, r.macro_precision, r.macro_f1, r.accuracy] {
        assert_eq!(v, 1.0);
    }
}

#[test]
fn hand_computed_two_class_metrics() {
    let cm = ConfusionMatrix::from_counts(names(2), &[vec![8, 2], vec![4, 6]]).unwrap();
    let r = metrics(&cm).unwrap();
    assert!((r.recall[0] - 0.8).abs() < 1e-12 && (r.recall[1] - 0.6).abs() < 1e-12);
    assert!((r.precision[0] - 2.0 / 3.0).abs() < 1e-12 && (r.precision[1] - 0.75).abs() < 1e-12);
    assert!((r.accuracy - 0.7).abs() < 1e-12);
    assert!((r.macro_precision - 0.708_333_333).abs() < 1e-8);
    assert!((r.macro_f1 - 0.704_142).abs() < 1e-6);
}

#[test]
fn empty_matrix_is_an_error() {
    assert!(metrics(&ConfusionMatrix::new(names(3))).is_err());
}

#[test]
fn random_predictions_score_one_over_k() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for k in [2, 3, 6] {
        let truth: Vec<usize> = (0..20_000).map(|i| i % k).collect();
        let pred: Vec<usize> = truth.iter().map(|_| rng.random_range(0..k)).collect();
        let acc = metrics(&ConfusionMatrix::from_predictions(names(k), &truth, &pred).unwrap())
            .unwrap()
            .accuracy;
        assert!((acc - 1.0 / k as f64).abs() < 0.015, "K={k}: {acc}");
    }
}

#[test]
fn merge_sums_tallies() {
    let mut a = ConfusionMatrix::from_predictions(names(2), &[0, 1], &[0, 0]).unwrap();
    let b = ConfusionMatrix::from_predictions(names(2), &[1, 1], &[1, 0]).unwrap();
    a.merge(&b).unwrap();
    assert_eq!((a.get(1, 0), a.get(1, 1), a.total()), (2, 1, 4));
    assert!(a.merge(&ConfusionMatrix::new(names(3))).is_err());
}

#[test]
fn percentages_round_half_up() {
    assert_eq!(format_percent(1.0 / 8.0), "12.50%");
    assert_eq!(format_percent(1.0 / 32.0), "3.13%");
    assert_eq!(format_percent(1.0 / 1600.0), "0.06%");
    assert_eq!(format_percent(3.0 / 1600.0), "0.19%");
    assert_eq!(format_percent(13_711.0 / 20_000.0), "68.56%");
    assert_eq!(format_percent(1.0), "100.00%");
    assert_eq!(format_percent(0.0), "0.00%");
}

fn report(counts: &[Vec<u64>], classes: Vec<String>) -> EvalReport {
    metrics(&ConfusionMatrix::from_counts(classes, counts).unwrap()).unwrap()
}

#[test]
fn single_report_has_one_column_and_accuracy_average() {
    let r = report(&[vec![5, 1, 0], vec![2, 6, 2], vec![0, 0, 9]], three());
    let acc = format_percent(r.accuracy);
    let table = render_report(&BTreeMap::from([(100, r)]), &Layout::ThreeClass).unwrap();
    let header = table.lines().nth(2).unwrap();
    assert_eq!(header.split('|').count(), 2, "{header}");
    let avg = table.lines().find(|l| l.starts_with("Average")).unwrap();
    assert!(avg.ends_with(&acc), "{avg}");
    assert!(table.contains("No report for 20, 30, 40, 60, 80 training samples per class"));
}

#[test]
fn rows_follow_the_layout_not_the_report() {
    let classes = vec!["Tanker".to_string(), "Bulk Carrier".to_string(), "Container Ship".to_string()];
    let r = report(&[vec![1, 0, 0], vec![1, 1, 0], vec![3, 0, 1]], classes);
    let table = render_report(&BTreeMap::from([(20, r)]), &Layout::ThreeClass).unwrap();
    let body: Vec<&str> = table.lines().skip(4).take(3).collect();
    assert!(body[0].starts_with("Bulk Carrier") && body[0].ends_with("50.00%"), "{table}");
    assert!(body[1].starts_with("Container Ship") && body[1].ends_with("25.00%"));
    assert!(body[2].starts_with("Tanker") && body[2].ends_with("100.00%"));
}

#[test]
fn mismatched_classes_are_rejected() {
    let r = report(&[vec![1, 0], vec![0, 1]], names(2));
    assert!(matches!(render_report(&BTreeMap::from([(20, r)]), &Layout::ThreeClass), Err(Error::Config(_))));
}

#[test]
fn layout_is_chosen_by_class_set() {
    let mut shuffled = three();
    shuffled.reverse();
    assert_eq!(Layout::for_classes(&shuffled), Layout::ThreeClass);
    let six: Vec<String> = SIX_CLASS_ROWS.iter().map(|s| s.to_string()).collect();
    assert_eq!(Layout::for_classes(&six), Layout::SixClass);
    assert_eq!(Layout::for_classes(&names(3)), Layout::Custom(names(3)));
}

#[test]
fn summary_flags_never_predicted_classes() {
    let r = report(&[vec![3, 0], vec![2, 0]], names(2));
    let text = render_summary(&[("ours".into(), &r)]);
    assert!(text.lines().next().unwrap().contains("Precision"));
    assert!(text.contains("* ours: c1 was never predicted"), "{text}");
}

fn matrix(k: usize) -> impl Strategy<Value = Vec<Vec<u64>>> {
    prop::collection::vec(prop::collection::vec(0u64..20, k), k)
        .prop_filter("non-empty", |m| m.iter().flatten().sum::<u64>() > 0)
}

proptest! {
    #[test]
    fn metrics_commute_with_relabelling(m in matrix(4), perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle()) {
        let base = report(&m, names(4));
        // Class i of the original becomes class perm[i].
        let mut pm = vec![vec![0; 4]; 4];
        let mut pnames = vec![String::new(); 4];
        for i in 0..4 {
            pnames[perm[i]] = format!("c{i}");
            for j in 0..4 {
                pm[perm[i]][perm[j]] = m[i][j];
            }
        }
        let moved = report(&pm, pnames);
        for i in 0..4 {
            prop_assert_eq!(moved.recall[perm[i]], base.recall[i]);
            prop_assert_eq!(moved.precision[perm[i]], base.precision[i]);
        }
        prop_assert_eq!(moved.accuracy, base.accuracy);
        prop_assert!((moved.macro_f1 - base.macro_f1).abs() < 1e-12);
    }

    #[test]
    fn accuracy_is_support_weighted_recall(m in matrix(3)) {
        let r = report(&m, names(3));
        let weighted: f64 = r.recall.iter().zip(&r.support).map(|(&a, &n)| a * n as f64).sum::<f64>() / r.total as f64;
        prop_assert!((weighted - r.accuracy).abs() < 1e-12);
    }

    #[test]
    fn rendered_percentages_reparse_to_rounded_values(m in matrix(3)) {
        let r = report(&m, three());
        let table = render_report(&BTreeMap::from([(40, r.clone())]), &Layout::ThreeClass).unwrap();
        let avg = table.lines().find(|l| l.starts_with("Average")).unwrap();
        let cell: f64 = avg.rsplit('|').next().unwrap().trim().trim_end_matches('%').parse().unwrap();
        prop_assert_eq!((cell * 100.0).round() as u64, hundredths_of_percent(r.accuracy));
    }
}
