use medinject::eval::{classification_metrics, write_csv, Metrics, MetricsRow, CSV_HEADER};
use proptest::prelude::*;

/// Confusion counts for class 1.
fn confusion(preds: &[usize], labels: &[usize]) -> (f64, f64, f64, f64) {
    let mut c = (0.0, 0.0, 0.0, 0.0);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => c.0 += 1.0,
            (true, false) => c.1 += 1.0,
            (false, true) => c.2 += 1.0,
            (false, false) => c.3 += 1.0,
        }
    }
    c
}

#[test]
fn thousand_random_pairs_match_confusion_counts() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let m = classification_metrics(&preds, &labels, 1).unwrap();
        let (tp, fp, fn_, tn) = confusion(&preds, &labels);
        assert_eq!(m.support, n);
        assert!((m.accuracy - (tp + tn) / n as f64).abs() < 1e-15);
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        assert!((m.precision - p).abs() < 1e-15);
        assert!((m.recall - r).abs() < 1e-15);
        assert!((m.f1 - f1).abs() < 1e-12);
    }
}

#[test]
fn csv_marks_incapable_rows() {
    let rows = vec![
        MetricsRow {
            config: "FedAvg_s".into(),
            task: "t".into(),
            metrics: Some(Metrics {
                accuracy: 0.5,
                precision: 1.0,
                recall: 0.25,
                f1: 0.4,
                support: 8,
            }),
            support: 8,
        },
        MetricsRow {
            config: "Foundation".into(),
            task: "u".into(),
            metrics: None,
            support: 3,
        },
    ];
    let csv = write_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines[1], "FedAvg_s,t,0.500000,1.000000,0.250000,0.400000,8");
    assert_eq!(lines[2], "Foundation,u,✗,✗,✗,✗,3");
}

proptest! {
    #[test]
    fn metric_identities(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..200)) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = classification_metrics(&preds, &labels, 1).unwrap();
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        // f1 is the harmonic mean, so it lies between precision and recall.
        prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
        prop_assert!(m.f1 + 1e-12 >= m.precision.min(m.recall) || m.f1 == 0.0);
        if preds == labels {
            prop_assert_eq!(m.accuracy, 1.0);
        }
        let flipped: Vec<usize> = preds.iter().map(|p| 1 - p).collect();
        let f = classification_metrics(&flipped, &labels, 1).unwrap();
        prop_assert!((m.accuracy + f.accuracy - 1.0).abs() < 1e-12);
    }
}
