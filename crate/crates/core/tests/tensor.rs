use medinject::{Graph, Tensor, Tensor32};
use proptest::prelude::*;

// exp(x_i) / Σ exp(x) for [1, 2, 3], evaluated at 40 digits.
const SOFTMAX_123: [f64; 3] = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
// ln Σ exp([1, 2, 3]) − 1
const CE_123_LABEL0: f64 = 2.40760596444438;

#[test]
fn softmax_matches_high_precision_values() {
    let t = Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let s = t.softmax(1).unwrap();
    for (a, b) in s.data().iter().zip(SOFTMAX_123) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
    let t32: Tensor32 = t.cast();
    let s32 = t32.softmax(1).unwrap();
    for (a, b) in s32.data().iter().zip(SOFTMAX_123) {
        assert!((*a as f64 - b).abs() < 1e-6);
    }
}

#[test]
fn cross_entropy_matches_high_precision_value() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let ce = g.cross_entropy(x, &[0]).unwrap();
    assert!((g.value(ce).item().unwrap() - CE_123_LABEL0).abs() < 1e-14);
}

#[test]
fn softmax_survives_huge_logits() {
    let t = Tensor::new([1, 3], vec![1000.0, 1000.0, -1000.0]).unwrap();
    let s = t.softmax(1).unwrap();
    assert!(s.is_finite());
    assert_eq!(s.data()[2], 0.0);
    assert!((s.data()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn matmul_shape_errors() {
    let a = Tensor::zeros([2, 3]);
    let b = Tensor::zeros([2, 3]);
    assert!(a.matmul(&b).is_err());
    assert_eq!(a.matmul(&b.transpose().unwrap()).unwrap().shape(), &[2, 2]);
}

fn rows() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 1usize..7).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-30.0f64..30.0, r * c)))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((r, c, data) in rows()) {
        let s = Tensor::new([r, c], data).unwrap().softmax(1).unwrap();
        for i in 0..r {
            let row = s.row(i);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_commutes_with_permutation((_r, c, data) in rows(), shift in 0usize..7) {
        let row = &data[..c];
        let k = shift % c;
        let rotated: Vec<f64> = row.iter().cycle().skip(k).take(c).copied().collect();
        let a = Tensor::new([1, c], row.to_vec()).unwrap().softmax(1).unwrap();
        let b = Tensor::new([1, c], rotated).unwrap().softmax(1).unwrap();
        for j in 0..c {
            prop_assert!((a.data()[(j + k) % c] - b.data()[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ignores_row_offsets((_r, c, data) in rows(), offset in -50.0f64..50.0) {
        let row = data[..c].to_vec();
        let shifted: Vec<f64> = row.iter().map(|x| x + offset).collect();
        let a = Tensor::new([1, c], row).unwrap().softmax(1).unwrap();
        let b = Tensor::new([1, c], shifted).unwrap().softmax(1).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_is_associative(a in prop::collection::vec(-2.0f64..2.0, 6), b in prop::collection::vec(-2.0f64..2.0, 12), c in prop::collection::vec(-2.0f64..2.0, 8)) {
        let a = Tensor::new([2, 3], a).unwrap();
        let b = Tensor::new([3, 4], b).unwrap();
        let c = Tensor::new([4, 2], c).unwrap();
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right).unwrap() < 1e-12);
    }
}
