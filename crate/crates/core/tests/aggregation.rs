use medinject::federation::{aggregate, deserialize_update, serialize_update, ModelUpdate, Summation};
use medinject::wire::{decode, encode, Container};
use medinject::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Shewchuk's exact summation with a single final rounding.
fn fsum(xs: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &x in xs {
        let mut x = x;
        let mut kept = 0;
        for i in 0..partials.len() {
            let mut y = partials[i];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    let mut hi = 0.0;
    while let Some(x) = partials.pop() {
        let prev = hi;
        hi = prev + x;
        let lo = x - (hi - prev);
        if lo != 0.0 {
            if let Some(&next) = partials.last() {
                if (lo < 0.0) == (next < 0.0) {
                    let y = lo * 2.0;
                    let x2 = hi + y;
                    if y == x2 - hi {
                        hi = x2;
                    }
                }
            }
            break;
        }
    }
    hi
}

fn update(client_id: u32, tensors: Vec<(&str, Tensor)>) -> ModelUpdate {
    ModelUpdate {
        client_id,
        round_index: 1,
        tensors: tensors.into_iter().map(|(n, t)| (n.to_owned(), t)).collect(),
        sample_count: 10,
    }
}

#[test]
fn fsum_oracle_sanity() {
    assert_eq!(fsum(&[1e100, 1.0, -1e100]), 1.0);
    assert_eq!(fsum(&[0.1; 10]), 1.0);
}

#[test]
fn five_client_mean_matches_exact_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..200 {
        let len = 16;
        let values: Vec<Vec<f64>> = (0..5)
            .map(|_| {
                (0..len)
                    .map(|_| rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-3..4)))
                    .collect()
            })
            .collect();
        let updates: Vec<ModelUpdate> = values
            .iter()
            .enumerate()
            .map(|(n, v)| update(n as u32, vec![("w", Tensor::new([len], v.clone()).unwrap())]))
            .collect();
        let agg = aggregate(&updates, Summation::Compensated).unwrap();
        for j in 0..len {
            let column: Vec<f64> = values.iter().map(|v| v[j]).collect();
            let exact = fsum(&column) / 5.0;
            let got = agg[0].1.data()[j];
            let scale = column.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            assert!((got - exact).abs() <= 1e-15 * scale, "{got} vs {exact}");
        }
    }
}

#[test]
fn identical_models_average_to_themselves_bit_exactly() {
    let t = Tensor::new([3], vec![0.1, -1e-300, 7.25e10]).unwrap();
    for n in 1..8 {
        let updates: Vec<_> = (0..n).map(|i| update(i, vec![("w", t.clone())])).collect();
        let agg = aggregate(&updates, Summation::Compensated).unwrap();
        assert!(agg[0].1.bit_eq(&t), "n = {n}");
    }
}

#[test]
fn two_clients_average_to_the_midpoint() {
    let updates = [
        update(0, vec![("w", Tensor::new([1], vec![1.0]).unwrap())]),
        update(1, vec![("w", Tensor::new([1], vec![3.0]).unwrap())]),
    ];
    assert_eq!(aggregate(&updates, Summation::Compensated).unwrap()[0].1.data(), &[2.0]);
}

#[test]
fn aggregate_rejects_mismatches() {
    let a = update(0, vec![("w", Tensor::zeros([2]))]);
    let b = update(1, vec![("w", Tensor::zeros([3]))]);
    let err = aggregate(&[a.clone(), b], Summation::Compensated).unwrap_err();
    assert!(err.to_string().contains('w'));
    let c = update(1, vec![("v", Tensor::zeros([2]))]);
    assert!(aggregate(&[a, c], Summation::Compensated).is_err());
    assert!(aggregate(&[], Summation::Compensated).is_err());
}

fn arb_tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..4, 0..3).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(any::<f64>(), n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
    })
}

fn arb_container() -> impl Strategy<Value = Container> {
    (
        any::<u32>(),
        any::<u32>(),
        prop::collection::btree_map("[a-z.]{1,12}", arb_tensor(), 0..5),
    )
        .prop_map(|(r, c, m)| Container {
            round_index: r,
            client_id: c,
            tensors: m.into_iter().collect(),
        })
}

proptest! {
    #[test]
    fn aggregate_ignores_upload_order(values in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 4), 2..7), seed in any::<u64>()) {
        let updates: Vec<_> = values
            .iter()
            .enumerate()
            .map(|(n, v)| update(n as u32, vec![("w", Tensor::new([4], v.clone()).unwrap())]))
            .collect();
        let mut shuffled = updates.clone();
        shuffled.reverse();
        shuffled.rotate_left((seed % updates.len() as u64) as usize);
        let a = aggregate(&updates, Summation::Compensated).unwrap();
        let b = aggregate(&shuffled, Summation::Compensated).unwrap();
        prop_assert!(a[0].1.bit_eq(&b[0].1));
    }

    #[test]
    fn compensated_mean_barely_depends_on_client_labels(values in prop::collection::vec(-1e3f64..1e3, 2..9)) {
        let mk = |vals: &[f64]| -> Vec<ModelUpdate> {
            vals.iter().enumerate().map(|(n, &v)| update(n as u32, vec![("w", Tensor::new([1], vec![v]).unwrap())])).collect()
        };
        let mut rev = values.clone();
        rev.reverse();
        let a = aggregate(&mk(&values), Summation::Compensated).unwrap()[0].1.data()[0];
        let b = aggregate(&mk(&rev), Summation::Compensated).unwrap()[0].1.data()[0];
        let scale = values.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        prop_assert!((a - b).abs() < 1e-12 * scale);
    }

    #[test]
    fn wire_roundtrip_is_bit_exact(c in arb_container()) {
        let bytes = encode(&c).unwrap();
        prop_assert!(decode(&bytes).unwrap().bit_eq(&c));
    }

    #[test]
    fn wire_rejects_any_single_bit_flip(c in arb_container(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = encode(&c).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode(&bytes).is_err());
    }

    #[test]
    fn wire_rejects_truncation(c in arb_container(), cut in any::<prop::sample::Index>()) {
        let bytes = encode(&c).unwrap();
        let keep = cut.index(bytes.len());
        prop_assert!(decode(&bytes[..keep]).is_err());
    }

    #[test]
    fn updates_roundtrip_with_sample_counts(c in arb_container(), count in 0u64..(1 << 53)) {
        let u = ModelUpdate { client_id: c.client_id, round_index: c.round_index, tensors: c.tensors, sample_count: count };
        let back = deserialize_update(&serialize_update(&u).unwrap()).unwrap();
        prop_assert!(back.bit_eq(&u));
    }
}
