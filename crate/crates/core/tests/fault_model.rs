use proptest::prelude::*;

use reduce_core::faultsim::{
    derive_mask, fault_rate, generate_fault_map, systolic_matmul_oracle, ArrayConfig, FaultMap,
};
use reduce_core::numnet::Matrix;

/// `(mask ⊙ W)ᵀ x` computed densely.
fn masked_dense(w: &Matrix, x: &[f64], map: &FaultMap) -> Vec<f64> {
    let mask = derive_mask(w.rows(), w.cols(), map);
    (0..w.cols())
        .map(|j| {
            (0..w.rows())
                .filter(|&i| mask.keeps(i, j))
                .map(|i| x[i] * w.get(i, j))
                .sum()
        })
        .collect()
}

fn close(a: &[f64], b: &[f64], rel: f64) -> bool {
    let scale = b.iter().map(|v| v.abs()).fold(1e-300, f64::max);
    a.iter().zip(b).all(|(p, q)| (p - q).abs() <= rel * scale)
}

fn case() -> impl Strategy<Value = (Matrix, Vec<f64>, ArrayConfig, f64, u64)> {
    (1usize..=16, 1usize..=16, 1usize..=8, 1usize..=8).prop_flat_map(|(i, j, r, c)| {
        (
            prop::collection::vec(-10.0f64..10.0, i * j),
            prop::collection::vec(-10.0f64..10.0, i),
            0.0f64..=1.0,
            any::<u64>(),
        )
            .prop_map(move |(w, x, rate, seed)| {
                (
                    Matrix::from_vec(i, j, w).unwrap(),
                    x,
                    ArrayConfig { rows: r, cols: c },
                    rate,
                    seed,
                )
            })
    })
}

#[test]
fn seven_by_five_on_three_by_three() {
    let w = Matrix::from_fn(7, 5, |i, j| ((i * 5 + j) as f64 * 0.37).sin());
    let x: Vec<f64> = (0..7).map(|i| (i as f64 * 1.3).cos()).collect();
    for seed in 0..10 {
        let map = generate_fault_map(ArrayConfig { rows: 3, cols: 3 }, 0.3, seed).unwrap();
        let oracle = systolic_matmul_oracle(&w, &x, &map).unwrap();
        assert!(close(&oracle, &masked_dense(&w, &x, &map), 1e-10));
    }
}

proptest! {
    #[test]
    fn oracle_matches_masked_product((w, x, array, rate, seed) in case()) {
        let map = generate_fault_map(array, rate, seed).unwrap();
        let oracle = systolic_matmul_oracle(&w, &x, &map).unwrap();
        prop_assert!(close(&oracle, &masked_dense(&w, &x, &map), 1e-10));
    }

    #[test]
    fn exact_fault_count_and_determinism(r in 1usize..=16, c in 1usize..=16, rate in 0.0f64..=1.0, seed: u64) {
        let array = ArrayConfig { rows: r, cols: c };
        let map = generate_fault_map(array, rate, seed).unwrap();
        prop_assert_eq!(map.num_faulty(), (rate * (r * c) as f64).round() as usize);
        prop_assert!((0.0..=1.0).contains(&fault_rate(&map)));
        prop_assert!(map.faulty().all(|(pr, pc)| pr < r && pc < c));
        prop_assert_eq!(map, generate_fault_map(array, rate, seed).unwrap());
    }

    #[test]
    fn masks_shrink_as_faults_grow(
        i in 1usize..=16, j in 1usize..=16,
        r in 1usize..=8, c in 1usize..=8,
        rate in 0.0f64..=1.0, extra in 0.0f64..=1.0, seed: u64,
    ) {
        let array = ArrayConfig { rows: r, cols: c };
        let small = generate_fault_map(array, rate, seed).unwrap();
        // superset: the small map plus more random faults
        let more = generate_fault_map(array, extra, seed ^ 0x5555).unwrap();
        let big = FaultMap::new(array, small.faulty().chain(more.faulty()), 0).unwrap();
        let m_small = derive_mask(i, j, &small);
        let m_big = derive_mask(i, j, &big);
        for a in 0..i {
            for b in 0..j {
                prop_assert!(!m_big.keeps(a, b) || m_small.keeps(a, b));
            }
        }
    }
}
