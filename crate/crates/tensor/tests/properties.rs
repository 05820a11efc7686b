use cmt_tensor::gradcheck::check_gradients;
use cmt_tensor::store::ArrayBundle;
use cmt_tensor::{AttnMask, Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::from_vec(&[rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(x in matrix(4, 7).prop_map(|t| t.map(|v| v * 40.0))) {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(x);
        let s = tape.softmax(a).unwrap();
        for r in 0..4 {
            let row = tape.value(s).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences(
        q in matrix(3, 4),
        k in matrix(5, 4),
        v in matrix(5, 4),
        forbid in prop::collection::vec(any::<bool>(), 15),
    ) {
        let mut mask = AttnMask::allow_all(3, 5);
        for (i, &f) in forbid.iter().enumerate() {
            // Keep the first key visible so no row is fully masked.
            if i % 5 != 0 {
                mask.set(i / 5, i % 5, f);
            }
        }
        let report = check_gradients(&[q, k, v], 1e-5, |t, x| {
            let y = t.attention(x[0], x[1], x[2], 2, Some(&mask), false)?.out;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        }).unwrap();
        prop_assert!(report.max_rel_error <= 1e-5, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences(x in matrix(2, 6), g in matrix(1, 6)) {
        let beta = Tensor::from_vec(&[6], vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.6]).unwrap();
        let g = g.reshaped(&[6]).unwrap();
        let report = check_gradients(&[x, g, beta], 1e-5, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let s = t.sigmoid(y)?;
            t.sum(s)
        }).unwrap();
        prop_assert!(report.max_rel_error <= 1e-5, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn forward_is_bit_deterministic(a in matrix(6, 8), b in matrix(8, 5)) {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(a.cast());
            let w = tape.constant(b.cast());
            let h = tape.matmul(x, w).unwrap();
            let s = tape.softmax(h).unwrap();
            tape.value(s).clone()
        };
        let (r1, r2) = (run(), run());
        prop_assert_eq!(
            r1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            r2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn array_store_round_trip_is_bit_exact(bits in prop::collection::vec(any::<u32>(), 1..40)) {
        let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
        let n = data.len();
        let bundle = ArrayBundle {
            meta: vec![("version".to_string(), "1".to_string())],
            arrays: vec![("x".to_string(), Tensor::from_vec(&[n], data).unwrap())],
        };
        let dir = tempdir();
        bundle.write(&dir).unwrap();
        let back = ArrayBundle::<f32>::read(&dir).unwrap();
        let a: Vec<u32> = back.arrays[0].1.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, bits);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}

fn tempdir() -> std::path::PathBuf {
    use std::sync::atomic::{AtomicUsize, Ordering};
    static N: AtomicUsize = AtomicUsize::new(0);
    std::env::temp_dir().join(format!(
        "cmt-prop-{}-{}",
        std::process::id(),
        N.fetch_add(1, Ordering::Relaxed)
    ))
}
