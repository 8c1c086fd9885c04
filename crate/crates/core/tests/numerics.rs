//! Tensor kernels against loop references, container round trips and the
//! ordered parallel map.

use proptest::prelude::*;
use simplr::model::predict_masks;
use simplr::numerics::container::{decode, encode, DType, Record};
use simplr::oracle::{oracle_deconv2x, oracle_layer_norm, oracle_matmul, oracle_predict_masks};
use simplr::parallel::{map_indexed, map_indexed_sequential};
use simplr::{Rng, Tape, Tensor};

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.range(-2.0, 2.0))
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(n in 1usize..9, p in 1usize..9, m in 1usize..9, seed in 0u64..1000) {
        let (a, b) = (tensor(&[n, p], seed), tensor(&[p, m], seed + 1));
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(av, bv).unwrap();
        prop_assert!(close(tape.value(c), &oracle_matmul(&a, &b).unwrap(), 1e-12));
    }

    #[test]
    fn deconv_matches_scatter(h in 1usize..5, w in 1usize..5, ci in 1usize..4, co in 1usize..4, seed in 0u64..1000) {
        let x = tensor(&[h, w, ci], seed);
        let wt = tensor(&[ci, 4 * co], seed + 1);
        let b = tensor(&[co], seed + 2);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let y = tape.deconv2x(xv, wv, Some(bv)).unwrap();
        prop_assert!(close(tape.value(y), &oracle_deconv2x(&x, &wt, b.data()), 1e-12));
    }

    #[test]
    fn layer_norm_matches_two_pass(rows in 1usize..6, d in 2usize..10, seed in 0u64..1000) {
        let x = tensor(&[rows, d], seed);
        let (g, s) = (tensor(&[d], seed + 1), tensor(&[d], seed + 2));
        let mut tape = Tape::new();
        let (xv, gv, sv) = (tape.constant(x.clone()), tape.constant(g.clone()), tape.constant(s.clone()));
        let y = tape.layer_norm(xv, gv, sv, 1e-6).unwrap();
        prop_assert!(close(tape.value(y), &oracle_layer_norm(&x, g.data(), s.data(), 1e-6), 1e-10));
    }

    #[test]
    fn mask_logits_match_dot_products(k in 1usize..5, h in 1usize..6, w in 1usize..6, d in 1usize..6, seed in 0u64..1000) {
        let e = tensor(&[k, d], seed);
        let px = tensor(&[h, w, d], seed + 1);
        let mut tape = Tape::new();
        let (ev, pv) = (tape.constant(e.clone()), tape.constant(px.clone()));
        let m = predict_masks(&mut tape, ev, pv).unwrap();
        prop_assert!(close(tape.value(m), &oracle_predict_masks(&e, &px), 1e-12));
    }

    #[test]
    fn container_round_trips_at_storage_precision(
        shapes in proptest::collection::vec(proptest::collection::vec(1usize..5, 0..4), 1..5),
        seed in 0u64..1000,
    ) {
        let mut rng = Rng::new(seed);
        let records: Vec<Record> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let t = Tensor::from_fn(s.clone(), |_| rng.normal() * 1e3);
                let dtype = if i % 2 == 0 { DType::F32 } else { DType::F64 };
                Record::new(format!("r/{i}"), dtype, t)
            })
            .collect();
        let bytes = encode(&records).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(a.dtype, b.dtype);
            prop_assert_eq!(a.tensor.shape(), b.tensor.shape());
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                let want = if a.dtype == DType::F32 { *x as f32 as f64 } else { *x };
                prop_assert_eq!(want.to_bits(), y.to_bits());
            }
        }
        // a decoded file encodes to the same bytes
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }
}

#[test]
fn corrupt_containers_are_rejected() {
    let bytes = encode(&[Record::new("x", DType::F64, tensor(&[3, 2], 1))]).unwrap();
    for cut in [0, 3, 8, bytes.len() - 1] {
        assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode(&bad).is_err());
}

#[test]
fn parallel_map_keeps_index_order() {
    let f = |i: usize| {
        let mut rng = Rng::new(i as u64);
        (0..1000).map(|_| rng.uniform()).sum::<f64>()
    };
    let par = map_indexed(257, f);
    let seq = map_indexed_sequential(257, f);
    assert_eq!(par, seq);
}
