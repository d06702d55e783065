use part_core::tensor::{load_checkpoint, save_checkpoint, sgd_step, Graph, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn matmul_is_associative(
        (a, b, c) in (1usize..5, 1usize..5, 1usize..5, 1usize..5)
            .prop_flat_map(|(m, k, n, p)| (arb_matrix(m, k), arb_matrix(k, n), arb_matrix(n, p)))
    ) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one(
        a in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| {
            prop::collection::vec(-800.0f64..800.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
        }),
        scale in 0.1f64..10.0,
    ) {
        let mut tape = Tape::new();
        let v = tape.constant(a);
        let s = tape.softmax_rows(v, scale).unwrap();
        let s = tape.value(s);
        for r in 0..s.rows() {
            let total: f64 = s.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(s.row(r).iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn tracked_matmul_matches_untracked(
        (a, b) in (1usize..5, 1usize..5, 1usize..5)
            .prop_flat_map(|(m, k, n)| (arb_matrix(m, k), arb_matrix(k, n)))
    ) {
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        prop_assert_eq!(tape.value(c), &a.matmul(&b).unwrap());
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    store.add("a.w", Tensor::matrix(3, 4, (0..12).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap());
    store.add("a.b", Tensor::new(vec![4], vec![f64::MIN_POSITIVE, -0.0, 1e300, -1e-300]).unwrap());
    store.add("s", Tensor::scalar(std::f64::consts::PI));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &store).unwrap();

    let mut restored = ParamStore::new();
    for (_, name, t) in store.iter() {
        restored.add(name, Tensor::zeros(t.shape()));
    }
    load_checkpoint(&path, &mut restored).unwrap();
    for ((_, n1, t1), (_, n2, t2)) in store.iter().zip(restored.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn sgd_step_decreases_quadratic_loss() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap());
    let loss_of = |store: &ParamStore| {
        let mut g = Graph::new(store);
        let v = g.param(w);
        let sq = g.tape.mul(v, v).unwrap();
        let l = g.tape.sum(sq);
        let value = g.scalar(l).unwrap();
        (value, g.backward(l).unwrap())
    };
    let (before, grads) = loss_of(&store);
    sgd_step(&mut store, &grads, 0.1);
    let (after, _) = loss_of(&store);
    // w ← 0.8 w, so the loss scales by 0.64.
    assert!((after - 0.64 * before).abs() < 1e-12);
}
