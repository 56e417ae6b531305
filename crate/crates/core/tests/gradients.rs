mod common;

use circuitlab::model::{batch_loss, ModelParams};
use circuitlab::rng::stream_rng;
use circuitlab::tensor::{Tape, Tensor};
use common::{randn, FD_MAX_REL};

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, r) in common::primitive_checks() {
        assert!(r.max_rel_error < FD_MAX_REL, "{name}: {r:?}");
        if name != "affine 4x8x3" {
            assert!(r.coords_checked >= 100, "{name}: only {} coordinates", r.coords_checked);
        }
    }
}

#[test]
fn tiny_model_loss_matches_finite_differences() {
    let r = common::tiny_model_check();
    assert!(r.max_rel_error < FD_MAX_REL, "{r:?}");
    assert!(r.coords_checked >= 100);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut tape = Tape::new();
    let x = tape.leaf(randn(&[7, 33], 4.0, 1));
    let y = tape.softmax(x);
    for row in tape.value(y).data().chunks(33) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let c = tape.leaf(Tensor::filled(vec![1, 9], 2.5));
    let u = tape.softmax(c);
    assert!(tape.value(u).data().iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-15));
}

#[test]
fn causal_mask_zeros_are_exact() {
    for seed in 0..5 {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(randn(&[12, 8], 3.0, seed));
        let k = tape.leaf(randn(&[12, 8], 3.0, seed + 100));
        let v = tape.leaf(randn(&[12, 8], 3.0, seed + 200));
        let y = tape.attention_mix(q, k, v, 3, 2).unwrap();
        let probs = tape.attention_probs(y).unwrap();
        // [batch 4, heads 2, i 3, j 3]
        for (n, block) in probs.chunks(9).enumerate() {
            for i in 0..3 {
                for j in 0..3 {
                    if j > i {
                        assert_eq!(block[i * 3 + j], 0.0, "block {n} ({i},{j})");
                    }
                }
                let s: f64 = block[i * 3..i * 3 + 3].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let cfg = common::tiny_model_config();
    let params = ModelParams::<f64>::init_with(&cfg, 0.3, &mut stream_rng(5, 0));
    let (in1, t1) = ([5u32, 0, 3, 1, 4, 4], [1u32, 0]);
    let (in2, t2) = ([2u32, 3, 5, 0, 1, 2], [2u32, 1]);

    let grads_of = |parts: &[(&[u32], &[u32])]| {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let mut total = None;
        for (i, t) in parts {
            let (l, _) = batch_loss(&mut tape, &vars, &cfg, i, t).unwrap();
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l).unwrap(),
            });
        }
        tape.backward(total.unwrap());
        params.grads_from(&mut tape, &vars)
    };
    let joint = grads_of(&[(&in1, &t1), (&in2, &t2)]);
    let a = grads_of(&[(&in1, &t1)]);
    let b = grads_of(&[(&in2, &t2)]);
    for ((j, x), y) in joint.iter().zip(&a).zip(&b) {
        for ((jj, xx), yy) in j.iter().zip(x).zip(y) {
            assert!((jj - (xx + yy)).abs() <= 1e-12 * (1.0 + jj.abs()), "{jj} vs {}", xx + yy);
        }
    }
}

#[test]
fn embedding_gradient_matches_dense_one_hot_product() {
    let table = randn(&[9, 4], 1.0, 3);
    let ids = [2u32, 7, 2, 0];
    let cot = randn(&[4, 4], 1.0, 4);

    let mut tape = Tape::new();
    let tv = tape.leaf(table.clone());
    let y = tape.embedding(tv, &ids).unwrap();
    tape.backward_with(y, cot.data().to_vec());
    let sparse = tape.grad(tv).unwrap().to_vec();

    let mut onehot = vec![0.0; 4 * 9];
    for (r, &id) in ids.iter().enumerate() {
        onehot[r * 9 + id as usize] = 1.0;
    }
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![4, 9], onehot).unwrap());
    let tv = tape.leaf(table);
    let y = tape.affine(x, tv, None).unwrap();
    tape.backward_with(y, cot.data().to_vec());
    let dense = tape.grad(tv).unwrap();

    for (row, (s, d)) in sparse.chunks(4).zip(dense.chunks(4)).enumerate() {
        if ids.contains(&(row as u32)) {
            for (a, b) in s.iter().zip(d) {
                assert!((a - b).abs() < 1e-14);
            }
        } else {
            assert!(s.iter().all(|&g| g == 0.0), "row {row} must get no gradient");
        }
    }
}
