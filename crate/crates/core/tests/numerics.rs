use std::rc::Rc;

use nsrl::numerics::{
    grad_check, init_rng, mhdpa, Activation, AttentionGroups, Mlp, MlpSpec, MhdpaLayer, ParamSet,
    Tape, Tensor,
};
use proptest::prelude::*;
use rand::Rng;

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims();
    let n = b.cols();
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a.get(i, l) * b.get(l, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

#[test]
fn matmul_identity_and_single_path() {
    let mut rng = init_rng(3);
    let m = random_matrix(&mut rng, 3, 3);
    assert_eq!(Tensor::eye(3).matmul(&m).unwrap(), m);

    let a = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
    let b = Tensor::from_rows(&[[0.0, 1.0], [0.0, 0.0]]).unwrap();
    let mut tape = Tape::detached();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let p = tape.matmul(va, vb).unwrap();
    assert_eq!(tape.value(p).data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = init_rng(11);
    for _ in 0..10 {
        let a = random_matrix(&mut rng, 4, 4);
        let b = random_matrix(&mut rng, 4, 4);
        let got = a.matmul(&b).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::detached();
    let x = tape.constant(Tensor::row(vec![0.0, 0.0, 0.0]));
    let s = tape.softmax_rows(x);
    for v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = tape.constant(Tensor::row(vec![1000.0, 0.0]));
    let s = tape.softmax_rows(x);
    assert_eq!(tape.value(s).data(), &[1.0, 0.0]);

    let x = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
    let s = tape.softmax_rows(x);
    // Direct formula without max subtraction; safe at these magnitudes.
    let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
    for (i, v) in tape.value(s).data().iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
}

/// Per-head reference: explicit loops over heads, rows, and columns.
fn reference_mhdpa(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> (Tensor, Tensor) {
    let (n, d) = q.dims();
    let m = k.rows();
    let dh = d / heads;
    let dv = v.cols() / heads;
    let mut attn_mean = Tensor::zeros(n, m);
    let mut out = Tensor::zeros(n, v.cols());
    for h in 0..heads {
        for i in 0..n {
            let mut scores = vec![0.0; m];
            for j in 0..m {
                let mut s = 0.0;
                for c in 0..dh {
                    s += q.get(i, h * dh + c) * k.get(j, h * dh + c);
                }
                scores[j] = s / (dh as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            let w: Vec<f64> = scores.iter().map(|s| (s - max).exp() / z).collect();
            for j in 0..m {
                attn_mean.set(i, j, attn_mean.get(i, j) + w[j] / heads as f64);
            }
            for c in 0..dv {
                let mut s = 0.0;
                for j in 0..m {
                    s += w[j] * v.get(j, h * dv + c);
                }
                out.set(i, h * dv + c, s);
            }
        }
    }
    (attn_mean, out)
}

#[test]
fn mhdpa_rows_are_normalized_and_symmetric() {
    let mut tape = Tape::detached();
    let i2 = Tensor::from_rows(&[[3.0, 0.0], [0.0, 3.0]]).unwrap();
    let q = tape.constant(i2.clone());
    let k = tape.constant(i2.clone());
    let v = tape.constant(i2);
    let (a, _) = mhdpa(&mut tape, q, k, v, 1, AttentionGroups::single(2, 2)).unwrap();
    for r in 0..2 {
        assert!((tape.value(a).row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let mut rng = init_rng(5);
    let q = tape.constant(random_matrix(&mut rng, 3, 4));
    let same = Tensor::from_rows(&[[0.2, -0.4, 1.0, 0.3]; 3]).unwrap();
    let k = tape.constant(same);
    let v = tape.constant(random_matrix(&mut rng, 3, 4));
    let (a, _) = mhdpa(&mut tape, q, k, v, 2, AttentionGroups::single(3, 3)).unwrap();
    for x in tape.value(a).data() {
        assert!((x - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn mhdpa_matches_per_head_oracle() {
    let mut rng = init_rng(21);
    let (qt, kt, vt) = (
        random_matrix(&mut rng, 3, 4),
        random_matrix(&mut rng, 3, 4),
        random_matrix(&mut rng, 3, 4),
    );
    let mut tape = Tape::detached();
    let q = tape.constant(qt.clone());
    let k = tape.constant(kt.clone());
    let v = tape.constant(vt.clone());
    let (a, o) = mhdpa(&mut tape, q, k, v, 2, AttentionGroups::single(3, 3)).unwrap();
    let (ra, ro) = reference_mhdpa(&qt, &kt, &vt, 2);
    assert!(tape.value(a).max_abs_diff(&ra) < 1e-10);
    assert!(tape.value(o).max_abs_diff(&ro) < 1e-10);
}

#[test]
fn grouped_attention_equals_independent_problems() {
    let mut rng = init_rng(8);
    let groups = 3;
    let (qt, kt, vt) = (
        random_matrix(&mut rng, groups * 2, 4),
        random_matrix(&mut rng, groups * 3, 4),
        random_matrix(&mut rng, groups * 3, 6),
    );
    let mut tape = Tape::detached();
    let q = tape.constant(qt.clone());
    let k = tape.constant(kt.clone());
    let v = tape.constant(vt.clone());
    let spec = AttentionGroups {
        groups,
        q_rows: 2,
        kv_rows: 3,
    };
    let (a, o) = mhdpa(&mut tape, q, k, v, 2, spec).unwrap();
    let slice = |t: &Tensor, start: usize, n: usize| {
        let c = t.cols();
        Tensor::matrix(n, c, t.data()[start * c..(start + n) * c].to_vec()).unwrap()
    };
    for g in 0..groups {
        let (ra, ro) = reference_mhdpa(
            &slice(&qt, g * 2, 2),
            &slice(&kt, g * 3, 3),
            &slice(&vt, g * 3, 3),
            2,
        );
        assert!(slice(tape.value(a), g * 2, 2).max_abs_diff(&ra) < 1e-12);
        assert!(slice(tape.value(o), g * 2, 2).max_abs_diff(&ro) < 1e-12);
    }
}

#[test]
fn mhdpa_rejects_indivisible_heads() {
    let mut tape = Tape::detached();
    let q = tape.constant(Tensor::zeros(2, 3));
    let err = mhdpa(&mut tape, q, q, q, 2, AttentionGroups::single(2, 2)).unwrap_err();
    assert!(matches!(err, nsrl::numerics::TensorError::Configuration(_)));
}

#[test]
fn mlp_identity_and_zero_weights() {
    let mut params = ParamSet::new();
    let mut rng = init_rng(1);
    let spec = MlpSpec::new(vec![3, 3], Activation::Identity, Activation::Identity).unwrap();
    let mlp = Mlp::register(&mut params, "id", spec, &mut rng);
    params.set(mlp.layers[0].weight, Tensor::eye(3)).unwrap();
    params.set(mlp.layers[0].bias, Tensor::zeros(1, 3)).unwrap();
    let x = Tensor::row(vec![0.5, -2.0, 7.0]);
    let mut tape = Tape::new(&params);
    let xv = tape.constant(x.clone());
    let y = mlp.forward(&mut tape, xv).unwrap();
    assert_eq!(tape.value(y).data(), x.data());

    let mut params = ParamSet::new();
    let spec = MlpSpec::new(vec![3, 3], Activation::Relu, Activation::Relu).unwrap();
    let mlp = Mlp::register(&mut params, "z", spec, &mut rng);
    params.set(mlp.layers[0].weight, Tensor::zeros(3, 3)).unwrap();
    params.set(mlp.layers[0].bias, Tensor::row(vec![0.4, -0.1, 0.0])).unwrap();
    let mut tape = Tape::new(&params);
    let xv = tape.constant(x);
    let y = mlp.forward(&mut tape, xv).unwrap();
    assert_eq!(tape.value(y).data(), &[0.4, 0.0, 0.0]);
}

#[test]
fn mlp_matches_loop_oracle() {
    let mut params = ParamSet::new();
    let mut rng = init_rng(2);
    let spec = MlpSpec::new(vec![4, 5, 3], Activation::Relu, Activation::Identity).unwrap();
    let mlp = Mlp::register(&mut params, "net", spec, &mut rng);
    let x = random_matrix(&mut rng, 2, 4);
    let mut tape = Tape::new(&params);
    let xv = tape.constant(x.clone());
    let y = mlp.forward(&mut tape, xv).unwrap();

    let mut h: Vec<Vec<f64>> = (0..2).map(|r| x.row_slice(r).to_vec()).collect();
    for (li, layer) in mlp.layers.iter().enumerate() {
        let w = params.get(layer.weight);
        let b = params.get(layer.bias);
        h = h
            .iter()
            .map(|row| {
                (0..layer.output)
                    .map(|j| {
                        let mut s = b.data()[j];
                        for (i, xi) in row.iter().enumerate() {
                            s += xi * w.get(i, j);
                        }
                        if li == 0 {
                            s.max(0.0)
                        } else {
                            s
                        }
                    })
                    .collect()
            })
            .collect();
    }
    let expected = Tensor::from_rows(&h).unwrap();
    assert!(tape.value(y).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn mlp_width_mismatch_is_an_error() {
    let mut params = ParamSet::new();
    let mut rng = init_rng(2);
    let spec = MlpSpec::new(vec![4, 2], Activation::Relu, Activation::Identity).unwrap();
    let mlp = Mlp::register(&mut params, "net", spec, &mut rng);
    let mut tape = Tape::new(&params);
    let x = tape.constant(Tensor::zeros(1, 3));
    assert!(mlp.forward(&mut tape, x).is_err());
    assert!(MlpSpec::new(vec![4], Activation::Relu, Activation::Relu).is_err());
}

/// Exercises every grouped/segmented primitive in one scalar loss.
#[test]
fn composite_primitives_pass_gradient_check() {
    let mut rng = init_rng(17);
    let mut params = ParamSet::new();
    let x = params.add("x", random_matrix(&mut rng, 6, 4));
    let w = params.add("w", random_matrix(&mut rng, 2, 3));
    let m = params.add("m", random_matrix(&mut rng, 6, 4));
    let q = params.add("q", random_matrix(&mut rng, 1, 4));
    let layer_rng = &mut init_rng(4);
    let layer = MhdpaLayer::register(&mut params, "blk", 4, 8, 4, 2, layer_rng).unwrap();
    let report = grad_check(&params, 1e-5, usize::MAX, |tape| {
        let (x, w, m, q) = (tape.param(x), tape.param(w), tape.param(m), tape.param(q));
        let groups = AttentionGroups {
            groups: 2,
            q_rows: 3,
            kv_rows: 3,
        };
        let (att, out) = layer.forward(tape, x, groups)?;
        let pooled = tape.group_mean_rows(att, 3)?;
        let ws = tape.softmax_rows(w);
        let mixed = tape.group_combine(ws, m)?;
        let mats = tape.reshape(mixed, 2, 4)?;
        let sq = tape.batched_matmul(mats, mats, 2)?;
        let stacked = tape.stack_groups(&[sq, mats])?;
        let qs = tape.repeat_rows(q, 2)?;
        let (pa, _) = mhdpa(
            tape,
            qs,
            stacked,
            stacked,
            2,
            AttentionGroups {
                groups: 2,
                q_rows: 1,
                kv_rows: 2,
            },
        )?;
        let tail = tape.slice_cols(pa, 1, 1)?;
        let pp = tape.exp(pooled);
        let norm = tape.row_normalize(pp);
        let scaled = tape.mul_col(norm, tail)?;
        let flat = tape.reshape(out, 1, 24)?;
        let lsm = tape.segment_log_softmax(flat, Rc::from(vec![10, 14]))?;
        let picked = tape.gather(lsm, Rc::from(vec![0, 3, 3, 17]))?;
        let segs = tape.segment_sum(picked, Rc::from(vec![1, 3]))?;
        let clamped = tape.clamp(segs, -50.0, 50.0);
        let target = tape.constant(Tensor::row(vec![-3.0, -9.0]));
        let lo = tape.minimum(clamped, target)?;
        let s1 = tape.sum(lo);
        let s2 = tape.mean(scaled);
        let s2 = tape.square(s2);
        let sum = tape.add(s1, s2)?;
        Ok(tape.add_scalar(sum, 0.5))
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
    assert!(report.max_abs_gradient > 0.0);
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let run = || {
        let mut rng = init_rng(99);
        let mut params = ParamSet::new();
        let layer = MhdpaLayer::register(&mut params, "blk", 4, 8, 4, 2, &mut rng).unwrap();
        let x = random_matrix(&mut rng, 3, 4);
        let mut tape = Tape::new(&params);
        let xv = tape.constant(x);
        let (_, out) = layer.forward(&mut tape, xv, AttentionGroups::single(3, 3)).unwrap();
        let loss = tape.sum(out);
        let grads = tape.backward(loss).unwrap();
        let value = tape.value(loss).data()[0];
        let g: Vec<u64> = params
            .ids()
            .flat_map(|id| grads.param_or_zeros(id, params.get(id).len()))
            .map(f64::to_bits)
            .collect();
        (value.to_bits(), g)
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut tape = Tape::detached();
        let x = tape.constant(Tensor::matrix(3, 4, values).unwrap());
        let s = tape.softmax_rows(x);
        for r in 0..3 {
            let row = tape.value(s).row_slice(r);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>()) {
        let mut rng = init_rng(seed);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 5);
        let c = random_matrix(&mut rng, 5, 2);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-9);
    }
}
