use super::*;
use crate::rng::substream;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn grad_of(x: &Tensor) -> Vec<f64> {
    x.grad().expect("gradient missing")
}

// ── forward values ──────────────────────────────────────────────────────

#[test]
fn add_broadcasts_bias_over_batch() {
    let g = Graph::new();
    let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let b = t(&[3], &[10.0, 20.0, 30.0]);
    let c = g.add(&a, &b).unwrap();
    assert_eq!(c.shape(), vec![2, 3]);
    assert_eq!(c.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
}

#[test]
fn add_rejects_incompatible_shapes() {
    let g = Graph::new();
    let a = t(&[2, 3], &[0.0; 6]);
    let b = t(&[2], &[0.0; 2]);
    assert!(matches!(
        g.add(&a, &b),
        Err(TensorError::Shape { op: "add", .. })
    ));
}

#[test]
fn matmul_known_product() {
    let g = Graph::new();
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
    let c = g.matmul(&a, &b).unwrap();
    assert_eq!(c.to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn conv1d_edge_detector_with_padding() {
    // kernel [1, 0, -1], stride 1, padding 1 over [1, 2, 3, 4]
    let g = Graph::new();
    let x = t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
    let w = t(&[1, 1, 3], &[1.0, 0.0, -1.0]);
    let y = g.conv1d(&x, &w, None, 1, 1).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 4]);
    assert_eq!(y.to_vec(), vec![-2.0, -2.0, -2.0, 3.0]);
}

#[test]
fn conv1d_stride_two_halves_length() {
    let g = Graph::new();
    let x = t(&[1, 1, 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let w = t(&[1, 1, 2], &[1.0, 1.0]);
    let y = g.conv1d(&x, &w, None, 2, 0).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 3]);
    assert_eq!(y.to_vec(), vec![3.0, 7.0, 11.0]);
}

#[test]
fn conv1d_bias_is_added_per_output_channel() {
    let g = Graph::new();
    let x = t(&[1, 1, 3], &[1.0, 1.0, 1.0]);
    let w = t(&[2, 1, 1], &[1.0, 2.0]);
    let b = t(&[2], &[10.0, -10.0]);
    let y = g.conv1d(&x, &w, Some(&b), 1, 0).unwrap();
    assert_eq!(y.to_vec(), vec![11.0, 11.0, 11.0, -8.0, -8.0, -8.0]);
}

#[test]
fn maxpool_takes_first_index_on_ties() {
    let g = Graph::new();
    let x = t(&[1, 1, 4], &[2.0, 2.0, 1.0, 0.0]).with_grad();
    let y = g.maxpool1d(&x, 2, 2).unwrap();
    assert_eq!(y.to_vec(), vec![2.0, 1.0]);
    g.backward(
        &g.scalar_mul(&g.global_avg_pool1d(&y).unwrap(), 2.0)
            .unwrap(),
    )
    .unwrap();
    // tie at positions 0/1 routes gradient to position 0 only
    assert_eq!(grad_of(&x), vec![1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn global_avg_pool_means_over_time() {
    let g = Graph::new();
    let x = t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let y = g.global_avg_pool1d(&x).unwrap();
    assert_eq!(y.shape(), vec![1, 2]);
    assert_eq!(y.to_vec(), vec![2.0, 5.0]);
}

#[test]
fn batchnorm_train_normalizes_and_updates_running_stats() {
    let g = Graph::new();
    let x = t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
    let gamma = t(&[1], &[1.0]);
    let beta = t(&[1], &[0.0]);
    let rm = Tensor::zeros(&[1]);
    let rv = Tensor::full(&[1], 1.0);
    let y = g
        .batchnorm1d(&x, &gamma, &beta, &rm, &rv, true, 0.1, 1e-5)
        .unwrap();
    let out = y.to_vec();
    // biased variance of [1,2,3,4] is 1.25
    let istd = 1.0 / (1.25f64 + 1e-5).sqrt();
    for (o, v) in out.iter().zip([-1.5, -0.5, 0.5, 1.5]) {
        assert!((o - v * istd).abs() < 1e-12);
    }
    assert!((rm.to_vec()[0] - 0.25).abs() < 1e-12); // 0.9*0 + 0.1*2.5
    assert!((rv.to_vec()[0] - (0.9 + 0.125)).abs() < 1e-12); // 0.9*1 + 0.1*1.25
}

#[test]
fn batchnorm_eval_uses_running_stats() {
    let g = Graph::inference();
    let x = t(&[1, 1, 2], &[1.0, 3.0]);
    let gamma = t(&[1], &[2.0]);
    let beta = t(&[1], &[1.0]);
    let rm = Tensor::full(&[1], 1.0);
    let rv = Tensor::full(&[1], 4.0);
    let y = g
        .batchnorm1d(&x, &gamma, &beta, &rm, &rv, false, 0.1, 0.0)
        .unwrap();
    // (x - 1) / 2 * 2 + 1
    assert_eq!(y.to_vec(), vec![1.0, 3.0]);
    // eval must not touch the buffers
    assert_eq!(rm.to_vec(), vec![1.0]);
    assert_eq!(rv.to_vec(), vec![4.0]);
}

#[test]
fn dropout_eval_is_identity_and_consumes_no_draws() {
    let g = Graph::new();
    let x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
    let mut rng = substream(7, "test/dropout");
    let before = rng.clone();
    let y = g.dropout(&x, 0.5, false, &mut rng).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
    let mut before = before;
    assert_eq!(rng.random::<u64>(), before.random::<u64>());
}

#[test]
fn dropout_train_scales_kept_values() {
    let g = Graph::new();
    let x = Tensor::full(&[1000], 1.0);
    let mut rng = substream(7, "test/dropout");
    let y = g.dropout(&x, 0.25, true, &mut rng).unwrap();
    let data = y.to_vec();
    let kept = data.iter().filter(|v| **v != 0.0).count();
    for v in &data {
        assert!(*v == 0.0 || (*v - 1.0 / 0.75).abs() < 1e-12);
    }
    // keep rate concentrates near 0.75 for n = 1000
    assert!(
        (0.70..0.80).contains(&(kept as f64 / 1000.0)),
        "kept {kept}"
    );
}

#[test]
fn softmax_cross_entropy_uniform_logits() {
    let g = Graph::new();
    let logits = t(&[2, 4], &[0.0; 8]);
    let loss = g.softmax_cross_entropy(&logits, &[1, 3]).unwrap();
    assert!((loss.scalar_value() - 4.0f64.ln()).abs() < 1e-12);
}

#[test]
fn softmax_cross_entropy_rejects_bad_label() {
    let g = Graph::new();
    let logits = t(&[1, 3], &[0.0; 3]);
    assert!(matches!(
        g.softmax_cross_entropy(&logits, &[3]),
        Err(TensorError::Invalid {
            op: "softmax_cross_entropy",
            ..
        })
    ));
}

#[test]
fn mse_grad_matches_closed_form() {
    // loss = (w*x - y)^2 with w = 1, x = 2, y = 0 gives dL/dw = 2*2*2 = 8
    let g = Graph::new();
    let w = t(&[1], &[1.0]).with_grad();
    let x = t(&[1], &[2.0]);
    let y = t(&[1], &[0.0]);
    let pred = g.mul(&w, &x).unwrap();
    let loss = g.mse(&pred, &y).unwrap();
    assert!((loss.scalar_value() - 4.0).abs() < 1e-12);
    g.backward(&loss).unwrap();
    assert_eq!(grad_of(&w), vec![8.0]);
}

#[test]
fn concat_and_slice_round_trip() {
    let g = Graph::new();
    let a = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[1, 1, 2], &[5.0, 6.0]);
    let c = g.concat(&[&a, &b], 1).unwrap();
    assert_eq!(c.shape(), vec![1, 3, 2]);
    assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let back = g.slice(&c, 1, 0, 2).unwrap();
    assert_eq!(back.to_vec(), a.to_vec());
    let tail = g.slice(&c, 1, 2, 3).unwrap();
    assert_eq!(tail.to_vec(), b.to_vec());
}

#[test]
fn concat_last_axis_duplicates_for_upsampling() {
    // nearest-neighbor x2: (B,C,L) -> (B,C,L,1) -> concat -> (B,C,2L)
    let g = Graph::new();
    let x = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
    let col = g.reshape(&x, &[1, 1, 3, 1]).unwrap();
    let dup = g.concat(&[&col, &col], 3).unwrap();
    let up = g.reshape(&dup, &[1, 1, 6]).unwrap();
    assert_eq!(up.to_vec(), vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
}

#[test]
fn embedding_lookup_gathers_and_scatters() {
    let g = Graph::new();
    let table = t(&[3, 2], &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0]).with_grad();
    let out = g.embedding_lookup(&table, &[2, 0, 2]).unwrap();
    assert_eq!(out.to_vec(), vec![20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
    let loss = g.mse(&out, &Tensor::zeros(&[3, 2])).unwrap();
    g.backward(&loss).unwrap();
    let grad = grad_of(&table);
    // row 2 used twice, row 1 never
    assert_eq!(grad[2], 0.0);
    assert_eq!(grad[3], 0.0);
    assert!(grad[4] != 0.0 && grad[5] != 0.0);
}

// ── backward mechanics ──────────────────────────────────────────────────

#[test]
fn backward_requires_scalar_loss() {
    let g = Graph::new();
    let x = t(&[2], &[1.0, 2.0]).with_grad();
    let y = g.relu(&x).unwrap();
    assert!(matches!(
        g.backward(&y),
        Err(TensorError::NonScalarLoss { numel: 2 })
    ));
}

#[test]
fn backward_rejects_detached_tensor() {
    let g = Graph::new();
    let loose = Tensor::scalar(1.0);
    assert!(matches!(
        g.backward(&loose),
        Err(TensorError::DetachedGraph)
    ));
}

#[test]
fn repeated_backward_accumulates() {
    let g = Graph::new();
    let w = t(&[1], &[1.0]).with_grad();
    let x = t(&[1], &[2.0]);
    let loss = g
        .mse(&g.mul(&w, &x).unwrap(), &Tensor::zeros(&[1]))
        .unwrap();
    g.backward(&loss).unwrap();
    g.backward(&loss).unwrap();
    assert_eq!(grad_of(&w), vec![16.0]);
}

#[test]
fn fan_out_sums_gradient_paths() {
    // y = x*x + x*x (two separate nodes sharing x)
    let g = Graph::new();
    let x = t(&[1], &[3.0]).with_grad();
    let a = g.mul(&x, &x).unwrap();
    let b = g.mul(&x, &x).unwrap();
    let y = g.add(&a, &b).unwrap();
    let loss = g.mse(&y, &Tensor::zeros(&[1])).unwrap();
    g.backward(&loss).unwrap();
    // d/dx 2x^2 = 4x = 12; dL/dy = 2y = 36; total 12*36
    assert_eq!(grad_of(&x), vec![432.0]);
}

#[test]
fn inference_graph_records_nothing() {
    let g = Graph::inference();
    let x = t(&[1], &[1.0]).with_grad();
    let y = g.relu(&x).unwrap();
    assert_eq!(g.node_count(), 0);
    assert!(!y.requires_grad());
}

#[test]
fn no_grad_inputs_record_nothing() {
    let g = Graph::new();
    let x = t(&[1], &[1.0]);
    let _ = g.relu(&x).unwrap();
    assert_eq!(g.node_count(), 0);
}

// ── finite-difference gradient checks ───────────────────────────────────

/// Central-difference check of d(loss)/d(input) against autodiff, where the
/// loss is built by `build` from fresh tensors each call.
fn gradcheck(build: impl Fn(&Graph, &[Tensor]) -> Tensor, inputs: &[Tensor]) {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let g = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.deep_clone().with_grad()).collect();
    let loss = build(&g, &leaves);
    g.backward(&loss).unwrap();

    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grad_of(leaf);
        for i in 0..leaf.numel() {
            let probe = |delta: f64| -> f64 {
                let shifted: Vec<Tensor> = leaves.iter().map(|t| t.deep_clone()).collect();
                let mut data = shifted[li].to_vec();
                data[i] += delta;
                shifted[li].copy_from(&data);
                let g2 = Graph::new();
                build(&g2, &shifted).scalar_value()
            };
            let numeric = (probe(H) - probe(-H)) / (2.0 * H);
            let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
            let rel = (analytic[i] - numeric).abs() / denom;
            assert!(
                rel < TOL,
                "leaf {li} element {i}: analytic {} vs numeric {numeric} (rel {rel:.2e})",
                analytic[i]
            );
        }
    }
}

fn seeded(shape: &[usize], seed: u64, name: &str) -> Tensor {
    let mut rng = substream(seed, name);
    Tensor::randn(shape, &mut rng)
}

#[test]
fn gradcheck_add_broadcast() {
    for seed in 0..10 {
        let a = seeded(&[2, 3], seed, "gc/add/a");
        let b = seeded(&[3], seed, "gc/add/b");
        gradcheck(
            |g, ts| {
                let s = g.add(&ts[0], &ts[1]).unwrap();
                g.mse(&s, &Tensor::zeros(&[2, 3])).unwrap()
            },
            &[a, b],
        );
    }
}

#[test]
fn gradcheck_sub_mul_scalar_mul() {
    for seed in 0..10 {
        let a = seeded(&[5], seed, "gc/smm/a");
        let b = seeded(&[5], seed, "gc/smm/b");
        gradcheck(
            |g, ts| {
                let d = g.sub(&ts[0], &ts[1]).unwrap();
                let p = g.mul(&d, &ts[0]).unwrap();
                let s = g.scalar_mul(&p, -1.7).unwrap();
                g.mse(&s, &Tensor::zeros(&[5])).unwrap()
            },
            &[a, b],
        );
    }
}

#[test]
fn gradcheck_matmul() {
    for seed in 0..10 {
        let a = seeded(&[3, 4], seed, "gc/mm/a");
        let b = seeded(&[4, 2], seed, "gc/mm/b");
        gradcheck(
            |g, ts| {
                let c = g.matmul(&ts[0], &ts[1]).unwrap();
                g.mse(&c, &Tensor::zeros(&[3, 2])).unwrap()
            },
            &[a, b],
        );
    }
}

#[test]
fn gradcheck_conv1d_stride1_padded() {
    for seed in 0..10 {
        let x = seeded(&[2, 2, 6], seed, "gc/conv/x");
        let w = seeded(&[3, 2, 3], seed, "gc/conv/w");
        let b = seeded(&[3], seed, "gc/conv/b");
        gradcheck(
            |g, ts| {
                let y = g.conv1d(&ts[0], &ts[1], Some(&ts[2]), 1, 1).unwrap();
                g.mse(&y, &Tensor::zeros(&[2, 3, 6])).unwrap()
            },
            &[x, w, b],
        );
    }
}

#[test]
fn gradcheck_conv1d_stride2() {
    for seed in 0..10 {
        let x = seeded(&[1, 2, 8], seed, "gc/conv2/x");
        let w = seeded(&[2, 2, 4], seed, "gc/conv2/w");
        gradcheck(
            |g, ts| {
                let y = g.conv1d(&ts[0], &ts[1], None, 2, 1).unwrap();
                g.mse(&y, &Tensor::zeros(&[1, 2, 4])).unwrap()
            },
            &[x, w],
        );
    }
}

#[test]
fn gradcheck_relu_away_from_kink() {
    for seed in 0..10 {
        // keep inputs off zero so the finite difference is valid
        let mut rng = substream(seed, "gc/relu");
        let data: Vec<f64> = (0..6)
            .map(|_| {
                let v: f64 = rng.random_range(0.1..1.0);
                if rng.random::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = t(&[6], &data);
        gradcheck(
            |g, ts| {
                let y = g.relu(&ts[0]).unwrap();
                g.mse(&y, &Tensor::full(&[6], 0.3)).unwrap()
            },
            &[x],
        );
    }
}

#[test]
fn gradcheck_maxpool_unique_maxima() {
    for seed in 0..10 {
        // distinct values make the argmax stable under the probe offset
        let mut rng = substream(seed, "gc/maxpool");
        let mut data: Vec<f64> = (0..12).map(|i| i as f64 * 0.37).collect();
        for i in (1..12).rev() {
            let j = rng.random_range(0..=i);
            data.swap(i, j);
        }
        let x = t(&[1, 2, 6], &data);
        gradcheck(
            |g, ts| {
                let y = g.maxpool1d(&ts[0], 2, 2).unwrap();
                g.mse(&y, &Tensor::zeros(&[1, 2, 3])).unwrap()
            },
            &[x],
        );
    }
}

#[test]
fn gradcheck_global_avg_pool() {
    for seed in 0..10 {
        let x = seeded(&[2, 3, 4], seed, "gc/gap");
        gradcheck(
            |g, ts| {
                let y = g.global_avg_pool1d(&ts[0]).unwrap();
                g.mse(&y, &Tensor::zeros(&[2, 3])).unwrap()
            },
            &[x],
        );
    }
}

#[test]
fn gradcheck_batchnorm_train() {
    for seed in 0..10 {
        let x = seeded(&[2, 2, 4], seed, "gc/bn/x");
        let gamma = seeded(&[2], seed, "gc/bn/g");
        let beta = seeded(&[2], seed, "gc/bn/b");
        gradcheck(
            |g, ts| {
                // fresh running buffers per probe; their update is out-of-graph
                let rm = Tensor::zeros(&[2]);
                let rv = Tensor::full(&[2], 1.0);
                let y = g
                    .batchnorm1d(&ts[0], &ts[1], &ts[2], &rm, &rv, true, 0.1, 1e-5)
                    .unwrap();
                g.mse(&y, &Tensor::full(&[2, 2, 4], 0.2)).unwrap()
            },
            &[x, gamma, beta],
        );
    }
}

#[test]
fn gradcheck_batchnorm_eval() {
    for seed in 0..10 {
        let x = seeded(&[1, 2, 3], seed, "gc/bne/x");
        let gamma = seeded(&[2], seed, "gc/bne/g");
        let beta = seeded(&[2], seed, "gc/bne/b");
        gradcheck(
            |g, ts| {
                let rm = Tensor::full(&[2], 0.5);
                let rv = Tensor::full(&[2], 2.0);
                let y = g
                    .batchnorm1d(&ts[0], &ts[1], &ts[2], &rm, &rv, false, 0.1, 1e-5)
                    .unwrap();
                g.mse(&y, &Tensor::zeros(&[1, 2, 3])).unwrap()
            },
            &[x, gamma, beta],
        );
    }
}

#[test]
fn gradcheck_softmax_cross_entropy() {
    for seed in 0..10 {
        let logits = seeded(&[3, 4], seed, "gc/sce");
        gradcheck(
            |g, ts| g.softmax_cross_entropy(&ts[0], &[0, 2, 3]).unwrap(),
            &[logits],
        );
    }
}

#[test]
fn gradcheck_mse_both_sides() {
    for seed in 0..10 {
        let p = seeded(&[7], seed, "gc/mse/p");
        let t0 = seeded(&[7], seed, "gc/mse/t");
        gradcheck(|g, ts| g.mse(&ts[0], &ts[1]).unwrap(), &[p, t0]);
    }
}

#[test]
fn gradcheck_concat_slice_reshape() {
    for seed in 0..10 {
        let a = seeded(&[1, 2, 3], seed, "gc/csr/a");
        let b = seeded(&[1, 2, 3], seed, "gc/csr/b");
        gradcheck(
            |g, ts| {
                let c = g.concat(&[&ts[0], &ts[1]], 1).unwrap();
                let s = g.slice(&c, 1, 1, 4).unwrap();
                let r = g.reshape(&s, &[9]).unwrap();
                g.mse(&r, &Tensor::zeros(&[9])).unwrap()
            },
            &[a, b],
        );
    }
}

#[test]
fn gradcheck_embedding_lookup() {
    for seed in 0..10 {
        let table = seeded(&[4, 3], seed, "gc/emb");
        gradcheck(
            |g, ts| {
                let e = g.embedding_lookup(&ts[0], &[1, 1, 3]).unwrap();
                g.mse(&e, &Tensor::zeros(&[3, 3])).unwrap()
            },
            &[table],
        );
    }
}

#[test]
fn gradcheck_dropout_fixed_mask() {
    // same rng stream on every probe keeps the mask constant
    for seed in 0..10 {
        let x = seeded(&[8], seed, "gc/drop/x");
        let master = substream(seed, "gc/drop/mask");
        gradcheck(
            |g, ts| {
                let mut rng = master.clone();
                let y = g.dropout(&ts[0], 0.5, true, &mut rng).unwrap();
                g.mse(&y, &Tensor::zeros(&[8])).unwrap()
            },
            &[x],
        );
    }
}
