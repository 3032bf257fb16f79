//! Engine and loss results against independent straightforward
//! implementations.

use margin_distill::data::{synth_blobs, Normalizer};
use margin_distill::distill::{margin_relu, partial_l2};
use margin_distill::nn::{BlockKind, ModelSpec};
use margin_distill::seeded_rng;
use margin_distill::tensor::{BnMode, Graph, Tensor};
use margin_distill::train::{evaluate, predict_logits, train_teacher, TrainConfig};
use rand::Rng;

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "element {i}: {x} vs {y}");
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = seeded_rng(10);
    for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 33, 8)] {
        let a = Tensor::randn(&[m, k], 1.0, &mut rng).unwrap();
        let b = Tensor::randn(&[k, n], 1.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
        let c = g.matmul(va, vb).unwrap();
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    expect[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        close(g.value(c).data(), &expect, 1e-12);
    }
}

fn conv_direct(x: &Tensor, w: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = <[usize; 4]>::try_from(x.dims()).unwrap();
    let [o, _, kh, kw] = <[usize; 4]>::try_from(w.dims()).unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = bias[oc];
                    for ic in 0..c {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let y = (i * stride + di) as isize - pad as isize;
                                let xx = (j * stride + dj) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                s += x.at4(b, ic, y as usize, xx as usize) * w.at4(oc, ic, di, dj);
                            }
                        }
                    }
                    out[((b * o + oc) * oh + i) * ow + j] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = seeded_rng(11);
    for &(n, c, h, w, o, k, stride, pad) in &[
        (1, 1, 5, 5, 1, 3, 1, 1),
        (2, 3, 7, 6, 4, 3, 1, 1),
        (2, 2, 7, 9, 3, 3, 2, 1),
        (1, 4, 6, 6, 5, 1, 1, 0),
        (3, 2, 9, 7, 2, 3, 2, 0),
    ] {
        let x = Tensor::randn(&[n, c, h, w], 1.0, &mut rng).unwrap();
        let wt = Tensor::randn(&[o, c, k, k], 1.0, &mut rng).unwrap();
        let bias = Tensor::randn(&[o], 1.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let vx = g.constant(x.clone()).unwrap();
        let vw = g.constant(wt.clone()).unwrap();
        let vb = g.constant(bias.clone()).unwrap();
        let y = g.conv2d(vx, vw, Some(vb), stride, pad).unwrap();
        close(g.value(y).data(), &conv_direct(&x, &wt, bias.data(), stride, pad), 1e-12);
    }
}

#[test]
fn batch_norm_matches_hand_statistics() {
    let mut rng = seeded_rng(12);
    let (n, c, h, w) = (5, 3, 4, 2);
    let x = Tensor::randn(&[n, c, h, w], 2.0, &mut rng).unwrap();
    let gamma = [0.5, -1.5, 2.0];
    let beta = [0.1, 0.0, -0.7];
    let eps = 1e-5;
    let mut g = Graph::new();
    let vx = g.constant(x.clone()).unwrap();
    let vg = g.constant(Tensor::new(&[3], gamma.to_vec()).unwrap()).unwrap();
    let vb = g.constant(Tensor::new(&[3], beta.to_vec()).unwrap()).unwrap();
    let (y, stats) = g
        .batch_norm(vx, vg, vb, &[0.0; 3], &[1.0; 3], BnMode::Training, eps)
        .unwrap();
    let stats = stats.expect("training mode reports statistics");
    let m = (n * h * w) as f64;
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| (0..h).flat_map(move |i| (0..w).map(move |j| (b, i, j))))
            .map(|(b, i, j)| x.at4(b, ch, i, j))
            .collect();
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        assert!((stats.mean[ch] - mean).abs() < 1e-12);
        assert!((stats.var_unbiased[ch] - var * m / (m - 1.0)).abs() < 1e-12);
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let expect = gamma[ch] * (x.at4(b, ch, i, j) - mean) / (var + eps).sqrt() + beta[ch];
                    assert!((g.value(y).at4(b, ch, i, j) - expect).abs() < 1e-12);
                }
            }
        }
    }

    // evaluation mode uses the given running statistics only
    let (y, stats) = g
        .batch_norm(vx, vg, vb, &[0.5, -0.5, 0.0], &[4.0, 1.0, 0.25], BnMode::Evaluation, eps)
        .unwrap();
    assert!(stats.is_none());
    let expect = gamma[1] * (x.at4(2, 1, 3, 1) + 0.5) / (1.0 + eps).sqrt() + beta[1];
    assert!((g.value(y).at4(2, 1, 3, 1) - expect).abs() < 1e-12);
}

/// `(T − S)²` unless `S ≤ T ≤ 0`, summed.
fn partial_l2_brute(t: &[f64], s: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..t.len() {
        let skip = s[i] <= t[i] && t[i] <= 0.0;
        if !skip {
            total += (t[i] - s[i]) * (t[i] - s[i]);
        }
    }
    total
}

#[test]
fn partial_l2_matches_brute_force_on_random_tensors() {
    let mut rng = seeded_rng(13);
    let boundary = [0.0, -0.0, -0.25, 0.25, -1.0];
    for case in 0..1000 {
        let len = rng.gen_range(1..40);
        let pick = |rng: &mut rand_chacha::ChaCha8Rng| {
            if rng.gen_bool(0.3) {
                boundary[rng.gen_range(0..boundary.len())]
            } else {
                rng.gen_range(-2.0..2.0)
            }
        };
        let t: Vec<f64> = (0..len).map(|_| pick(&mut rng)).collect();
        let mut s: Vec<f64> = (0..len).map(|_| pick(&mut rng)).collect();
        // exact ties between student and teacher
        for i in 0..len {
            if rng.gen_bool(0.1) {
                s[i] = t[i];
            }
        }
        let mut g = Graph::new();
        let vs = g.constant(Tensor::new(&[len], s.clone()).unwrap()).unwrap();
        let l = partial_l2(&mut g, &Tensor::new(&[len], t.clone()).unwrap(), vs).unwrap();
        assert_eq!(g.value(l).item().unwrap(), partial_l2_brute(&t, &s), "case {case}");
    }
}

#[test]
fn margin_relu_matches_elementwise_max() {
    let mut rng = seeded_rng(14);
    let x = Tensor::randn(&[3, 4, 2, 5], 1.0, &mut rng).unwrap();
    let m = [-0.1, -2.0, 0.0, -0.6];
    let y = margin_relu(&x, &m).unwrap();
    for b in 0..3 {
        for c in 0..4 {
            for i in 0..2 {
                for j in 0..5 {
                    assert_eq!(y.at4(b, c, i, j), x.at4(b, c, i, j).max(m[c]));
                }
            }
        }
    }
}

#[test]
fn evaluate_agrees_with_confusion_matrix() {
    let (train, test) = synth_blobs(4, 60, 8, 21).unwrap().train_test_split(80, 21).unwrap();
    let spec = ModelSpec {
        block_kind: BlockKind::SimpleConvBnRelu,
        blocks_per_group: 1,
        groups: vec![4, 8],
        width_multiplier: 1.0,
        num_classes: 4,
        input_shape: [1, 8, 8],
    };
    let cfg = TrainConfig {
        epochs: 1,
        lr_decay_epochs: vec![],
        batch_size: 16,
        ..TrainConfig::default()
    };
    let model = train_teacher(&spec, &train, &test, &cfg, None).unwrap().model;
    let norm = Normalizer::fit(&train).unwrap();
    let logits = predict_logits(&model, &test, &norm).unwrap();
    let mut confusion = [[0usize; 4]; 4];
    for (row, &label) in logits.data().chunks(4).zip(test.labels()) {
        let mut pred = 0;
        for k in 1..4 {
            if row[k] > row[pred] {
                pred = k;
            }
        }
        confusion[label][pred] += 1;
    }
    let correct: usize = (0..4).map(|k| confusion[k][k]).sum();
    let accuracy = 100.0 * correct as f64 / test.len() as f64;
    let err = evaluate(&model, &test, &norm).unwrap();
    assert!((err - (100.0 - accuracy)).abs() < 1e-9);
}
