use dmfuse::numcore::{
    finite_diff_check, read_checkpoint, write_checkpoint, GradCheckConfig, OpKind, Tape, Tensor, Var, CHECKPOINT_MAGIC,
};
use dmfuse::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so relu/abs-like kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// `sum(out * probe)` with a fixed random probe of the output shape.
fn probed(tape: &mut Tape, out: Var, seed: u64) -> dmfuse::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, tape.shape(out));
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn check_op(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> dmfuse::Result<Var>) {
    let report = finite_diff_check(
        |tape, v| {
            let out = f(tape, v)?;
            probed(tape, out, 99)
        },
        &inputs,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(
        report.max_rel_error < 1e-6,
        "{name}: relative error {:.3e} ({report:?})",
        report.max_rel_error
    );
}

#[test]
fn every_op_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = &mut rng;
    let a = rand_tensor(r, &[3, 4]);
    let b = rand_tensor(r, &[3, 4]);
    check_op("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check_op("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check_op("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check_op("scale", vec![a.clone()], |t, v| Ok(t.scale(v[0], -1.7)));
    check_op("shift", vec![a.clone()], |t, v| Ok(t.shift(v[0], 0.3)));
    check_op("matmul", vec![a.clone(), rand_tensor(r, &[4, 2])], |t, v| t.matmul(v[0], v[1]));
    check_op("transpose", vec![a.clone()], |t, v| t.transpose(v[0]));
    check_op("reshape", vec![a.clone()], |t, v| t.reshape(v[0], &[2, 6]));
    check_op("concat0", vec![a.clone(), rand_tensor(r, &[2, 4])], |t, v| t.concat(&[v[0], v[1]], 0));
    check_op("concat1", vec![a.clone(), rand_tensor(r, &[3, 1])], |t, v| t.concat(&[v[0], v[1]], 1));
    check_op("relu", vec![away_from_zero(r, &[4, 4])], |t, v| Ok(t.relu(v[0])));
    check_op("exp", vec![a.clone()], |t, v| Ok(t.exp(v[0])));
    check_op("powf", vec![a.map(|x| x.abs() + 0.5)], |t, v| Ok(t.powf(v[0], 2.5)));
    check_op("sum", vec![a.clone()], |t, v| Ok(t.sum(v[0])));
    check_op("mean", vec![a.clone()], |t, v| Ok(t.mean(v[0])));
    check_op("broadcast scalar", vec![rand_tensor(r, &[1])], |t, v| t.broadcast_to(v[0], &[3, 4]));
    check_op("broadcast trailing", vec![rand_tensor(r, &[4])], |t, v| t.broadcast_to(v[0], &[2, 3, 4]));
    check_op("softmax rows", vec![a.clone()], |t, v| t.softmax(v[0], 1));
    check_op("softmax cols", vec![a.clone()], |t, v| t.softmax(v[0], 0));
    check_op(
        "layer_norm",
        vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4]), rand_tensor(r, &[4])],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
    let x = rand_tensor(r, &[2, 4, 4]);
    check_op("spatial_mean", vec![x.clone()], |t, v| t.spatial_mean(v[0]));
    check_op("im2col", vec![x.clone()], |t, v| t.im2col(v[0], 3, 1, 1));
    check_op(
        "conv2d 1x1",
        vec![x.clone(), rand_tensor(r, &[3, 2, 1, 1]), rand_tensor(r, &[3])],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0),
    );
    check_op(
        "conv2d 3x3 stride 1",
        vec![x.clone(), rand_tensor(r, &[3, 2, 3, 3]), rand_tensor(r, &[3])],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    );
    check_op(
        "conv2d 3x3 stride 2",
        vec![x.clone(), rand_tensor(r, &[4, 2, 3, 3])],
        |t, v| t.conv2d(v[0], v[1], None, 2, 1),
    );
    check_op("4-d reshape", vec![rand_tensor(r, &[4, 4, 4, 4])], |t, v| {
        let y = t.reshape(v[0], &[16, 16])?;
        t.transpose(y)
    });
}

#[test]
fn chain_through_matmul_relu_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let w = rand_tensor(&mut rng, &[4, 5]);
    let report = finite_diff_check(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.relu(y);
            Ok(t.sum(y))
        },
        &[x, w],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn generic_apply_matches_named_ops() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::from_rows(&[&[1.0, -2.0], &[3.0, 0.0]]).unwrap(), true);
    let r1 = t.apply(&OpKind::Relu, &[a]).unwrap();
    let r2 = t.relu(a);
    assert_eq!(t.value(r1), t.value(r2));
    assert!(matches!("mystery".parse::<OpKind>(), Err(Error::UnknownOp(k)) if k == "mystery"));
    assert!(t.apply(&OpKind::Add, &[a]).is_err());
}

#[test]
fn identity_matmul_and_relu_definition() {
    let mut t = Tape::new();
    let i3 = t.constant(Tensor::eye(3));
    let a_val = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
    let a = t.constant(a_val.clone());
    let p = t.matmul(i3, a).unwrap();
    assert_eq!(t.value(p), &a_val);

    let x = t.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn relu_gradient_at_zero_is_zero() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![0.0, 1.0]), true);
    let r = t.relu(x);
    let s = t.sum(r);
    assert_eq!(t.backward(s).unwrap().get(x).data(), &[0.0, 1.0]);
}

#[test]
fn conv_1x1_on_single_pixel_is_matrix_vector() {
    let w = [[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]];
    let x = [0.5, -2.0, 1.5];
    let mut t = Tape::new();
    let xv = t.constant(Tensor::new(&[3, 1, 1], x.to_vec()).unwrap());
    let wv = t.constant(Tensor::new(&[2, 3, 1, 1], w.iter().flatten().copied().collect()).unwrap());
    let y = t.conv2d(xv, wv, None, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[2, 1, 1]);
    for o in 0..2 {
        let expect: f64 = (0..3).map(|i| w[o][i] * x[i]).sum();
        assert_eq!(t.value(y).data()[o], expect);
    }
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (ci, co, h, w) = (2, 3, 5, 4);
    let x = rand_tensor(&mut rng, &[ci, h, w]);
    let k = rand_tensor(&mut rng, &[co, ci, 3, 3]);
    let b = rand_tensor(&mut rng, &[co]);
    for stride in [1, 2] {
        let mut t = Tape::new();
        let (xv, kv, bv) = (t.constant(x.clone()), t.constant(k.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, kv, Some(bv), stride, 1).unwrap();
        let (oh, ow) = ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1);
        assert_eq!(t.shape(y), &[co, oh, ow]);
        let xd = |c: usize, i: isize, j: isize| -> f64 {
            if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                0.0
            } else {
                x.data()[(c * h + i as usize) * w + j as usize]
            }
        };
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                let ix = (ox * stride + kx) as isize - 1;
                                acc += k.data()[((o * ci + c) * 3 + ky) * 3 + kx] * xd(c, iy, ix);
                            }
                        }
                    }
                    let got = t.value(y).data()[(o * oh + oy) * ow + ox];
                    assert!((got - acc).abs() < 1e-12, "stride {stride} ({o},{oy},{ox}): {got} vs {acc}");
                }
            }
        }
    }
}

#[test]
fn softmax_examples_and_oracle() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::from_vec(vec![7.5, 7.5, 7.5]));
    let s = t.softmax(c, 0).unwrap();
    for v in t.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = t.constant(Tensor::from_vec(vec![0.0, 2f64.ln()]));
    let s = t.softmax(x, 0).unwrap();
    assert!((t.value(s).data()[0] - 1.0 / 3.0).abs() < 1e-12);
    assert!((t.value(s).data()[1] - 2.0 / 3.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let x = t.constant(Tensor::from_vec(v.clone()));
    let s = t.softmax(x, 0).unwrap();
    let z: f64 = v.iter().map(|a| a.exp()).sum();
    for (i, a) in v.iter().enumerate() {
        assert!((t.value(s).data()[i] - a.exp() / z).abs() < 1e-12);
    }

    // huge logits do not overflow
    let big = t.constant(Tensor::from_vec(vec![1000.0, 1001.0]));
    let s = t.softmax(big, 0).unwrap();
    assert!(t.value(s).is_finite());
}

#[test]
fn softmax_rows_sum_to_one_and_ignore_shifts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4, 6]).map(|v| 5.0 * v);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let s = t.softmax(xv, 1).unwrap();
    for r in 0..4 {
        let row = t.value(s).row(r);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&p| p > 0.0));
    }
    let shifted = t.shift(xv, 12.25);
    let s2 = t.softmax(shifted, 1).unwrap();
    assert!(t.value(s).max_abs_diff(t.value(s2)) < 1e-12);
    assert!(matches!(t.softmax(xv, 2), Err(Error::AxisOutOfRange { .. })));
}

#[test]
fn layer_norm_examples_and_oracle() {
    let mut t = Tape::new();
    let ones = t.constant(Tensor::ones(&[3]));
    let zeros = t.constant(Tensor::zeros(&[3]));
    let x = t.constant(Tensor::new(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap());
    let y = t.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

    let g2 = t.constant(Tensor::ones(&[2]));
    let b2 = t.constant(Tensor::zeros(&[2]));
    let x = t.constant(Tensor::new(&[1, 2], vec![-1.0, 1.0]).unwrap());
    let y = t.layer_norm(x, g2, b2, 0.0).unwrap();
    assert_eq!(t.value(y).data(), &[-1.0, 1.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let g8 = t.constant(Tensor::ones(&[8]));
    let b8 = t.constant(Tensor::zeros(&[8]));
    let x = t.constant(Tensor::new(&[1, 8], v.clone()).unwrap());
    let y = t.layer_norm(x, g8, b8, 1e-5).unwrap();
    let mu = v.iter().sum::<f64>() / 8.0;
    let var = v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / 8.0;
    let out = t.value(y).data();
    for i in 0..8 {
        assert!((out[i] - (v[i] - mu) / (var + 1e-5).sqrt()).abs() < 1e-12);
    }
    let m = out.iter().sum::<f64>() / 8.0;
    let s2 = out.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 8.0;
    assert!(m.abs() < 1e-9);
    assert!((s2 - 1.0).abs() < 1e-4, "variance {s2} (epsilon shrinks it slightly)");

    let wrong = t.constant(Tensor::ones(&[3]));
    assert!(t.layer_norm(x, wrong, b8, 1e-5).is_err());
}

#[test]
fn layer_norm_variance_is_unit_without_epsilon() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut t = Tape::new();
    let x = t.constant(rand_tensor(&mut rng, &[5, 16]));
    let g = t.constant(Tensor::ones(&[16]));
    let b = t.constant(Tensor::zeros(&[16]));
    let y = t.layer_norm(x, g, b, 0.0).unwrap();
    for r in 0..5 {
        let row = t.value(y).row(r);
        let m = row.iter().sum::<f64>() / 16.0;
        let s2 = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 16.0;
        assert!(m.abs() < 1e-9 && (s2 - 1.0).abs() < 1e-6);
    }
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    let sq = t.mul(x, x).unwrap();
    let l = t.sum(sq);
    assert_eq!(t.backward(l).unwrap().get(x).data(), &[2.0, 4.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![3.0]), true);
    let y = t.add(x, x).unwrap();
    let l = t.sum(y);
    assert_eq!(t.backward(l).unwrap().get(x).data(), &[2.0]);

    // a loss that does not depend on the leaf gives it a zero gradient
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![3.0, 4.0]), true);
    let other = t.leaf(Tensor::from_vec(vec![1.0]), true);
    let l = t.sum(other);
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).data(), &[0.0, 0.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    let c = t.constant(Tensor::scalar(5.0));
    assert!(matches!(t.backward(c), Err(Error::DetachedLoss)));
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[3, 2]));
    let msg = t.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    assert!(matches!(t.matmul(a, a), Err(Error::ShapeMismatch { op: "matmul", .. })));
}

#[test]
fn quadratic_is_exact_under_central_differences() {
    let r = finite_diff_check(
        |t, v| Ok(t.powf(v[0], 2.0)),
        &[Tensor::from_vec(vec![3.0])],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!((r.worst_analytic - 6.0).abs() < 1e-12);
    assert!((r.worst_numeric - 6.0).abs() < 1e-8);
    assert!(r.max_rel_error < 1e-9);
}

#[test]
fn toy_two_layer_net_loss_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[5, 3]);
    let y = rand_tensor(&mut rng, &[5, 2]);
    let theta = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])];
    let r = finite_diff_check(
        |t, v| {
            let xv = t.constant(x.clone());
            let h = t.matmul(xv, v[0])?;
            let h = t.relu(h);
            let o = t.matmul(h, v[1])?;
            let yv = t.constant(y.clone());
            let d = t.sub(o, yv)?;
            let d2 = t.mul(d, d)?;
            Ok(t.mean(d2))
        },
        &theta,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn finite_difference_rejects_non_finite_objectives() {
    let r = finite_diff_check(
        |t, v| {
            let e = t.exp(v[0]);
            Ok(t.sum(e))
        },
        &[Tensor::from_vec(vec![1e6])],
        &GradCheckConfig::default(),
    );
    assert!(matches!(r, Err(Error::NonFinite(_))));
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let x = t.leaf(rand_tensor(&mut rng, &[2, 3, 3]), true);
        let w = t.leaf(rand_tensor(&mut rng, &[4, 2, 3, 3]), true);
        let y = t.conv2d(x, w, None, 2, 1).unwrap();
        let y = t.relu(y);
        let s = t.softmax(t.shape(y).len().checked_sub(1).map(|_| y).unwrap(), 0).unwrap();
        let l = t.sum(s);
        let l2 = t.mul(l, l).unwrap();
        let g = t.backward(l2).unwrap();
        (t.value(y).clone(), g.get(x), g.get(w))
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let records = vec![
        ("fusion.spm.V".to_string(), rand_tensor(&mut rng, &[8])),
        ("model.head.reg.weight".to_string(), rand_tensor(&mut rng, &[4, 3, 2])),
        ("x".to_string(), Tensor::from_vec(vec![f64::MIN_POSITIVE, -0.0, 1e300])),
    ];
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &records).unwrap();
    assert_eq!(&buf[..4], CHECKPOINT_MAGIC);
    let back = read_checkpoint(&buf[..]).unwrap();
    assert_eq!(back.len(), records.len());
    for ((n0, t0), (n1, t1)) in records.iter().zip(&back) {
        assert_eq!(n0, n1);
        assert_eq!(t0.shape(), t1.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t0), bits(t1));
    }
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Checkpoint(_))));
    assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
}

#[test]
fn tensor_rejects_inconsistent_shapes() {
    assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new(&[2, 0], vec![]).is_err());
}
