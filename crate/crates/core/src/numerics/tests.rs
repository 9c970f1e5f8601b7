use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    let p = softmax(&[2f64.ln(), 0.0]).unwrap();
    assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    assert!(matches!(softmax(&[]), Err(Error::Empty(_))));
}

proptest! {
    #[test]
    fn softmax_normalizes_and_is_shift_invariant(
        x in prop::collection::vec(-50.0f64..50.0, 1..20),
        c in -30.0f64..30.0,
    ) {
        let p = softmax(&x).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0));
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_length_formula(t in 1usize..60, width in 1usize..8, stride in 1usize..5) {
        prop_assume!(t >= width);
        let seq = Tensor::zeros(vec![t, 2]);
        let kernel = Tensor::zeros(vec![width * 2, 3]);
        let out = conv1d(&seq, &kernel, None, width, stride).unwrap();
        prop_assert_eq!(out.rows(), (t - width) / stride + 1);
        prop_assert_eq!(Some(out.rows()), conv_out_len(t, width, stride));
    }
}

#[test]
fn layer_norm_examples() {
    let ones = [1.0; 4];
    let zeros = [0.0; 4];
    let y = layer_norm(&[3.0; 4], &ones, &zeros, 1e-5).unwrap();
    assert!(y.iter().all(|v| v.abs() < 1e-12));

    let y = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
    assert!((y[0] - 1.0).abs() < 1e-9 && (y[1] + 1.0).abs() < 1e-9);

    let b = [0.3, -2.0, 5.0, 0.0];
    let y = layer_norm(&[1.0, 7.0, -3.0, 2.0], &zeros, &b, 1e-5).unwrap();
    assert_eq!(y, b.to_vec());

    let x = [0.2, 1.7, -0.4, 3.3];
    let y = layer_norm(&x, &ones, &zeros, 1e-12).unwrap();
    let mean = y.iter().sum::<f64>() / 4.0;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);

    assert!(matches!(layer_norm(&x, &[1.0; 3], &zeros, 1e-5), Err(Error::Shape(_))));
}

#[test]
fn conv1d_examples() {
    let seq = Tensor::matrix(10, 1, (0..10).map(f64::from).collect()).unwrap();
    let identity = Tensor::identity(1);
    let out = conv1d(&seq, &identity, None, 1, 2).unwrap();
    assert_eq!(out.data(), &[0.0, 2.0, 4.0, 6.0, 8.0]);

    let k3 = Tensor::zeros(vec![3, 1]);
    assert_eq!(conv1d(&seq, &k3, None, 3, 2).unwrap().rows(), 4);

    let short = Tensor::zeros(vec![2, 1]);
    assert!(matches!(conv1d(&short, &k3, None, 3, 1), Err(Error::Shape(_))));
}

fn random_attention(rng: &mut ChaCha8Rng, d: usize) -> AttentionWeights {
    AttentionWeights {
        wq: rand_tensor(rng, d, d),
        bq: rand_tensor(rng, 1, d),
        wk: rand_tensor(rng, d, d),
        bk: rand_tensor(rng, 1, d),
        wv: rand_tensor(rng, d, d),
        bv: rand_tensor(rng, 1, d),
        wo: rand_tensor(rng, d, d),
        bo: rand_tensor(rng, 1, d),
    }
}

#[test]
fn attention_single_key_returns_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = random_attention(&mut rng, 4);
    let kv = rand_tensor(&mut rng, 1, 4);
    let q1 = rand_tensor(&mut rng, 1, 4);
    let q2 = rand_tensor(&mut rng, 1, 4);
    let a = multi_head_attention(&q1, &kv, &kv, &w, 2, &AttnMask::None).unwrap();
    let b = multi_head_attention(&q2, &kv, &kv, &w, 2, &AttnMask::None).unwrap();
    // value projection followed by output projection
    let v = kernels::linear(kv.data(), 1, w.wv.data(), Some(w.bv.data()), 4, 4);
    let o = kernels::linear(&v, 1, w.wo.data(), Some(w.bo.data()), 4, 4);
    for i in 0..4 {
        assert!((a.data()[i] - o[i]).abs() < 1e-12);
        assert!((b.data()[i] - o[i]).abs() < 1e-12);
    }
}

#[test]
fn attention_causal_and_uniform_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, 3, 4);
    let mut g = Graph::constant();
    let xv = g.input(x).unwrap();
    let a = g.attention(xv, xv, xv, 2, &AttnMask::Causal).unwrap();
    let p = g.attention_weights(a).unwrap();
    // head 0, query 0 attends only to key 0
    assert_eq!(&p[0..3], &[1.0, 0.0, 0.0]);

    let mut g = Graph::constant();
    let q = g.input(Tensor::zeros(vec![1, 4])).unwrap();
    let kv = g.input(rand_tensor(&mut rng, 2, 4)).unwrap();
    let a = g.attention(q, kv, kv, 1, &AttnMask::None).unwrap();
    assert_eq!(g.attention_weights(a).unwrap(), &[0.5, 0.5]);
}

#[test]
fn attention_rejects_indivisible_heads() {
    let x = Tensor::zeros(vec![2, 6]);
    let mut g = Graph::constant();
    let v = g.input(x).unwrap();
    assert!(matches!(g.attention(v, v, v, 4, &AttnMask::None), Err(Error::Shape(_))));
}

#[test]
fn backward_of_sum_is_ones_and_unreachable_params_are_zero() {
    let mut ps = ParamSet::new();
    ps.push("used", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
    ps.push("unused", Tensor::filled(vec![1, 4], 9.0)).unwrap();
    let mut g = Graph::new(&ps);
    let p = g.param(0);
    let loss = g.sum(p).unwrap();
    let grad = g.backward(loss).unwrap();
    assert!(grad.get(0).data().iter().all(|&v| v == 1.0));
    assert!(grad.get(1).data().iter().all(|&v| v == 0.0));
    assert!(grad.is_congruent(&ps));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut ps = ParamSet::new();
    ps.push("p", Tensor::zeros(vec![2, 2])).unwrap();
    let mut g = Graph::new(&ps);
    let p = g.param(0);
    assert!(matches!(g.backward(p), Err(Error::Shape(_))));
}

#[test]
fn non_finite_values_surface_as_errors() {
    let mut g = Graph::constant();
    assert!(matches!(g.input(Tensor::scalar(f64::NAN)), Err(Error::NonFinite(_))));
    let big = g.input(Tensor::scalar(1e300)).unwrap();
    assert!(matches!(g.mul(big, big), Err(Error::NonFinite(_))));
}

/// A loss touching every graph op, parameterized so finite differences can probe it.
fn every_op_loss<'p>(g: &mut Graph<'p>, x: &'p Tensor) -> Result<Var> {
    let xv = g.input_ref(x)?;
    let w = g.param(0);
    let b = g.param(1);
    let h = g.linear(xv, w, Some(b))?; // 5x4
    let h = g.swish(h)?;
    let (ln_g, ln_b) = (g.param(2), g.param(3));
    let h = g.layer_norm(h, ln_g, ln_b, 1e-5)?;
    let a = g.attention(h, h, h, 2, &AttnMask::Causal)?;
    let h = g.add(h, a)?;
    let conv_w = g.param(4);
    let c = g.conv1d(h, conv_w, None, 2, 2)?; // 2x8
    let c = g.glu(c)?; // 2x4
    let (dw, db) = (g.param(5), g.param(6));
    let padded = g.pad_rows(c, 1, 1)?;
    let d = g.depthwise_conv(padded, dw, db)?; // 4x4
    let d = g.slice_rows(d, 1, 3)?;
    let d = g.select_rows(d, &[2, 0, 2])?;
    let row = g.param(7);
    let d = g.add_row(d, row)?;
    let m = g.matmul(d, h, false, true)?; // 3x5
    let m2 = g.matmul(m, h, false, false)?; // 3x4
    let m3 = g.matmul(h, m, true, true)?; // 4x3
    let e_table = g.param(8);
    let e = g.embedding(e_table, &[1, 0, 1, 2])?; // 4x3
    let p = g.mul(m3, e)?;
    let p = g.scale(p, 0.5)?;
    let r = g.relu(p)?;
    let s = g.sum(r)?;
    let ce = g.cross_entropy(p, &[0, 2, 1, 1])?;
    let s = g.scale(s, 0.1)?;
    let s2 = g.sum(m2)?;
    let s2 = g.scale(s2, 0.01)?;
    let total = g.add(ce, s)?;
    g.add(total, s2)
}

fn every_op_params(seed: u64) -> (ParamSet, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    ps.push("w", rand_tensor(&mut rng, 3, 4)).unwrap();
    ps.push("b", rand_tensor(&mut rng, 1, 4)).unwrap();
    ps.push("ln_g", rand_tensor(&mut rng, 1, 4)).unwrap();
    ps.push("ln_b", rand_tensor(&mut rng, 1, 4)).unwrap();
    ps.push("conv", rand_tensor(&mut rng, 8, 8)).unwrap();
    ps.push("dw", rand_tensor(&mut rng, 3, 4)).unwrap();
    ps.push("db", rand_tensor(&mut rng, 1, 4)).unwrap();
    ps.push("row", rand_tensor(&mut rng, 1, 4)).unwrap();
    ps.push("emb", rand_tensor(&mut rng, 3, 3)).unwrap();
    let x = rand_tensor(&mut rng, 5, 3);
    (ps, x)
}

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..3 {
        let (ps, x) = every_op_params(seed);
        let mut g = Graph::new(&ps);
        let loss = every_op_loss(&mut g, &x).unwrap();
        let grad = g.backward(loss).unwrap();
        let report = finite_diff_check(
            &ps,
            &grad,
            |p| {
                let mut g = Graph::new(p);
                let l = every_op_loss(&mut g, &x)?;
                Ok(g.scalar(l))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "seed {seed}: {:?}", report.params);
    }
}

#[test]
fn finite_diff_check_catches_corrupted_gradient() {
    let (ps, x) = every_op_params(7);
    let mut g = Graph::new(&ps);
    let loss = every_op_loss(&mut g, &x).unwrap();
    let mut grad = g.backward(loss).unwrap();
    grad.get_mut(0).data_mut()[1] *= 2.0;
    let report = finite_diff_check(
        &ps,
        &grad,
        |p| {
            let mut g = Graph::new(p);
            let l = every_op_loss(&mut g, &x)?;
            Ok(g.scalar(l))
        },
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(!report.passed);
    assert_eq!(report.params[0].worst_index, 1);
}

#[test]
fn finite_diff_check_on_empty_model_passes_vacuously() {
    let ps = ParamSet::new();
    let grad = Gradient::zeros_like(&ps);
    let report = finite_diff_check(&ps, &grad, |_| Ok(1.0), 1e-5, 1e-4).unwrap();
    assert!(report.passed);
    assert!(report.params.is_empty());
    assert!(finite_diff_check(&ps, &grad, |_| Ok(1.0), 0.0, 1e-4).is_err());
}

#[test]
fn gradients_accumulate_with_scale() {
    let (ps, x) = every_op_params(3);
    let mut g = Graph::new(&ps);
    let loss = every_op_loss(&mut g, &x).unwrap();
    let once = g.backward(loss).unwrap();
    let mut acc = Gradient::zeros_like(&ps);
    g.backward_into(loss, &mut acc, 0.5).unwrap();
    g.backward_into(loss, &mut acc, 0.5).unwrap();
    for (a, b) in acc.tensors().iter().zip(once.tensors()) {
        assert!(a.max_abs_diff(b) < 1e-12);
    }
}
