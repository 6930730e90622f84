use magnet::nn::gradcheck::{central_difference, rel_err, FD_STEP};
use magnet::nn::{
    param_grads, softmax_t, BatchNorm1d, BiGru, ForwardCtx, Graph, Init, Linear,
    MultiHeadAttention, ParamStore, Tensor,
};
use magnet::MagnetError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Worst relative error between analytic and central-difference gradients
/// over every entry of every trainable parameter.
fn max_param_grad_error(
    store: &ParamStore,
    floor: f64,
    build: impl Fn(&mut Graph<f64>, &ParamStore) -> magnet::nn::Var,
) -> f64 {
    let mut g = Graph::<f64>::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss).unwrap();
    let analytic = param_grads(&g, &grads, store);
    let eval = |s: &ParamStore| {
        let mut g = Graph::<f64>::inference();
        let l = build(&mut g, s);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (id, grad) in analytic {
        for idx in 0..grad.len() {
            let num = central_difference(store, id, idx, FD_STEP, eval);
            worst = worst.max(rel_err(grad.data()[idx], num, floor));
        }
    }
    worst
}

#[test]
fn linear_identity_weights() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lin = Linear::init(&mut store, &mut rng, "l", 2, 2, Init::Zero).unwrap();
    store
        .set("l.weight", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap())
        .unwrap();
    let y = lin.apply(&store, &Tensor::row(vec![1.0, 2.0])).unwrap();
    assert_eq!(y.data(), &[1.0, 2.0]);
}

#[test]
fn linear_zero_input_yields_bias() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lin = Linear::init(&mut store, &mut rng, "l", 3, 2, Init::FanIn).unwrap();
    store.set("l.bias", Tensor::row(vec![3.0, -1.0])).unwrap();
    let y = lin.apply(&store, &Tensor::zeros(&[1, 3])).unwrap();
    assert_eq!(y.data(), &[3.0, -1.0]);
}

#[test]
fn linear_shape_mismatch_names_both_shapes() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let lin = Linear::init(&mut store, &mut rng, "l", 3, 2, Init::FanIn).unwrap();
    let err = lin.apply(&store, &Tensor::zeros(&[1, 4])).unwrap_err();
    assert!(matches!(err, MagnetError::Dimension { .. }));
    let msg = err.to_string();
    assert!(msg.contains("[1, 4]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let lin = Linear::init(&mut store, &mut rng, "l", 4, 3, Init::FanIn).unwrap();
    store.set("l.bias", random_tensor(&mut rng, 1, 3)).unwrap();
    let x = random_tensor(&mut rng, 5, 4);
    let err = max_param_grad_error(&store, 1e-8, |g, s| {
        let xv = g.constant(x.clone());
        let y = lin.forward(g, s, xv).unwrap();
        let y2 = g.square(y);
        g.sum(y2)
    });
    assert!(err < 1e-6, "linear grad rel err {err}");
}

#[test]
fn bigru_length_one_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let gru = BiGru::init(&mut store, &mut rng, "g", 3, 4).unwrap();
    let x = random_tensor(&mut rng, 1, 3);
    let y = gru.apply(&store, &x).unwrap();
    assert_eq!(y.shape(), &[1, 8]);
    // one step from h0 = 0 in each direction
    let step = |prefix: &str| {
        let w_ih = store.get(&format!("{prefix}.w_ih")).unwrap();
        let xi = x.matmul(w_ih).unwrap();
        (0..4)
            .map(|j| {
                let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
                let z = sig(xi.get(0, 4 + j));
                let n = xi.get(0, 8 + j).tanh();
                (1.0 - z) * n
            })
            .collect::<Vec<_>>()
    };
    let expect: Vec<f64> = [step("g.fwd"), step("g.bwd")].concat();
    for (a, b) in y.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn bigru_zero_sequence_is_reversal_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let gru = BiGru::init(&mut store, &mut rng, "g", 3, 4).unwrap();
    let zeros = Tensor::zeros(&[6, 3]);
    let y = gru.apply(&store, &zeros).unwrap();
    let rev = zeros.clone();
    let y_rev = gru.apply(&store, &rev).unwrap();
    assert_eq!(y, y_rev);
    // zero input, zero biases, h0 = 0 is a fixed point
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn bigru_rejects_empty_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let gru = BiGru::init(&mut store, &mut rng, "g", 3, 4).unwrap();
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let err = gru.run(&mut g, &store, x, 1, 0).unwrap_err();
    assert!(matches!(err, MagnetError::Input(_)));
}

#[test]
fn bigru_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let gru = BiGru::init(&mut store, &mut rng, "g", 3, 4).unwrap();
    for name in ["g.fwd.b_ih", "g.fwd.b_hh", "g.bwd.b_ih", "g.bwd.b_hh"] {
        store.set(name, random_tensor(&mut rng, 1, 12)).unwrap();
    }
    let x = random_tensor(&mut rng, 2 * 5, 3);
    let target = random_tensor(&mut rng, 2, 8);
    let err = max_param_grad_error(&store, 1e-6, |g, s| {
        let xv = g.constant(x.clone());
        let y = gru.run(g, s, xv, 2, 5).unwrap();
        let t = g.constant(target.clone());
        let p = g.mul(y, t).unwrap();
        g.sum(p)
    });
    assert!(err < 1e-4, "bigru grad rel err {err}");
}

#[test]
fn mha_single_step_is_value_projection_plus_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::init(&mut store, &mut rng, "a", 128, 8).unwrap();
    let x = random_tensor(&mut rng, 1, 128);
    let (y, probs) = mha.apply(&store, &x).unwrap();
    assert!(probs.iter().all(|&p| p == 1.0));
    let v = mha.v.apply(&store, &x).unwrap();
    let mut expect = mha.o.apply(&store, &v).unwrap();
    expect.add_assign(&x);
    for (a, b) in y.data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mha_attention_rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::init(&mut store, &mut rng, "a", 128, 8).unwrap();
    let x = random_tensor(&mut rng, 7, 128).map(|v| 3.0 * v);
    let (_, probs) = mha.apply(&store, &x).unwrap();
    assert_eq!(probs.len(), 8 * 7 * 7);
    for row in probs.chunks(7) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn mha_wrong_feature_dim_is_config_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::init(&mut store, &mut rng, "a", 128, 8).unwrap();
    let err = mha.apply(&store, &Tensor::zeros(&[3, 64])).unwrap_err();
    assert!(matches!(err, MagnetError::Config(_)));
}

#[test]
fn mha_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::init(&mut store, &mut rng, "a", 16, 4).unwrap();
    for n in ["q", "k", "v", "o"] {
        store.set(&format!("a.{n}.bias"), random_tensor(&mut rng, 1, 16)).unwrap();
    }
    let x = random_tensor(&mut rng, 2 * 4, 16);
    let target = random_tensor(&mut rng, 8, 16);
    let err = max_param_grad_error(&store, 1e-6, |g, s| {
        let xv = g.constant(x.clone());
        let (y, _) = mha.run(g, s, xv, 2, 4).unwrap();
        let t = g.constant(target.clone());
        let p = g.mul(y, t).unwrap();
        let p2 = g.square(p);
        g.sum(p2)
    });
    assert!(err < 1e-4, "mha grad rel err {err}");
}

#[test]
fn softmax_equal_logits_is_uniform() {
    for tau in [0.1, 1.0, 2.0, 50.0] {
        let p = softmax_t(&[0.7; 5], tau).unwrap();
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }
}

#[test]
fn softmax_high_temperature_limit() {
    let p = softmax_t(&[2.0, 0.0, 0.0], 1e6).unwrap();
    assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-4));
}

#[test]
fn softmax_matches_direct_formula() {
    let p = softmax_t(&[1.0, 2.0, 3.0], 2.0).unwrap();
    let e: Vec<f64> = [0.5f64, 1.0, 1.5].iter().map(|x| x.exp()).collect();
    let z: f64 = e.iter().sum();
    for (a, b) in p.iter().zip(&e) {
        assert!((a - b / z).abs() < 1e-15);
    }
    let frozen = [0.186_323_723_225_847_6, 0.307_195_885_718_498_43, 0.506_480_391_055_654];
    for (a, b) in p.iter().zip(frozen) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn softmax_rejects_nonpositive_temperature() {
    assert!(matches!(softmax_t(&[1.0], 0.0), Err(MagnetError::Config(_))));
    assert!(matches!(softmax_t(&[1.0], -1.0), Err(MagnetError::Config(_))));
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(
        logits in prop::collection::vec(-1e3f64..1e3, 1..12),
        tau in 1e-3f64..1e3,
    ) {
        let p = softmax_t(&logits, tau).unwrap();
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn grad_of_sum_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
    let l = g.sum(x);
    let grads = g.backward(l).unwrap();
    assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn grad_of_half_squared_norm_is_x() {
    let data = vec![1.0, -2.0, 3.0, 0.5];
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::row(data.clone()));
    let sq = g.square(x);
    let s = g.sum(sq);
    let l = g.scale(s, 0.5);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), data.as_slice());
}

#[test]
fn non_scalar_loss_is_usage_error() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::row(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(MagnetError::Usage(_))));
}

#[test]
fn batch_norm_train_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let bn = BatchNorm1d::init(&mut store, "bn", 5).unwrap();
    store.set("bn.gamma", random_tensor(&mut rng, 1, 5)).unwrap();
    store.set("bn.beta", random_tensor(&mut rng, 1, 5)).unwrap();
    let lin = Linear::init(&mut store, &mut rng, "l", 3, 5, Init::FanIn).unwrap();
    let x = random_tensor(&mut rng, 6, 3);
    let target = random_tensor(&mut rng, 6, 5);
    let err = max_param_grad_error(&store, 1e-6, |g, s| {
        let mut ctx = ForwardCtx::train(None);
        let xv = g.constant(x.clone());
        let h = lin.forward(g, s, xv).unwrap();
        let y = bn.forward(g, s, h, &mut ctx).unwrap();
        let t = g.constant(target.clone());
        let p = g.mul(y, t).unwrap();
        let p2 = g.square(p);
        g.sum(p2)
    });
    assert!(err < 1e-4, "batch norm grad rel err {err}");
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x0: Vec<f64> = (0..6).map(|_| rng.random_range(0.2..1.5)).collect();
    let f = |g: &mut Graph<f64>, x: magnet::nn::Var| {
        let e = g.exp(x);
        let l = g.log(x);
        let s = g.sigmoid(x);
        let t = g.tanh(x);
        let r = g.sqrt(x);
        let lr = g.leaky_relu(t, 0.01);
        let a = g.mul(e, l).unwrap();
        let b = g.div(s, r).unwrap();
        let c = g.concat_cols(&[a, b, lr]).unwrap();
        let ls = g.log_softmax_rows(c, 2.0).unwrap();
        let sm = g.softmax_rows(c, 0.5).unwrap();
        let lse = g.logsumexp_rows(c);
        let sl = g.slice_cols(ls, 1, 4).unwrap();
        let gt = g.gather(sm, vec![0, 3, 3, 5]).unwrap();
        let m = g.max(sl);
        let s1 = g.sum(gt);
        let s2 = g.mean(lse);
        let s3 = g.add(s1, s2).unwrap();
        g.add(s3, m).unwrap()
    };
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::row(x0.clone()));
    let l = f(&mut g, x);
    let grads = g.backward(l).unwrap();
    let analytic = grads.wrt(x).unwrap().clone();
    for i in 0..x0.len() {
        let eval = |delta: f64| {
            let mut xs = x0.clone();
            xs[i] += delta;
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::row(xs));
            let l = f(&mut g, x);
            g.value(l).item()
        };
        let num = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        assert!(
            rel_err(analytic.data()[i], num, 1e-6) < 1e-6,
            "entry {i}: {} vs {num}",
            analytic.data()[i]
        );
    }
}

#[test]
fn eval_mode_is_deterministic_and_ignores_dropout() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random_tensor(&mut rng, 4, 3);
    let run = |seed: Option<u64>| {
        let mut drop_rng = seed.map(ChaCha8Rng::seed_from_u64);
        let mut ctx = match drop_rng.as_mut() {
            Some(r) => ForwardCtx::train(Some(r)),
            None => ForwardCtx::eval(),
        };
        let mut g = Graph::<f64>::inference();
        let xv = g.constant(x.clone());
        let y = magnet::nn::dropout(&mut g, xv, 0.5, &mut ctx).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(None), x);
    assert_eq!(run(Some(1)), run(Some(1)));
    assert_ne!(run(Some(1)), x);
}
