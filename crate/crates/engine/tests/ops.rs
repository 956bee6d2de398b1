use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tte_engine::tape::{gelu, selu, softmax_in_place, SELU_LAMBDA};
use tte_engine::{check_op, AttentionWeights, EngineError, Mode, ParamStore, Tape, Tensor, Var};

const OP_TOL: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn bn_store(feats: usize) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add_buffer("bn.mean", Tensor::zeros([feats])).unwrap();
    s.add_buffer("bn.var", Tensor::full([feats], 1.0)).unwrap();
    s
}

fn attn_weights(tape: &mut Tape<'_, f64>, v: &[Var]) -> AttentionWeights {
    let _ = tape;
    AttentionWeights {
        wq: v[1],
        bq: Some(v[2]),
        wk: v[3],
        bk: Some(v[4]),
        wv: v[5],
        bv: Some(v[6]),
        wo: v[7],
        bo: Some(v[8]),
    }
}

// ------------------------------------------------------------------ affine

#[test]
fn affine_identity_is_passthrough() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
    let w = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(Tensor::zeros([3]));
    let y = tape.affine(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

#[test]
fn affine_hand_arithmetic() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    let b = tape.constant(t(&[1], &[3.0]));
    let y = tape.affine(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1]);
    assert_eq!(tape.value(y).data(), &[6.0]);
}

#[test]
fn affine_shape_mismatch() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let x = tape.constant(Tensor::<f64>::zeros([2, 3]));
    let w = tape.constant(Tensor::zeros([4, 1]));
    assert!(matches!(tape.affine(x, w, None), Err(EngineError::Shape { .. })));
}

#[test]
fn affine_gradient_seed_7() {
    let mut r = rng(7);
    let inputs = [
        Tensor::randn([3, 2, 4], 1.0, &mut r),
        Tensor::randn([4, 5], 1.0, &mut r),
        Tensor::randn([5], 1.0, &mut r),
    ];
    let store = ParamStore::new();
    let rep = check_op(&store, Mode::Train, &inputs, 7, |tp, v| tp.affine(v[0], v[1], Some(v[2]))).unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

// ------------------------------------------------------------- activations

#[test]
fn selu_values() {
    assert_eq!(selu(0.0f64), 0.0);
    assert!((selu(1.0f64) - 1.050_700_987).abs() < 1e-9);
    assert!((selu(1.0f64) - SELU_LAMBDA).abs() < 1e-15);
    // saturates at -lambda * alpha
    assert!((selu(-50.0f64) + 1.050_700_987_355_480_5 * 1.673_263_242_354_377_3).abs() < 1e-12);
}

#[test]
fn gelu_values() {
    assert_eq!(gelu(0.0f64), 0.0);
    // Phi(1) = 0.841344746068543
    assert!((gelu(1.0f64) - 0.841_344_746_068_543).abs() < 1e-12);
}

/// Inputs bounded away from 0 so no finite-difference stencil crosses a kink.
fn away_from_kink(shape: [usize; 2], seed: u64) -> Tensor<f64> {
    let mut x: Tensor<f64> = Tensor::randn(shape, 1.0, &mut rng(seed));
    for e in x.data_mut() {
        if e.abs() < 0.05 {
            *e += 0.1f64.copysign(*e);
        }
    }
    x
}

#[test]
fn activation_gradients() {
    let store = ParamStore::new();
    for seed in 0..10 {
        let x = [away_from_kink([4, 5], seed)];
        for (name, rep) in [
            ("relu", check_op(&store, Mode::Train, &x, seed, |tp, v| Ok(tp.relu(v[0])))),
            ("selu", check_op(&store, Mode::Train, &x, seed, |tp, v| Ok(tp.selu(v[0])))),
            ("gelu", check_op(&store, Mode::Train, &x, seed, |tp, v| Ok(tp.gelu(v[0])))),
        ] {
            let rep = rep.unwrap();
            assert!(rep.max_rel_error < 1e-6, "{name} seed {seed}: {rep:?}");
        }
    }
}

// -------------------------------------------------------------- batch norm

#[test]
fn batch_norm_on_standardised_batch_is_identity() {
    let store = bn_store(2);
    let mut tape = Tape::new(&store, Mode::Train, 0);
    // each column has mean 0 and (biased) variance 1
    let data = [1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0];
    let x = tape.constant(t(&[4, 2], &data));
    let g = tape.constant(Tensor::full([2], 1.0));
    let b = tape.constant(Tensor::zeros([2]));
    let (m, v) = (store.id("bn.mean").unwrap(), store.id("bn.var").unwrap());
    let y = tape.batch_norm(x, g, b, m, v).unwrap();
    for (a, e) in tape.value(y).data().iter().zip(data) {
        assert!((a - e).abs() < 1e-5);
    }
}

#[test]
fn batch_norm_constant_batch_gives_beta() {
    let store = bn_store(3);
    let mut tape = Tape::new(&store, Mode::Train, 0);
    let x = tape.constant(Tensor::full([5, 3], 4.2));
    let g = tape.constant(t(&[3], &[2.0, -1.0, 0.5]));
    let b = tape.constant(t(&[3], &[0.1, 0.2, 0.3]));
    let (m, v) = (store.id("bn.mean").unwrap(), store.id("bn.var").unwrap());
    let y = tape.batch_norm(x, g, b, m, v).unwrap();
    for row in tape.value(y).data().chunks(3) {
        for (a, e) in row.iter().zip([0.1, 0.2, 0.3]) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_norm_single_row_in_train_mode_fails() {
    let store = bn_store(2);
    let mut tape = Tape::new(&store, Mode::Train, 0);
    let x = tape.constant(Tensor::zeros([1, 2]));
    let g = tape.constant(Tensor::full([2], 1.0));
    let b = tape.constant(Tensor::zeros([2]));
    let (m, v) = (store.id("bn.mean").unwrap(), store.id("bn.var").unwrap());
    assert!(matches!(tape.batch_norm(x, g, b, m, v), Err(EngineError::BatchTooSmall(1))));

    // eval mode is fine with one row
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let x = tape.constant(Tensor::zeros([1, 2]));
    let g = tape.constant(Tensor::full([2], 1.0));
    let b = tape.constant(Tensor::zeros([2]));
    assert!(tape.batch_norm(x, g, b, m, v).is_ok());
}

#[test]
fn batch_norm_running_stats_use_momentum() {
    let mut store = bn_store(1);
    let (m, v) = (store.id("bn.mean").unwrap(), store.id("bn.var").unwrap());
    let updates = {
        let mut tape = Tape::new(&store, Mode::Train, 0);
        let x = tape.constant(t(&[2, 1], &[1.0, 3.0]));
        let g = tape.constant(Tensor::full([1], 1.0));
        let b = tape.constant(Tensor::zeros([1]));
        tape.batch_norm(x, g, b, m, v).unwrap();
        tape.take_buffer_updates()
    };
    updates.apply(&mut store);
    // batch mean 2, unbiased variance 2
    assert!((store.value("bn.mean").unwrap().data()[0] - 0.2).abs() < 1e-12);
    assert!((store.value("bn.var").unwrap().data()[0] - (0.9 + 0.2)).abs() < 1e-12);
}

#[test]
fn batch_norm_gradients() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let mut store = bn_store(3);
        *store.value_mut("bn.mean").unwrap() = Tensor::randn([3], 1.0, &mut r);
        *store.value_mut("bn.var").unwrap() = Tensor::from_f64([3], &[0.5, 1.5, 2.0]).unwrap();
        let (m, v) = (store.id("bn.mean").unwrap(), store.id("bn.var").unwrap());
        let inputs = [
            Tensor::randn([6, 3], 1.0, &mut r),
            Tensor::randn([3], 1.0, &mut r),
            Tensor::randn([3], 1.0, &mut r),
        ];
        for mode in [Mode::Train, Mode::Eval] {
            let rep = check_op(&store, mode, &inputs, seed, |tp, x| tp.batch_norm(x[0], x[1], x[2], m, v)).unwrap();
            assert!(rep.max_rel_error < OP_TOL, "{mode:?} seed {seed}: {rep:?}");
        }
    }
}

// -------------------------------------------------------------- layer norm

#[test]
fn layer_norm_identity_and_constant_rows() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let data = [1.0, -1.0, 1.0, -1.0, 2.0, 2.0, 2.0, 2.0];
    let x = tape.constant(t(&[2, 4], &data));
    let g = tape.constant(Tensor::full([4], 1.0));
    let b = tape.constant(t(&[4], &[0.0, 0.0, 0.0, 0.0]));
    let y = tape.layer_norm(x, g, b).unwrap();
    let out = tape.value(y).data();
    for (a, e) in out[..4].iter().zip(&data[..4]) {
        assert!((a - e).abs() < 1e-5);
    }
    // constant row -> beta (zero)
    assert!(out[4..].iter().all(|e| e.abs() < 1e-12));
}

#[test]
fn layer_norm_gradients() {
    let store = ParamStore::new();
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let inputs = [
            Tensor::randn([2, 3, 5], 1.0, &mut r),
            Tensor::randn([5], 1.0, &mut r),
            Tensor::randn([5], 1.0, &mut r),
        ];
        let rep = check_op(&store, Mode::Train, &inputs, seed, |tp, x| tp.layer_norm(x[0], x[1], x[2])).unwrap();
        assert!(rep.max_rel_error < OP_TOL, "seed {seed}: {rep:?}");
    }
}

// --------------------------------------------------------------- attention

fn identity(d: usize) -> Tensor<f64> {
    let mut m = Tensor::zeros([d, d]);
    for i in 0..d {
        m.data_mut()[i * d + i] = 1.0;
    }
    m
}

#[test]
fn equal_keys_give_mean_of_values() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let mut r = rng(1);
    let q = tape.constant(Tensor::randn([1, 3, 4], 1.0, &mut r));
    let k = tape.constant(Tensor::full([1, 3, 4], 0.7));
    let vt: Tensor<f64> = Tensor::randn([1, 3, 4], 1.0, &mut r);
    let v = tape.constant(vt.clone());
    let out = tape.attention(q, k, v, 2).unwrap();
    let w = tape.attention_weights(out).unwrap();
    assert!(w.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
    let vd = vt.data();
    for i in 0..3 {
        for c in 0..4 {
            let mean = (vd[c] + vd[4 + c] + vd[8 + c]) / 3.0;
            assert!((tape.value(out).data()[i * 4 + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn single_token_attends_to_itself() {
    let store = ParamStore::new();
    let mut r = rng(2);
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let x = tape.constant(Tensor::randn([2, 1, 4], 1.0, &mut r));
    let wv_t: Tensor<f64> = Tensor::randn([4, 4], 1.0, &mut r);
    let wo_t: Tensor<f64> = Tensor::randn([4, 4], 1.0, &mut r);
    let wq = tape.constant(Tensor::randn([4, 4], 1.0, &mut r));
    let wk = tape.constant(Tensor::randn([4, 4], 1.0, &mut r));
    let wv = tape.constant(wv_t);
    let wo = tape.constant(wo_t);
    let w = AttentionWeights { wq, bq: None, wk, bk: None, wv, bv: None, wo, bo: None };
    let (out, core) = tape.multi_head_attention(x, &w, 2).unwrap();
    assert!(tape.attention_weights(core).unwrap().iter().all(|&p| p == 1.0));
    let v = tape.affine(x, wv, None).unwrap();
    let expect = tape.affine(v, wo, None).unwrap();
    for (a, e) in tape.value(out).data().iter().zip(tape.value(expect).data()) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn heads_must_divide_width() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let x = tape.constant(Tensor::<f64>::zeros([1, 2, 6]));
    let i = tape.constant(identity(6));
    let w = AttentionWeights { wq: i, bq: None, wk: i, bk: None, wv: i, bv: None, wo: i, bo: None };
    assert!(matches!(tape.multi_head_attention(x, &w, 4), Err(EngineError::Config(_))));
}

/// Straight-line evaluation of multi-head attention for one batch element.
#[allow(clippy::too_many_arguments)]
fn brute_force_mha(
    x: &[f64],
    t: usize,
    d: usize,
    heads: usize,
    wq: &[f64],
    bq: &[f64],
    wk: &[f64],
    bk: &[f64],
    wv: &[f64],
    bv: &[f64],
    wo: &[f64],
    bo: &[f64],
) -> Vec<f64> {
    let proj = |w: &[f64], b: &[f64]| {
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            for o in 0..d {
                let mut s = b[o];
                for c in 0..d {
                    s += x[i * d + c] * w[c * d + o];
                }
                out[i * d + o] = s;
            }
        }
        out
    };
    let (q, k, v) = (proj(wq, bq), proj(wk, bk), proj(wv, bv));
    let dh = d / heads;
    let mut concat = vec![0.0; t * d];
    for h in 0..heads {
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for c in 0..dh {
                concat[i * d + h * dh + c] = (0..t).map(|j| (scores[j] - mx).exp() / z * v[j * d + h * dh + c]).sum();
            }
        }
    }
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        for o in 0..d {
            out[i * d + o] = bo[o] + (0..d).map(|c| concat[i * d + c] * wo[c * d + o]).sum::<f64>();
        }
    }
    out
}

fn mha_inputs(seed: u64, bsz: usize, tokens: usize, d: usize) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    let mut v = vec![Tensor::randn([bsz, tokens, d], 1.0, &mut r)];
    for _ in 0..4 {
        v.push(Tensor::randn([d, d], 0.5, &mut r));
        v.push(Tensor::randn([d], 0.5, &mut r));
    }
    v
}

#[test]
fn mha_matches_brute_force() {
    let inputs = mha_inputs(5, 1, 2, 4);
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let w = attn_weights(&mut tape, &vars);
    let (out, _) = tape.multi_head_attention(vars[0], &w, 2).unwrap();
    let d: Vec<&[f64]> = inputs.iter().map(|x| x.data()).collect();
    let expect = brute_force_mha(d[0], 2, 4, 2, d[1], d[2], d[3], d[4], d[5], d[6], d[7], d[8]);
    for (a, e) in tape.value(out).data().iter().zip(&expect) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn mha_gradients() {
    let store = ParamStore::new();
    for seed in 0..10 {
        let inputs = mha_inputs(300 + seed, 2, 3, 4);
        let rep = check_op(&store, Mode::Train, &inputs, seed, |tp, v| {
            let w = attn_weights(tp, v);
            Ok(tp.multi_head_attention(v[0], &w, 2)?.0)
        })
        .unwrap();
        assert!(rep.max_rel_error < OP_TOL, "seed {seed}: {rep:?}");
    }
}

#[test]
fn attention_rows_are_distributions() {
    let store = ParamStore::new();
    let mut r = rng(9);
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let q = tape.constant(Tensor::randn([3, 5, 8], 3.0, &mut r));
    let k = tape.constant(Tensor::randn([3, 5, 8], 3.0, &mut r));
    let v = tape.constant(Tensor::randn([3, 5, 8], 1.0, &mut r));
    let out = tape.attention(q, k, v, 4).unwrap();
    for row in tape.attention_weights(out).unwrap().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

// ------------------------------------------------------------ cross-entropy

#[test]
fn uniform_logits_give_ln2() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let l = tape.constant(Tensor::<f64>::zeros([3, 2]));
    let loss = tape.softmax_cross_entropy(l, &[0, 1, 1]).unwrap();
    assert!((tape.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_have_tiny_loss() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let l = tape.constant(t(&[1, 2], &[10.0, -10.0]));
    let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
    assert!(tape.value(loss).data()[0] < 1e-4);
}

#[test]
fn cross_entropy_rejects_bad_labels() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let l = tape.constant(Tensor::<f64>::zeros([2, 2]));
    assert!(tape.softmax_cross_entropy(l, &[0, 2]).is_err());
    assert!(tape.softmax_cross_entropy(l, &[0]).is_err());
}

#[test]
fn cross_entropy_gradients() {
    let store = ParamStore::new();
    for seed in 0..10 {
        let x = [Tensor::randn([4, 3], 2.0, &mut rng(400 + seed))];
        let labels = [0, 2, 1, 2];
        let rep = check_op(&store, Mode::Train, &x, seed, |tp, v| tp.softmax_cross_entropy(v[0], &labels)).unwrap();
        assert!(rep.max_rel_error < 1e-6, "seed {seed}: {rep:?}");
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(11);
    for _ in 0..50 {
        let mut row = Tensor::<f64>::randn([7], 20.0, &mut r).into_data();
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

// ----------------------------------------------------------- token plumbing

#[test]
fn token_plumbing_gradients() {
    let store = ParamStore::new();
    for seed in 0..10 {
        let mut r = rng(500 + seed);
        let x = Tensor::randn([2, 3, 4], 1.0, &mut r);
        let tok = Tensor::randn([4], 1.0, &mut r);
        let a = Tensor::randn([2, 4], 1.0, &mut r);
        let b = Tensor::randn([2, 4], 1.0, &mut r);
        let table = Tensor::randn([5, 4], 1.0, &mut r);

        let rep = check_op(&store, Mode::Train, &[x.clone(), tok], seed, |tp, v| {
            let y = tp.prepend_token(v[0], v[1])?;
            let c = tp.select_token(y, 0)?;
            let m = tp.mean_tokens(y)?;
            let s = tp.add(c, m)?;
            tp.reshape(s, &[8])
        })
        .unwrap();
        assert!(rep.max_rel_error < OP_TOL, "prepend/select/mean seed {seed}: {rep:?}");

        let rep = check_op(&store, Mode::Train, &[a, b, table], seed, |tp, v| {
            let l = tp.lookup(v[2], &[4, 1])?;
            tp.stack_tokens(&[v[0], v[1], l])
        })
        .unwrap();
        assert!(rep.max_rel_error < OP_TOL, "stack/lookup seed {seed}: {rep:?}");

        let rep = check_op(&store, Mode::Train, &[x], seed, |tp, v| tp.dropout(v[0], 0.3)).unwrap();
        assert!(rep.max_rel_error < OP_TOL, "dropout seed {seed}: {rep:?}");
    }
}

#[test]
fn lookup_repeated_ids_accumulate() {
    let mut store = ParamStore::new();
    store.add_param("table", Tensor::<f64>::zeros([3, 2])).unwrap();
    let grads = {
        let mut tape = Tape::new(&store, Mode::Train, 0);
        let table = tape.param("table").unwrap();
        let rows = tape.lookup(table, &[1, 1, 2]).unwrap();
        let loss = tape.weighted_sum(rows, vec![1.0; 6]).unwrap();
        tape.backward(loss).unwrap()
    };
    grads.accumulate_into(&mut store);
    let g = store.get(store.id("table").unwrap()).grad.clone().unwrap();
    assert_eq!(g, vec![0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Train, 0);
    let x = tape.constant(Tensor::<f64>::full([2, 2], 1.0));
    let w = tape.input(Tensor::full([2, 2], 0.5));
    let y = tape.affine(x, w, None).unwrap();
    let loss = tape.weighted_sum(y, vec![1.0; 4]).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(x).is_none());
    assert_eq!(g.wrt(w).unwrap(), &[2.0, 2.0, 2.0, 2.0]);
}

#[test]
fn backward_needs_scalar() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Train, 0);
    let x = tape.input(Tensor::<f64>::zeros([2]));
    assert!(matches!(tape.backward(x), Err(EngineError::NonScalarLoss(_))));
}

// ----------------------------------------------------------------- finiteness

#[test]
fn large_finite_inputs_stay_finite() {
    let store = bn_store(4);
    let (m, v) = (store.id("bn.mean").unwrap(), store.id("bn.var").unwrap());
    let mut tape = Tape::new(&store, Mode::Train, 0);
    let mut r = rng(13);
    let big = tape.input(Tensor::<f64>::randn([3, 4], 1e6, &mut r));
    let g = tape.constant(Tensor::full([4], 1.0));
    let b = tape.constant(Tensor::zeros([4]));
    let ln = tape.layer_norm(big, g, b).unwrap();
    let bn = tape.batch_norm(big, g, b, m, v).unwrap();
    let s = tape.selu(big);
    let ge = tape.gelu(big);
    let l = tape.softmax_cross_entropy(big, &[0, 3, 1]).unwrap();
    for var in [ln, bn, s, ge, l] {
        assert!(tape.value(var).all_finite());
    }
    let q = tape.reshape(big, &[1, 3, 4]).unwrap();
    let a = tape.attention(q, q, q, 2).unwrap();
    assert!(tape.value(a).all_finite());
    let sum = tape.weighted_sum(a, vec![1.0; 12]).unwrap();
    let total = tape.add(sum, l).unwrap();
    let grads = tape.backward(total).unwrap();
    assert!(grads.wrt(big).unwrap().iter().all(|x| x.is_finite()));
}
