use super::*;
use crate::tensor::gradcheck::{fd_gradient, max_rel_error};

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn identity(d: usize) -> Tensor {
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        data[i * d + i] = 1.0;
    }
    Tensor::new(vec![d, d], data).unwrap()
}

struct QkvFixture {
    ps: ParamSet,
    wq: LinearLayer,
    wk: LinearLayer,
    wv: LinearLayer,
}

fn qkv_with_weights(weights: [Tensor; 3]) -> QkvFixture {
    let mut ps = ParamSet::new();
    let [q, k, v] = weights;
    let wq = LinearLayer::with_weight(&mut ps, "wq", q, false);
    let wk = LinearLayer::with_weight(&mut ps, "wk", k, false);
    let wv = LinearLayer::with_weight(&mut ps, "wv", v, false);
    QkvFixture { ps, wq, wk, wv }
}

#[test]
fn project_qkv_identity_weights() {
    let fix = qkv_with_weights([identity(2), identity(2), identity(2)]);
    let mut tape = Tape::new();
    let bind = fix.ps.bind(&mut tape, false);
    let h = tape.constant(vec![2, 2], vec![0.3, -1.0, 2.0, 0.7]).unwrap();
    let state = project_qkv(&mut tape, &bind, h, &fix.wq, &fix.wk, &fix.wv).unwrap();
    assert_eq!(tape.data(state.q), tape.data(h));
    assert_eq!(tape.data(state.k), tape.data(h));
    assert_eq!(tape.data(state.v), tape.data(h));
}

#[test]
fn project_qkv_hand_matmul() {
    let swap = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let fix = qkv_with_weights([swap, identity(2), identity(2)]);
    let mut tape = Tape::new();
    let bind = fix.ps.bind(&mut tape, false);
    let h = tape.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let state = project_qkv(&mut tape, &bind, h, &fix.wq, &fix.wk, &fix.wv).unwrap();
    assert_eq!(tape.data(state.q), &[0.0, 1.0]);
}

#[test]
fn project_qkv_gradient_reaches_all_weights() {
    let mut rng = Rng::seed_from(3);
    let mut ps = ParamSet::new();
    let wq = LinearLayer::new(&mut ps, &mut rng, "wq", 2, 2, false);
    let wk = LinearLayer::new(&mut ps, &mut rng, "wk", 2, 2, false);
    let wv = LinearLayer::new(&mut ps, &mut rng, "wv", 2, 2, false);
    let h_data = vec![0.4, -0.9, 1.3, 0.2];

    let forward = |ps: &ParamSet| -> (Tape, Binding, TensorId) {
        let mut tape = Tape::new();
        let bind = ps.bind(&mut tape, true);
        let h = tape.constant(vec![2, 2], h_data.clone()).unwrap();
        let state = project_qkv(&mut tape, &bind, h, &wq, &wk, &wv).unwrap();
        let out = scaled_dot_attention(&mut tape, &state).unwrap();
        // Weighted sum so softmax gradients stay generic.
        let w = tape.constant(vec![2, 2], vec![0.7, -0.3, 0.9, 0.4]).unwrap();
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum_all(prod);
        (tape, bind, loss)
    };

    let (mut tape, bind, loss) = forward(&ps);
    tape.backward(loss).unwrap();

    for layer in [&wq, &wk, &wv] {
        let analytic = tape.grad(bind.id(layer.weight)).unwrap().to_vec();
        assert!(analytic.iter().any(|&g| g.abs() > 1e-6), "gradient vanished");
        let base = ps.get(layer.weight).value.data.clone();
        let numeric = fd_gradient(
            |probe| {
                let mut probed = ps.clone();
                probed.get_mut(layer.weight).value.data = probe.to_vec();
                let (tape, _, loss) = forward(&probed);
                tape.data(loss)[0]
            },
            &base,
            1e-6,
        );
        assert!(max_rel_error(&analytic, &numeric) < 1e-4);
    }
}

#[test]
fn single_key_attention_returns_value_row() {
    let mut tape = Tape::new();
    let q = tape.constant(vec![1, 3], vec![0.5, -2.0, 9.0]).unwrap();
    let k = tape.constant(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap();
    let v = tape.constant(vec![1, 3], vec![4.0, 5.0, 6.0]).unwrap();
    let out = scaled_dot_attention(&mut tape, &AttentionState { q, k, v, mask: None }).unwrap();
    assert_eq!(tape.data(out), &[4.0, 5.0, 6.0]);
}

#[test]
fn attention_matches_scalar_oracle() {
    // Oracle: scores = (1,0)·Kᵀ/√2 = (0.7071, 0); weights = softmax;
    // output = w0·(1,2) + w1·(3,4).
    let s0 = 1.0 / 2.0_f64.sqrt();
    let e0 = s0.exp();
    let w0 = e0 / (e0 + 1.0);
    let w1 = 1.0 / (e0 + 1.0);
    let expect = [w0 + 3.0 * w1, 2.0 * w0 + 4.0 * w1];

    let mut tape = Tape::new();
    let q = tape.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let k = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let v = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = scaled_dot_attention(&mut tape, &AttentionState { q, k, v, mask: None }).unwrap();
    assert!(close(tape.data(out), &expect, 1e-12));
    assert!(close(tape.data(out), &[1.6604, 2.6604], 1e-3));
}

#[test]
fn fully_masked_row_keeps_own_value() {
    let n = 3;
    let mut mask = vec![true; n * n];
    for i in 0..n {
        mask[i * n + i] = false;
    }
    let mut rng = Rng::seed_from(5);
    let rand: Vec<f64> = (0..n * 3).map(|_| rng.range(-1.0, 1.0)).collect();
    let vals: Vec<f64> = (0..n * 3).map(|i| i as f64).collect();

    let mut tape = Tape::new();
    let q = tape.constant(vec![n, 3], rand.clone()).unwrap();
    let k = tape.constant(vec![n, 3], rand).unwrap();
    let v = tape.constant(vec![n, 3], vals.clone()).unwrap();
    let out =
        scaled_dot_attention(&mut tape, &AttentionState { q, k, v, mask: Some(mask) }).unwrap();
    assert!(close(tape.data(out), &vals, 1e-6));
}

#[test]
fn multi_head_one_head_reduces_to_scaled_dot() {
    let mut ps = ParamSet::new();
    let out_proj = LinearLayer::with_weight(&mut ps, "wo", identity(4), false);
    let mut rng = Rng::seed_from(11);
    let data: Vec<f64> = (0..12).map(|_| rng.range(-1.0, 1.0)).collect();

    let mut tape = Tape::new();
    let bind = ps.bind(&mut tape, false);
    let q = tape.constant(vec![3, 4], data.clone()).unwrap();
    let k = tape.constant(vec![3, 4], data.clone()).unwrap();
    let v = tape.constant(vec![3, 4], data).unwrap();
    let state = AttentionState { q, k, v, mask: None };
    let mh = multi_head(&mut tape, &bind, &state, 1, &out_proj).unwrap();
    let plain = scaled_dot_attention(&mut tape, &state).unwrap();
    assert!(close(tape.data(mh), tape.data(plain), 1e-12));
}

#[test]
fn multi_head_matches_independent_single_heads() {
    // Two heads over d=4 equal two independent d=2 attentions, concatenated.
    let mut rng = Rng::seed_from(21);
    let gen = |rng: &mut Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.range(-1.0, 1.0)).collect()
    };
    let (qd, kd, vd) = (gen(&mut rng, 12), gen(&mut rng, 12), gen(&mut rng, 12));

    let mut ps = ParamSet::new();
    let out_proj = LinearLayer::with_weight(&mut ps, "wo", identity(4), false);
    let mut tape = Tape::new();
    let bind = ps.bind(&mut tape, false);
    let q = tape.constant(vec![3, 4], qd.clone()).unwrap();
    let k = tape.constant(vec![3, 4], kd.clone()).unwrap();
    let v = tape.constant(vec![3, 4], vd.clone()).unwrap();
    let mh = multi_head(
        &mut tape,
        &bind,
        &AttentionState { q, k, v, mask: None },
        2,
        &out_proj,
    )
    .unwrap();

    // Oracle: run each half separately.
    let half = |xs: &[f64], lo: usize| -> Vec<f64> {
        (0..3).flat_map(|r| xs[r * 4 + lo..r * 4 + lo + 2].to_vec()).collect()
    };
    let mut expect = vec![0.0; 12];
    for (h, lo) in [(0usize, 0usize), (1, 2)] {
        let _ = h;
        let mut t = Tape::new();
        let q = t.constant(vec![3, 2], half(&qd, lo)).unwrap();
        let k = t.constant(vec![3, 2], half(&kd, lo)).unwrap();
        let v = t.constant(vec![3, 2], half(&vd, lo)).unwrap();
        let out = scaled_dot_attention(&mut t, &AttentionState { q, k, v, mask: None }).unwrap();
        for r in 0..3 {
            expect[r * 4 + lo] = t.data(out)[r * 2];
            expect[r * 4 + lo + 1] = t.data(out)[r * 2 + 1];
        }
    }
    assert!(close(tape.data(mh), &expect, 1e-12));
}

#[test]
fn multi_head_invariant_under_head_permutation() {
    let mut rng = Rng::seed_from(31);
    let gen = |rng: &mut Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.range(-1.0, 1.0)).collect()
    };
    let (qd, kd, vd) = (gen(&mut rng, 12), gen(&mut rng, 12), gen(&mut rng, 12));
    let wo = gen(&mut rng, 16);

    let swap_cols = |xs: &[f64]| -> Vec<f64> {
        (0..3)
            .flat_map(|r| {
                let row = &xs[r * 4..(r + 1) * 4];
                vec![row[2], row[3], row[0], row[1]]
            })
            .collect()
    };
    let swap_rows = |xs: &[f64]| -> Vec<f64> {
        let mut out = xs.to_vec();
        out.rotate_left(8);
        out
    };

    let run = |q: Vec<f64>, k: Vec<f64>, v: Vec<f64>, w: Vec<f64>| -> Vec<f64> {
        let mut ps = ParamSet::new();
        let out_proj =
            LinearLayer::with_weight(&mut ps, "wo", Tensor::new(vec![4, 4], w).unwrap(), false);
        let mut tape = Tape::new();
        let bind = ps.bind(&mut tape, false);
        let q = tape.constant(vec![3, 4], q).unwrap();
        let k = tape.constant(vec![3, 4], k).unwrap();
        let v = tape.constant(vec![3, 4], v).unwrap();
        let out = multi_head(
            &mut tape,
            &bind,
            &AttentionState { q, k, v, mask: None },
            2,
            &out_proj,
        )
        .unwrap();
        tape.data(out).to_vec()
    };

    let base = run(qd.clone(), kd.clone(), vd.clone(), wo.clone());
    let permuted = run(swap_cols(&qd), swap_cols(&kd), swap_cols(&vd), swap_rows(&wo));
    assert!(close(&base, &permuted, 1e-9));
}

#[test]
fn multi_head_rejects_indivisible_width() {
    let mut rng = Rng::seed_from(1);
    let mut ps = ParamSet::new();
    let out_proj = LinearLayer::new(&mut ps, &mut rng, "wo", 4, 4, false);
    let mut tape = Tape::new();
    let bind = ps.bind(&mut tape, false);
    let q = tape.constant(vec![2, 4], vec![0.0; 8]).unwrap();
    let state = AttentionState { q, k: q, v: q, mask: None };
    let err = multi_head(&mut tape, &bind, &state, 3, &out_proj).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn attention_output_stays_in_value_hull() {
    // With scalar values, each output lies between min(V) and max(V).
    let mut rng = Rng::seed_from(41);
    for _ in 0..50 {
        let n = 2 + rng.below(4);
        let mut tape = Tape::new();
        let q = tape
            .constant(vec![n, 1], (0..n).map(|_| rng.range(-3.0, 3.0)).collect())
            .unwrap();
        let k = tape
            .constant(vec![n, 1], (0..n).map(|_| rng.range(-3.0, 3.0)).collect())
            .unwrap();
        let vals: Vec<f64> = (0..n).map(|_| rng.range(-5.0, 5.0)).collect();
        let v = tape.constant(vec![n, 1], vals.clone()).unwrap();
        let out =
            scaled_dot_attention(&mut tape, &AttentionState { q, k, v, mask: None }).unwrap();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &o in tape.data(out) {
            assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
        }
    }
}

#[test]
fn multi_head_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from(51);
    let mut ps = ParamSet::new();
    let wq = LinearLayer::new(&mut ps, &mut rng, "wq", 4, 4, false);
    let wk = LinearLayer::new(&mut ps, &mut rng, "wk", 4, 4, false);
    let wv = LinearLayer::new(&mut ps, &mut rng, "wv", 4, 4, false);
    let wo = LinearLayer::new(&mut ps, &mut rng, "wo", 4, 4, true);
    let h_data: Vec<f64> = (0..12).map(|_| rng.range(-1.0, 1.0)).collect();
    let w_loss: Vec<f64> = (0..12).map(|_| rng.range(-1.0, 1.0)).collect();

    let forward = |ps: &ParamSet| -> (Tape, Binding, TensorId) {
        let mut tape = Tape::new();
        let bind = ps.bind(&mut tape, true);
        let h = tape.constant(vec![3, 4], h_data.clone()).unwrap();
        let state = project_qkv(&mut tape, &bind, h, &wq, &wk, &wv).unwrap();
        let out = multi_head(&mut tape, &bind, &state, 2, &wo).unwrap();
        let w = tape.constant(vec![3, 4], w_loss.clone()).unwrap();
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum_all(prod);
        (tape, bind, loss)
    };

    let (mut tape, bind, loss) = forward(&ps);
    tape.backward(loss).unwrap();

    for (pid, param) in ps.iter() {
        let analytic = tape.grad(bind.id(pid)).unwrap().to_vec();
        let numeric = fd_gradient(
            |probe| {
                let mut probed = ps.clone();
                probed.get_mut(pid).value.data = probe.to_vec();
                let (tape, _, loss) = forward(&probed);
                tape.data(loss)[0]
            },
            &param.value.data,
            1e-6,
        );
        assert!(
            max_rel_error(&analytic, &numeric) < 1e-4,
            "param {} failed gradient check",
            param.name
        );
    }
}

#[test]
fn adamw_zero_lr_leaves_parameters_unchanged() {
    let mut rng = Rng::seed_from(61);
    let mut ps = ParamSet::new();
    let _ = LinearLayer::new(&mut ps, &mut rng, "l", 3, 3, true);
    let before: Vec<Vec<f64>> = ps.iter().map(|(_, p)| p.value.data.clone()).collect();
    let grads: Vec<Option<Vec<f64>>> = ps
        .iter()
        .map(|(_, p)| Some(vec![0.5; p.value.data.len()]))
        .collect();
    let mut opt = AdamW::new(0.0, 1e-4, ps.len());
    opt.step(&mut ps, &grads);
    let after: Vec<Vec<f64>> = ps.iter().map(|(_, p)| p.value.data.clone()).collect();
    assert_eq!(before, after);
}

#[test]
fn clip_global_norm_scales_to_bound() {
    let mut grads = vec![Some(vec![3.0, 4.0]), None, Some(vec![0.0])];
    let norm = clip_global_norm(&mut grads, 1.0);
    assert!((norm - 5.0).abs() < 1e-12);
    let g = grads[0].as_ref().unwrap();
    let new_norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
    assert!((new_norm - 1.0).abs() < 1e-12);
}

#[test]
fn sinusoidal_positions_are_bounded_and_distinct() {
    let pe = sinusoidal_positions(16, 8);
    assert!(pe.data.iter().all(|v| v.abs() <= 1.0));
    let row = |i: usize| &pe.data[i * 8..(i + 1) * 8];
    assert!(row(0) != row(1) && row(1) != row(15));
}
