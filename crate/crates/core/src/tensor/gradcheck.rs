//! Central finite-difference gradient oracle.
//!
//! Independent of the tape's backward pass: it only calls the forward
//! computation, twice per coordinate. Used by unit tests and the acceptance
//! suite to verify every analytic gradient.

/// Gradient of `f` at `x` by central differences with step `h`.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative error with a unit floor so near-zero gradients compare absolutely.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Worst relative error between an analytic and a numeric gradient.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

use super::{Tape, Tensor, TensorId};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct OpGradReport {
    pub op: String,
    pub max_rel_err: f64,
}

/// Loss used by the sweep: a fixed random weighting of the output, so
/// gradients stay generic even for outputs with built-in constraints
/// (softmax rows summing to one would otherwise zero the gradient).
fn weighted_loss(tape: &mut Tape, out: TensorId, weights: &[f64]) -> TensorId {
    let shape = tape.shape(out).to_vec();
    let numel: usize = shape.iter().product();
    assert!(weights.len() >= numel, "weight pool too small for output");
    let w = tape
        .constant(shape, weights[..numel].to_vec())
        .expect("weight shape matches output");
    let prod = tape.mul(out, w).expect("weighting");
    tape.sum_all(prod)
}

type OpBuilder = dyn Fn(&mut Tape, &[TensorId]) -> TensorId;

fn check_one(
    inputs: &[Tensor],
    builder: &OpBuilder,
    weights: &[f64],
    h: f64,
) -> f64 {
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = builder(&mut tape, &ids);
    let loss = weighted_loss(&mut tape, out, weights);
    tape.backward(loss).expect("scalar loss");

    let mut worst: f64 = 0.0;
    for (slot, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(ids[slot]).expect("leaf gradient").to_vec();
        let numeric = fd_gradient(
            |probe| {
                let mut t = Tape::new();
                let ids: Vec<TensorId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, orig)| {
                        let mut tensor = orig.clone();
                        if j == slot {
                            tensor.data = probe.to_vec();
                        }
                        t.leaf(tensor)
                    })
                    .collect();
                let out = builder(&mut t, &ids);
                let loss = weighted_loss(&mut t, out, weights);
                t.data(loss)[0]
            },
            &input.data,
            h,
        );
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    worst
}

fn rand_tensor(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.range(-1.5, 1.5)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Finite-difference every differentiable tape operation on random small
/// inputs. Returns the worst relative error observed per op over `trials`
/// seeded rounds.
pub fn check_all_op_gradients(trials: usize, seed: u64, h: f64) -> Vec<OpGradReport> {
    let mut rng = Rng::seed_from(seed);
    let mut worst: Vec<(String, f64)> = Vec::new();
    let record = |name: &str, err: f64, acc: &mut Vec<(String, f64)>| {
        match acc.iter_mut().find(|(n, _)| n == name) {
            Some((_, e)) => *e = e.max(err),
            None => acc.push((name.to_string(), err)),
        }
    };

    for _ in 0..trials {
        let m = 2 + rng.below(3);
        let k = 2 + rng.below(3);
        let n = 2 + rng.below(3);
        let w: Vec<f64> = (0..64).map(|_| rng.range(-1.0, 1.0)).collect();

        let a = rand_tensor(&mut rng, vec![m, k]);
        let b = rand_tensor(&mut rng, vec![k, n]);
        let x = rand_tensor(&mut rng, vec![m, n]);
        let y = rand_tensor(&mut rng, vec![m, n]);
        let row = rand_tensor(&mut rng, vec![1, n]);
        let col = rand_tensor(&mut rng, vec![m, 1]);

        let checks: Vec<(&str, Vec<Tensor>, Box<OpBuilder>)> = vec![
            (
                "matmul",
                vec![a.clone(), b.clone()],
                Box::new(|t, ids| t.matmul(ids[0], ids[1]).unwrap()),
            ),
            (
                "add",
                vec![x.clone(), y.clone()],
                Box::new(|t, ids| t.add(ids[0], ids[1]).unwrap()),
            ),
            (
                "add_broadcast",
                vec![x.clone(), row.clone()],
                Box::new(|t, ids| t.add(ids[0], ids[1]).unwrap()),
            ),
            (
                "sub",
                vec![x.clone(), y.clone()],
                Box::new(|t, ids| t.sub(ids[0], ids[1]).unwrap()),
            ),
            (
                "mul",
                vec![x.clone(), y.clone()],
                Box::new(|t, ids| t.mul(ids[0], ids[1]).unwrap()),
            ),
            (
                "mul_broadcast",
                vec![x.clone(), col.clone()],
                Box::new(|t, ids| t.mul(ids[0], ids[1]).unwrap()),
            ),
            (
                "scale",
                vec![x.clone()],
                Box::new(|t, ids| t.scale(ids[0], -0.7)),
            ),
            (
                "sigmoid",
                vec![x.clone()],
                Box::new(|t, ids| t.sigmoid(ids[0])),
            ),
            (
                "ln",
                vec![{
                    let mut pos = x.clone();
                    for v in &mut pos.data {
                        *v = v.abs() + 0.5;
                    }
                    pos
                }],
                Box::new(|t, ids| t.ln(ids[0])),
            ),
            (
                "relu",
                vec![x.clone()],
                Box::new(|t, ids| t.relu(ids[0])),
            ),
            (
                "softmax_rows",
                vec![x.clone()],
                Box::new(|t, ids| t.softmax_rows(ids[0]).unwrap()),
            ),
            (
                "transpose",
                vec![x.clone()],
                Box::new(|t, ids| t.transpose(ids[0]).unwrap()),
            ),
            (
                "permute3",
                vec![rand_tensor(&mut rng, vec![2, m, n])],
                Box::new(|t, ids| t.permute3(ids[0], [1, 0, 2]).unwrap()),
            ),
            (
                "reshape",
                vec![x.clone()],
                Box::new(move |t, ids| t.reshape(ids[0], vec![n, m]).unwrap()),
            ),
            (
                "concat_rows",
                vec![x.clone(), rand_tensor(&mut rng, vec![2, n])],
                Box::new(|t, ids| t.concat_rows(ids).unwrap()),
            ),
            (
                "slice_rows",
                vec![x.clone()],
                Box::new(move |t, ids| t.slice_rows(ids[0], 1, m - 1).unwrap()),
            ),
            (
                "embedding",
                vec![rand_tensor(&mut rng, vec![4, n])],
                Box::new(|t, ids| t.embedding(ids[0], &[2, 0, 2, 3]).unwrap()),
            ),
            (
                "layer_norm",
                vec![
                    x.clone(),
                    rand_tensor(&mut rng, vec![n]),
                    rand_tensor(&mut rng, vec![n]),
                ],
                Box::new(|t, ids| t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap()),
            ),
            (
                "cross_entropy",
                vec![x.clone()],
                Box::new(move |t, ids| {
                    let targets: Vec<usize> = (0..m).map(|i| i % n).collect();
                    t.cross_entropy(ids[0], &targets, Some(0)).unwrap()
                }),
            ),
            (
                "sum_all",
                vec![x.clone()],
                Box::new(|t, ids| t.sum_all(ids[0])),
            ),
            (
                "mean_all",
                vec![x.clone()],
                Box::new(|t, ids| t.mean_all(ids[0])),
            ),
            (
                "mean_rows",
                vec![x.clone()],
                Box::new(|t, ids| t.mean_rows(ids[0]).unwrap()),
            ),
            (
                "dropout",
                vec![x.clone()],
                Box::new(|t, ids| {
                    let mut mask_rng = Rng::seed_from(99);
                    t.dropout(ids[0], 0.3, &mut mask_rng)
                }),
            ),
        ];

        for (name, inputs, builder) in checks {
            let err = check_one(&inputs, builder.as_ref(), &w, h);
            record(name, err, &mut worst);
        }
    }

    worst
        .into_iter()
        .map(|(op, max_rel_err)| OpGradReport { op, max_rel_err })
        .collect()
}
