mod common;

use pcnn_core::comparator::Mode;
use pcnn_core::numkernel::kernels::{self, AttentionShape};
use pcnn_core::numkernel::{cross_attention, mhsa, AttentionVars, NormStats, Tape, Tensor, Var};
use pcnn_core::{Error, Result};
use proptest::prelude::*;
use common::gradcheck::{attention_params, gradcheck, loss_of, perturbed_comparator, random};

const TOLERANCE: f64 = 1e-4;
const LINEAR_TOLERANCE: f64 = 1e-6;
const ATTENTION_TOLERANCE: f64 = 1e-5;

/// Runs the check and requires exactly `vanishing` to have zero gradient.
fn assert_gradients(inputs: &[Tensor], vanishing: &[usize], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    assert_gradients_within(TOLERANCE, inputs, vanishing, build);
}

fn assert_gradients_within(
    tolerance: f64,
    inputs: &[Tensor],
    vanishing: &[usize],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) {
    let check = gradcheck(inputs, build);
    assert_eq!(check.vanishing, vanishing, "inputs with zero gradient");
    assert!(check.worst < tolerance, "relative error {}", check.worst);
}

#[test]
fn linear_gradients() {
    let inputs = [random(&[3, 2, 4], 1), random(&[4, 5], 2), random(&[5], 3)];
    assert_gradients_within(LINEAR_TOLERANCE, &inputs, &[], |t, v| t.linear(v[0], v[1], v[2]));
}

#[test]
fn token_plumbing_gradients() {
    // prepend → broadcast add → replace → concat → mean covers every layout op.
    let inputs = [random(&[4], 1), random(&[2, 3, 4], 2), random(&[4, 4], 3), random(&[2, 1, 4], 4)];
    assert_gradients(&inputs, &[], |t, v| {
        let x = t.prepend_token(v[0], v[1])?;
        let x = t.add_broadcast(x, v[2])?;
        let first = t.token(x, 1)?;
        let summed = t.add(first, v[3])?;
        let x = t.replace_token(x, 3, summed)?;
        let m = t.mean_tokens(x)?;
        let last = t.token(x, 2)?;
        t.concat_features(m, last)
    });
}

#[test]
fn gelu_gradients() {
    let inputs = [Tensor::from_fn(&[2, 7], |i| -3.0 + i as f64 * 0.45)];
    assert_gradients(&inputs, &[], |t, v| t.gelu(v[0]));
}

#[test]
fn batchnorm_gradients_with_batch_statistics() {
    let inputs = [random(&[5, 3], 1), random(&[3], 2), random(&[3], 3)];
    assert_gradients(&inputs, &[], |t, v| Ok(t.batchnorm(v[0], v[1], v[2], NormStats::Batch)?.0));
}

#[test]
fn batchnorm_gradients_with_running_statistics() {
    let mean = [0.1, -0.2, 0.3];
    let var = [0.5, 1.5, 2.0];
    let inputs = [random(&[4, 3], 1), random(&[3], 2), random(&[3], 3)];
    assert_gradients(&inputs, &[], |t, v| {
        Ok(t.batchnorm(v[0], v[1], v[2], NormStats::Running { mean: &mean, var: &var })?.0)
    });
}

#[test]
fn attention_gradients_with_unequal_lengths() {
    let inputs = [random(&[2, 2, 6], 1), random(&[2, 5, 6], 2), random(&[2, 5, 6], 3)];
    assert_gradients_within(ATTENTION_TOLERANCE, &inputs, &[], |t, v| t.attention(v[0], v[1], v[2], 3));
}

#[test]
fn mhsa_gradients() {
    let mut inputs = vec![random(&[2, 3, 4], 1)];
    inputs.extend(attention_params(4, 10));
    // The key bias shifts every score of a row equally, which softmax ignores.
    assert_gradients_within(ATTENTION_TOLERANCE, &inputs, &[4], |t, v| mhsa(t, v[0], &AttentionVars::from_slice(&v[1..]), 2));
}

#[test]
fn cross_attention_gradients() {
    // CLS plus one token per branch.
    let mut inputs = vec![random(&[2, 2, 4], 1), random(&[2, 2, 4], 2)];
    inputs.extend(attention_params(4, 20));
    assert_gradients_within(ATTENTION_TOLERANCE, &inputs, &[5], |t, v| {
        let (a, b) = cross_attention(t, v[0], v[1], &AttentionVars::from_slice(&v[2..]), 2)?;
        t.concat_features(a, b)
    });
}

#[test]
fn bce_gradients() {
    let inputs = [Tensor::from_fn(&[6, 1], |i| -4.0 + 1.6 * i as f64)];
    assert_gradients(&inputs, &[], |_, v| Ok(v[0]));
}

#[test]
fn full_comparator_gradients_in_train_mode() {
    let (model, inputs) = perturbed_comparator();
    let n = inputs.len();
    let started = std::time::Instant::now();
    // Zero by construction: the key biases (5, 13), and everything that adds
    // the same vector to every row ahead of a batch-statistics normalization:
    // the cross-attention value and output biases (15, 17) and the biases of
    // the two linear layers feeding batch norm (19, 23).
    assert_gradients(&inputs, &[5, 13, 15, 17, 19, 23], |t, v| {
        Ok(model.forward(t, &v[..n - 2], v[n - 2], v[n - 1], Mode::Train)?.logits)
    });
    assert!(started.elapsed().as_secs() < 30, "took {:?}", started.elapsed());
}

#[test]
fn full_comparator_gradients_in_eval_mode() {
    let (model, inputs) = perturbed_comparator();
    let n = inputs.len();
    assert_gradients(&inputs, &[5, 13], |t, v| {
        Ok(model.forward(t, &v[..n - 2], v[n - 2], v[n - 1], Mode::Eval)?.logits)
    });
}

fn run_linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
    let y = tape.linear(x, w, b).unwrap();
    tape.value(y).unwrap().clone()
}

#[test]
fn linear_identity_and_scalar_cases() {
    let x = random(&[3, 4], 7);
    let eye = Tensor::from_fn(&[4, 4], |i| f64::from(u8::from(i / 4 == i % 4)));
    assert_eq!(run_linear(x.clone(), eye, Tensor::zeros(&[4])), x);
    let y = run_linear(
        Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
        Tensor::new(vec![1, 1], vec![3.0]).unwrap(),
        Tensor::new(vec![1], vec![1.0]).unwrap(),
    );
    assert_eq!(y.data(), &[7.0]);
}

#[test]
fn gelu_fixed_points() {
    assert_eq!(kernels::gelu(0.0), 0.0);
    assert!(kernels::gelu(-10.0).abs() < 1e-9);
}

fn run_batchnorm(x: Tensor, stats: NormStats<'_>) -> Vec<f64> {
    let feats = x.features();
    let mut tape = Tape::new();
    let x = tape.leaf(x);
    let g = tape.leaf(Tensor::filled(&[feats], 1.0));
    let b = tape.leaf(Tensor::zeros(&[feats]));
    let (y, _) = tape.batchnorm(x, g, b, stats).unwrap();
    tape.value(y).unwrap().data().to_vec()
}

#[test]
fn batchnorm_reference_cases() {
    let y = run_batchnorm(Tensor::new(vec![2, 2], vec![-1.0, 1.0, 1.0, -1.0]).unwrap(), NormStats::Batch);
    let expected = 1.0 / (1.0 + kernels::BATCHNORM_EPS).sqrt();
    for (v, sign) in y.iter().zip([-1.0, 1.0, 1.0, -1.0]) {
        assert!((v - sign * expected).abs() < 1e-15);
    }

    let x = random(&[3, 2], 1);
    let y = run_batchnorm(x.clone(), NormStats::Running { mean: &[0.0, 0.0], var: &[1.0, 1.0] });
    let scale = 1.0 / (1.0 + kernels::BATCHNORM_EPS).sqrt();
    for (v, &x) in y.iter().zip(x.data()) {
        assert!((v - x * scale).abs() < 1e-15);
        assert!((v - x).abs() < 1e-5);
    }

    let y = run_batchnorm(Tensor::filled(&[4, 3], 2.5), NormStats::Batch);
    assert!(y.iter().all(|&v| v == 0.0));
}

#[test]
fn single_key_attention_copies_the_value_path() {
    let x = random(&[2, 1, 4], 3);
    let p = attention_params(4, 30);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let pv: Vec<Var> = p.iter().map(|t| tape.leaf(t.clone())).collect();
    let vars = AttentionVars::from_slice(&pv);
    let y = mhsa(&mut tape, xv, &vars, 2).unwrap();
    let v = tape.linear(xv, vars.wv, vars.bv).unwrap();
    let expected = tape.linear(v, vars.wo, vars.bo).unwrap();
    let (y, expected) = (tape.value(y).unwrap(), tape.value(expected).unwrap());
    for (a, b) in y.data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn run_cross(a: &Tensor, b: &Tensor, p: &[Tensor]) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let pv: Vec<Var> = p.iter().map(|t| tape.leaf(t.clone())).collect();
    let (x, y) = cross_attention(&mut tape, av, bv, &AttentionVars::from_slice(&pv), 2).unwrap();
    (tape.value(x).unwrap().clone(), tape.value(y).unwrap().clone())
}

#[test]
fn cross_attention_swaps_with_its_inputs() {
    let (a, b) = (random(&[2, 3, 4], 1), random(&[2, 3, 4], 2));
    let p = attention_params(4, 40);
    let (p1, q1) = run_cross(&a, &b, &p);
    let (q2, p2) = run_cross(&b, &a, &p);
    assert_eq!(p1, p2);
    assert_eq!(q1, q2);
}

#[test]
fn cross_attention_over_identical_tokens_ignores_the_weights() {
    let a = random(&[1, 3, 4], 1);
    let token = random(&[4], 2);
    let b = Tensor::from_fn(&[1, 3, 4], |i| token.data()[i % 4]);
    let p = attention_params(4, 50);
    let (z1, _) = run_cross(&a, &b, &p);
    let mut other = p.clone();
    for i in [0, 1, 2, 3] {
        other[i] = random(other[i].shape(), 900 + i as u64);
    }
    let (w1, _) = run_cross(&a, &b, &other);
    for (x, y) in z1.data()[..4].iter().zip(&w1.data()[..4]) {
        assert!((x - y).abs() < 1e-12);
    }
}

fn bce(logits: &[f64], labels: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let o = tape.leaf(Tensor::new(vec![logits.len()], logits.to_vec()).unwrap());
    let l = tape.bce_with_logits(o, labels).unwrap();
    tape.value(l).unwrap().item()
}

#[test]
fn bce_reference_cases() {
    let ln2 = std::f64::consts::LN_2;
    assert!((bce(&[0.0], &[1.0]) - ln2).abs() < 1e-15);
    let saturated = bce(&[40.0], &[1.0]);
    assert!(saturated.is_finite() && saturated < 1e-15);
    assert!((bce(&[0.0, 0.0], &[1.0, 0.0]) - ln2).abs() < 1e-15);
}

#[test]
fn repeated_backward_passes_are_bitwise_identical() {
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[4, 3], 1));
    let w = tape.leaf(random(&[3, 2], 2));
    let b = tape.leaf(random(&[2], 3));
    let y = tape.linear(x, w, b).unwrap();
    let loss = loss_of(&mut tape, y, 4).unwrap();
    let first = tape.backward(loss).unwrap();
    let second = tape.backward(loss).unwrap();
    for v in [x, w, b] {
        assert_eq!(first.get(v).unwrap(), second.get(v).unwrap());
    }
}

/// `erf` from its Maclaurin series, accurate to ~1e-15 for |x| ≤ 3.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn gelu_matches_series_oracle() {
    assert!((kernels::gelu(1.0) - 0.8413447460685429).abs() < 1e-15);
    for i in -30..=30 {
        let x = i as f64 / 10.0;
        let oracle = x * 0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2));
        assert!((kernels::gelu(x) - oracle).abs() < 1e-13, "x = {x}");
    }
}

#[test]
fn gelu_grad_matches_difference_quotient() {
    for i in -20..=20 {
        let x = i as f64 / 5.0;
        let numeric = (kernels::gelu(x + 1e-6) - kernels::gelu(x - 1e-6)) / 2e-6;
        assert!((kernels::gelu_grad(x) - numeric).abs() < 1e-8, "x = {x}");
    }
}

#[test]
fn bce_term_is_stable_and_matches_naive_form() {
    for &(o, y) in &[(0.3, 1.0), (-1.2, 0.0), (2.5, 0.0), (-0.7, 1.0)] {
        let s = 1.0 / (1.0 + f64::exp(-o));
        let naive = -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
        assert!((kernels::bce_with_logits_term(o, y) - naive).abs() < 1e-12);
    }
    assert!((kernels::bce_with_logits_term(800.0, 0.0) - 800.0).abs() < 1e-9);
    assert!(kernels::bce_with_logits_term(-800.0, 0.0).abs() < 1e-12);
    assert_eq!(kernels::sigmoid(-800.0), 0.0);
    assert_eq!(kernels::sigmoid(800.0), 1.0);
}

#[test]
fn softmax_handles_large_values() {
    let mut row = [1000.0, 1001.0, 999.0];
    kernels::softmax_in_place(&mut row);
    let mut shifted = [0.0, 1.0, -1.0];
    kernels::softmax_in_place(&mut shifted);
    for (a, b) in row.iter().zip(&shifted) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[3, 4, 6], 1));
        let p: Vec<Var> = attention_params(6, 2).into_iter().map(|t| tape.leaf(t)).collect();
        let y = mhsa(&mut tape, x, &AttentionVars::from_slice(&p), 3).unwrap();
        let loss = loss_of(&mut tape, y, 5).unwrap();
        let g = tape.backward(loss).unwrap().get(x).unwrap();
        (tape.value(y).unwrap().clone(), g)
    };
    assert_eq!(run(), run());
}

#[test]
fn foreign_variable_is_a_usage_error() {
    let mut a = Tape::new();
    let mut b = Tape::new();
    let x = a.leaf(Tensor::scalar(1.0));
    b.leaf(Tensor::scalar(2.0));
    assert!(matches!(b.gelu(x), Err(Error::Usage(_))));
}

#[test]
fn backward_needs_a_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[2, 2], 1));
    let y = tape.gelu(x).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
}

#[test]
fn single_row_batchnorm_is_degenerate() {
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[1, 3], 1));
    let g = tape.leaf(Tensor::filled(&[3], 1.0));
    let b = tape.leaf(Tensor::zeros(&[3]));
    assert!(matches!(
        tape.batchnorm(x, g, b, NormStats::Batch),
        Err(Error::DegenerateBatch { rows: 1 })
    ));
}

#[test]
fn mismatched_shapes_are_dimension_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[2, 3], 1));
    let w = tape.leaf(random(&[4, 2], 2));
    let b = tape.leaf(random(&[2], 3));
    assert!(matches!(tape.linear(x, w, b), Err(Error::Dimension { .. })));
    let y = tape.leaf(random(&[3, 2], 4));
    assert!(matches!(tape.add(x, y), Err(Error::Dimension { .. })));
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[2], 1));
    let unused = tape.leaf(random(&[3], 2));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    assert!(g.get(unused).unwrap().data().iter().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn bce_is_non_negative(o in -60.0f64..60.0, positive: bool) {
        let loss = kernels::bce_with_logits_term(o, f64::from(u8::from(positive)));
        prop_assert!(loss >= 0.0 && loss.is_finite());
    }

    #[test]
    fn gradients_stay_finite(seed in 0u64..500) {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[3, 2, 4], seed));
        let p: Vec<Var> = attention_params(4, seed + 7).into_iter().map(|t| tape.leaf(t)).collect();
        let y = mhsa(&mut tape, x, &AttentionVars::from_slice(&p), 2).unwrap();
        let g = tape.gelu(y).unwrap();
        let loss = loss_of(&mut tape, g, seed).unwrap();
        let grads = tape.backward(loss).unwrap();
        prop_assert!(tape.value(g).unwrap().is_finite());
        prop_assert!(grads.get(x).unwrap().is_finite());
        for v in p {
            prop_assert!(grads.get(v).unwrap().is_finite());
        }
    }

    #[test]
    fn attention_rows_are_distributions(
        seed in 0u64..1000,
        sq in 1usize..4,
        sk in 1usize..5,
        heads in 1usize..3,
    ) {
        let dim = 2 * heads;
        let shape = AttentionShape { batch: 2, sq, sk, dim, heads };
        let q = random(&[2, sq, dim], seed);
        let k = random(&[2, sk, dim], seed + 1);
        let v = random(&[2, sk, dim], seed + 2);
        let (_, probs) = kernels::attention_forward(q.data(), k.data(), v.data(), shape);
        for row in probs.chunks(sk) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn batchnorm_output_is_standardised(seed in 0u64..1000, rows in 2usize..9) {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[rows, 3], seed));
        let g = tape.leaf(Tensor::filled(&[3], 1.0));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let (y, stats) = tape.batchnorm(x, g, b, NormStats::Batch).unwrap();
        let (mean, var) = kernels::column_moments(tape.value(y).unwrap().data(), rows, 3);
        for f in 0..3 {
            prop_assert!(mean[f].abs() < 1e-9);
            // Biased variance of the output is var / (var + eps) ≤ 1.
            prop_assert!(var[f] <= 1.0 + 1e-12);
        }
        let stats = stats.unwrap();
        let (_, biased) = kernels::column_moments(tape.value(x).unwrap().data(), rows, 3);
        for f in 0..3 {
            prop_assert!((stats.var[f] - biased[f] * rows as f64 / (rows as f64 - 1.0)).abs() < 1e-12);
        }
    }
}
