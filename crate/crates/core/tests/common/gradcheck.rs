use pcnn_core::comparator::{ComparatorConfig, ComparatorModel};
use pcnn_core::numkernel::{AttentionVars, Tape, Tensor, Var};
use pcnn_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn labels(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect()
}

/// Scalar loss of `build`: BCE of its output against fixed random labels, so
/// every output element contributes a different upstream gradient.
pub fn loss_of(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let n = tape.value(out)?.len();
    tape.bce_with_logits(out, &labels(n, seed))
}

pub struct Check {
    /// Largest per-tensor `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub worst: f64,
    /// Inputs whose analytic and numeric gradients are both zero.
    pub vanishing: Vec<usize>,
}

/// Compares reverse-mode gradients with central differences.
pub fn gradcheck(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Check {
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        let loss = loss_of(&mut tape, out, 99).unwrap();
        tape.value(loss).unwrap().item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = loss_of(&mut tape, out, 99).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    let mut vanishing = Vec::new();
    let mut values = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap();
        let mut diff = 0.0;
        let mut norm_a = 0.0;
        let mut norm_n = 0.0;
        for j in 0..inputs[i].len() {
            let base = values[i].data()[j];
            values[i].data_mut()[j] = base + STEP;
            let up = eval(&values);
            values[i].data_mut()[j] = base - STEP;
            let down = eval(&values);
            values[i].data_mut()[j] = base;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.data()[j];
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
        let scale = norm_a.sqrt().max(norm_n.sqrt());
        if scale < 1e-9 {
            vanishing.push(i);
            continue;
        }
        worst = worst.max(diff.sqrt() / scale);
    }
    Check { worst, vanishing }
}

/// Small comparator (L=1, M=N=1, D=8, T=2) with perturbed parameters and
/// running statistics, followed by two input grids of four pairs.
pub fn perturbed_comparator() -> (ComparatorModel, Vec<Tensor>) {
    let config = ComparatorConfig {
        blocks: 1,
        cross_layers: 1,
        self_layers: 1,
        heads: 2,
        depth: 8,
        tokens: 2,
        mlp_hidden: 32,
        jitter: 0.0,
    };
    let model = ComparatorModel::new(config, 3).unwrap();
    // Move away from the zero-initialised head so every gradient is non-trivial.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            p
        })
        .collect();
    let mut running = model.running().clone();
    for (mean, var) in running.iter_mut() {
        mean.iter_mut().for_each(|m| *m = rng.random_range(-0.5..0.5));
        var.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
    }
    let model = ComparatorModel::from_parts(config, params.clone(), running).unwrap();
    let mut inputs = params;
    inputs.push(random(&[4, 2, 8], 5));
    inputs.push(random(&[4, 2, 8], 6));
    (model, inputs)
}

/// Random weights and biases for one attention layer of width `dim`.
pub fn attention_params(dim: usize, seed: u64) -> Vec<Tensor> {
    (0..AttentionVars::TENSORS)
        .map(|i| {
            if i % 2 == 0 {
                random(&[dim, dim], seed + i as u64)
            } else {
                random(&[dim], seed + i as u64)
            }
        })
        .collect()
}
