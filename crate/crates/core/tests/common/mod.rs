#![allow(dead_code)]

pub mod gradcases;
pub mod oracles;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use test_embed::{Result, Tape, Tensor, Var};

pub const FD_STEP: f32 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fourth-order central finite-difference gradients of a scalar function of `inputs`,
/// evaluated on constant-only tapes.
pub fn numeric_grads<F>(inputs: &[Tensor], f: &F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward");
        f64::from(tape.value(out).item())
    };
    let mut all = Vec::new();
    for k in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[k].len());
        for i in 0..inputs[k].len() {
            let mut xs = inputs.to_vec();
            let x0 = xs[k].data()[i];
            let mut at = |d: f32| {
                xs[k].data_mut()[i] = x0 + d;
                eval(&xs)
            };
            let (p1, m1) = (at(FD_STEP), at(-FD_STEP));
            let (p2, m2) = (at(2.0 * FD_STEP), at(-2.0 * FD_STEP));
            g.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * f64::from(FD_STEP)));
        }
        all.push(g);
    }
    all
}

/// Taped gradients of the same function.
pub fn analytic_grads<F>(inputs: &[Tensor], f: &F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(out).expect("backward");
    vars.iter()
        .map(|v| {
            grads
                .get(*v)
                .expect("trainable input has a gradient")
                .data()
                .iter()
                .map(|&x| f64::from(x))
                .collect()
        })
        .collect()
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)` over all inputs.
pub fn relative_error(a: &[Vec<f64>], n: &[Vec<f64>]) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (ga, gn) in a.iter().zip(n) {
        for (x, y) in ga.iter().zip(gn) {
            diff += (x - y).powi(2);
            na += x * x;
            nn += y * y;
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-9 {
        return diff.sqrt();
    }
    diff.sqrt() / scale
}

pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let a = analytic_grads(inputs, &f);
    let n = numeric_grads(inputs, &f);
    relative_error(&a, &n)
}

/// Reduces a tensor node to a scalar through fixed random weights so every
/// output element contributes a distinct sensitivity.
pub fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let dims = tape.value(x).dims().to_vec();
    let w = tape.constant(weights.clone().reshape(&dims)?);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}
