//! Central finite-difference gradient checking.
//!
//! The routines here only evaluate forward passes, so they serve as an
//! independent oracle for the tape's reverse-mode gradients.

/// Step used for central differences throughout the test suites.
pub const FD_EPS: f64 = 1e-5;

/// Central-difference estimate of `d f / d x[i]` for each `i` in `indices`.
pub fn numeric_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    indices: &[usize],
    eps: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = f(&probe);
            probe[i] = orig - eps;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
///
/// The floor keeps gradients that are zero up to rounding from producing
/// spurious large ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Largest relative error between paired gradient entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Fixed projection weights used to reduce a non-scalar output to a scalar.
fn projection(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 + ((i as f64 + 1.0) * 0.7548776662).fract()).collect()
}

fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let w = projection(tape.value(out).numel());
    let weighted = tape.mul_const(out, w)?;
    Ok(tape.sum(weighted))
}

/// Compares tape gradients of every entry of every input against central
/// differences of the forward pass. Non-scalar outputs are reduced with fixed
/// positive weights. Returns the largest relative error.
pub fn check_tape_gradients<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_tape_gradients_at(inputs, &all, build)
}

/// Like [`check_tape_gradients`] but only probes the listed entries of each
/// input (one index list per input).
pub fn check_tape_gradients_at<F>(inputs: &[Tensor], probes: &[Vec<usize>], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad(true)))
        .collect();
    let out = build(&mut tape, &vars)?;
    let loss = project(&mut tape, out)?;
    tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, idx) in probes.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(vars[k]) {
            Some(g) => idx.iter().map(|&i| g[i]).collect(),
            None => vec![0.0; idx.len()],
        };
        let eval = |x: &[f64]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, inp)| {
                    if j == k {
                        t.constant(Tensor::new(inp.shape(), x.to_vec()).expect("same shape"))
                    } else {
                        t.constant(inp.clone())
                    }
                })
                .collect();
            let o = build(&mut t, &vs).expect("forward succeeded once");
            let l = project(&mut t, o).expect("projection");
            t.value(l).item()
        };
        let numeric = numeric_gradient(eval, inputs[k].data(), idx, FD_EPS);
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
