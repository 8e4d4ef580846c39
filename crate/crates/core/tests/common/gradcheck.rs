//! Central finite-difference gradient oracle.
//!
//! The analytic side runs one tape with every input tracked; the numeric side
//! re-evaluates the function on fresh tapes with one input element nudged by
//! `±h`. Nothing here touches the backward code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use timeflow_core::{Result, Tape, Tensor, Var};

pub const H: f64 = 1e-5;

/// Relative error with a floor so that vanishing gradients compare absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * (2.0 * rng.random::<f64>() - 1.0))
}

/// Reduces an arbitrary output to a scalar through a fixed random weighting,
/// so every output element contributes a distinct sensitivity.
pub fn project<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, &out.shape(), 1.0);
    let w = out.tape().constant(w);
    Ok(out.mul(w)?.sum())
}

/// Maximum relative error between analytic and central-difference gradients
/// of `f` with respect to every element of every input.
pub fn max_rel_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars).expect("forward");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).expect("forward").item()
    };

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + H;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - H;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}
