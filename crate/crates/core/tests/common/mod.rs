//! Finite-difference gradient checking shared by the integration tests.

#![allow(dead_code)]

pub mod cases;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tumorreg::deformation::{compose_var, exp_svf_var};
use tumorreg::losses::{PairVars, StepVars};
use tumorreg::{Tape, Tensor, Var};

/// A scalar function of several tensors, recorded on a tape.
pub trait ScalarFn: for<'t> Fn(&'t Tape, &[Var<'t>]) -> tumorreg::Result<Var<'t>> {}
impl<F> ScalarFn for F where F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> tumorreg::Result<Var<'t>> {}

/// Tensor with entries drawn uniformly from `lo..hi`.
pub fn uniform(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Entries in `lo..hi` whose fractional parts stay away from integers, so
/// small perturbations do not cross the kinks of trilinear interpolation.
pub fn off_grid(shape: &[usize], lo: i32, hi: i32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(lo..hi) as f32 + rng.random_range(0.25f32..0.75))
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn eval(f: &impl ScalarFn, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&tape, &vars).unwrap().item()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Worst error of autodiff against central differences, Richardson
/// extrapolated from steps `eps` and `eps / 2`.
///
/// Each input is perturbed alone along several directions with unit RMS per
/// entry: the autodiff gradient itself and three Gaussian directions. For a
/// direction `d` the error is `|fd - <g, d>| / (|g| |d|)`, which for the
/// gradient direction is the plain relative error of the directional
/// derivative.
pub fn gradient_error(f: impl ScalarFn, inputs: &[Tensor], eps: f32) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    for (i, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let g = grads.get_or_zeros(*var);
        let gnorm = dot(g.data(), g.data()).sqrt();
        let n = input.len();
        let mut dirs: Vec<Vec<f32>> = Vec::new();
        if gnorm > 0.0 {
            let s = (n as f64).sqrt() / gnorm;
            dirs.push(g.data().iter().map(|&x| (x as f64 * s) as f32).collect());
        }
        for _ in 0..3 {
            dirs.push(
                (0..n)
                    .map(|_| rng.sample::<f32, _>(StandardNormal))
                    .collect(),
            );
        }
        for d in dirs {
            let shifted = |h: f32| {
                let mut all = inputs.to_vec();
                all[i] = input.zip_map(&Tensor::new(input.shape(), d.clone()).unwrap(), |x, dx| {
                    x + h * dx
                });
                eval(&f, &all)
            };
            let central = |h: f32| (shifted(h) - shifted(-h)) / (2.0 * h as f64);
            let fd = (4.0 * central(eps / 2.0) - central(eps)) / 3.0;
            let an = dot(g.data(), &d);
            let scale = gnorm * dot(&d, &d).sqrt();
            let err = if scale > 0.0 {
                (fd - an).abs() / scale
            } else {
                fd.abs()
            };
            worst = worst.max(err);
        }
    }
    worst
}

/// Sum of the entries weighted by a fixed random tensor, turning any
/// tensor-valued operation into a scalar with a generic gradient.
pub fn project<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> tumorreg::Result<Var<'t>> {
    let w = uniform(&y.shape(), -1.0, 1.0, seed);
    Ok(y.mul(tape.constant(w))?.sum())
}

/// Steps driven by the velocity fields `v`, with the model's bookkeeping:
/// forward warps of the moving image and mask, the inverse chain for the
/// fixed image, and the fixed mask pulled back through the later inverse
/// steps for the obliteration term.
pub fn record_steps<'t>(pair: &PairVars<'t>, v: &[Var<'t>]) -> tumorreg::Result<Vec<StepVars<'t>>> {
    let mut steps = Vec::new();
    let (mut image, mut mask) = (pair.moving, pair.moving_mask);
    let mut psi: Option<Var<'t>> = None;
    for &vt in v {
        let phi = exp_svf_var(vt, 7)?;
        let phi_hat = exp_svf_var(vt.neg(), 7)?;
        let prev = mask;
        image = image.grid_sample(phi)?;
        mask = mask.grid_sample(phi)?;
        let total = match psi {
            None => phi_hat,
            Some(p) => compose_var(phi_hat, p)?,
        };
        psi = Some(total);
        steps.push(StepVars {
            phi,
            phi_hat,
            warped_moving: image,
            warped_moving_mask: mask,
            prev_moving_mask: prev,
            warped_fixed: pair.fixed.grid_sample(total)?,
            warped_fixed_mask: pair.fixed_mask.grid_sample(total)?,
            ob_mask: pair.fixed_mask,
        });
    }
    let mut tail: Option<Var<'t>> = None;
    for s in steps.iter_mut().rev() {
        if let Some(g) = tail {
            s.ob_mask = pair.fixed_mask.grid_sample(g)?;
        }
        tail = Some(match tail {
            None => s.phi_hat,
            Some(g) => compose_var(g, s.phi_hat)?,
        });
    }
    Ok(steps)
}
