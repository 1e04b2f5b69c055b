//! Finite-difference gradient checking shared by the integration tests.
#![allow(dead_code)]

pub mod gradsuite;

use igahide::diff::{Tape, Var};
use igahide::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-4;
pub const KINK_TOL: f64 = 1e-3;
/// Slope differences below this are rounding noise, not kinks.
pub const KINK_FLOOR: f64 = 1e-7;
/// Coordinates probed per input; larger inputs are subsampled.
pub const MAX_PROBES: usize = 48;

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Reduces any output to a scalar with fixed random weights.
fn project(out: &Var<f64>, seed: u64) -> Var<f64> {
    if out.value().numel() == 1 {
        return out.reshape(vec![1]).unwrap();
    }
    let w = rand_tensor(out.shape(), -1.0, 1.0, seed);
    out.mul(&out.tape().constant(w)).unwrap().sum()
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>], seed: u64) -> f64
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    project(&f(&tape, &vars), seed).value().item()
}

/// Largest norm-wise relative error between analytic and central-difference
/// gradients over all inputs.
pub fn max_rel_error<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>,
{
    rel_errors(inputs, f).into_iter().fold(0.0, f64::max)
}

/// Norm-wise relative error per input.
pub fn rel_errors<F>(inputs: &[Tensor<f64>], f: F) -> Vec<f64>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>,
{
    let seed = 0xfd;
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let obj = project(&f(&tape, &vars), seed);
    let grads = tape.backward(&obj).unwrap();
    let mut errs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (i, v) in vars.iter().enumerate() {
        let g = grads.wrt(v).unwrap();
        let n = inputs[i].numel();
        let probes: Vec<usize> = if n <= MAX_PROBES {
            (0..n).collect()
        } else {
            (0..MAX_PROBES).map(|_| rng.random_range(0..n)).collect()
        };
        let base = eval(&f, inputs, seed);
        let (mut diff2, mut a2, mut n2, mut used) = (0.0, 0.0, 0.0, 0usize);
        for &j in &probes {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let (fp, fm) = (eval(&f, &plus, seed), eval(&f, &minus, seed));
            let (fwd, bwd) = ((fp - base) / FD_STEP, (base - fm) / FD_STEP);
            // One-sided slopes that disagree mean a ReLU or clamp kink lies
            // inside the stencil; such coordinates say nothing about the tape.
            if (fwd - bwd).abs() > (KINK_TOL * fwd.abs().max(bwd.abs())).max(KINK_FLOOR) {
                if std::env::var_os("FD_TRACE").is_some() {
                    eprintln!("{i} {j}: kink, slopes {fwd:e} {bwd:e}");
                }
                continue;
            }
            used += 1;
            let num = (fp - fm) / (2.0 * FD_STEP);
            let ana = g.data()[j];
            if std::env::var_os("FD_TRACE").is_some() {
                eprintln!("{i} {j}: analytic {ana:e} numeric {num:e}");
            }
            diff2 += (ana - num) * (ana - num);
            a2 += ana * ana;
            n2 += num * num;
        }
        assert!(
            used * 4 >= probes.len() * 3,
            "input {i}: only {used} of {} probes avoided kinks",
            probes.len()
        );
        // Gradients that vanish identically are compared on an absolute scale.
        let denom = a2.sqrt().max(n2.sqrt()).max(ABS_FLOOR);
        let rel = diff2.sqrt() / denom;
        errs.push(rel);
    }
    errs
}
