//! Central-finite-difference gradient checking.
//!
//! Two probes share the oracle: a per-coordinate sweep, and a directional
//! variant for deep compositions. With f32 storage, the per-coordinate
//! estimate carries an irreducible quantization floor of roughly
//! ulp(|f|)/(2·eps), which swamps coordinates whose individual gradients
//! are small; probing along random unit directions measures the same
//! Jacobian-vector product at the scale of the whole gradient instead.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::{Result, Tape, Tensor};

/// Compare the analytic gradient of `f` at `x` against central differences.
///
/// `f` must be a deterministic scalar-valued function built from tape ops;
/// it is called once on a leaf for the analytic gradient and `2·numel(x)`
/// more times on perturbed constants. Returns the max over coordinates of
/// `|analytic − fd| / max(|analytic|, 1e-6)`. Any NaN encountered is
/// reported as `f32::INFINITY` so callers treat it as a failure.
pub fn finite_difference_check(
    f: &dyn Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    eps: f32,
) -> Result<f32> {
    let tape = Tape::new();
    let leaf = tape.leaf(x.data().to_vec(), x.shape())?;
    let loss = f(&leaf)?;
    let grads = tape.backward(&loss)?;
    let analytic = grads
        .get(&leaf)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst = 0.0f32;
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        // Divide by the perturbation that survived f32 rounding.
        let delta = plus[i] as f64 - minus[i] as f64;
        let fp = f(&Tensor::from_vec(plus.clone(), x.shape())?)?.item()?;
        let fm = f(&Tensor::from_vec(minus, x.shape())?)?.item()?;
        let fd = (fp as f64 - fm as f64) / delta;
        let a = analytic[i] as f64;
        if !fd.is_finite() || !a.is_finite() {
            return Ok(f32::INFINITY);
        }
        let rel = (a - fd).abs() / a.abs().max(1e-6);
        if rel as f32 > worst {
            worst = rel as f32;
        }
    }
    Ok(worst)
}

/// Directional central-difference check: compares the analytic directional
/// derivative `g·d` against `(f(x+εd) − f(x−εd)) / 2ε` over `n_dirs` seeded
/// random unit directions. Returns the max relative error
/// `|analytic − fd| / max(|analytic|, 1e-6)`; NaN reports as infinity.
pub fn directional_fd_check(
    f: &dyn Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    eps: f32,
    n_dirs: usize,
    seed: u64,
) -> Result<f32> {
    let tape = Tape::new();
    let leaf = tape.leaf(x.data().to_vec(), x.shape())?;
    let loss = f(&leaf)?;
    let grads = tape.backward(&loss)?;
    let analytic = grads
        .get(&leaf)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut rng = StdRng::seed_from_u64(seed);
    let base = x.data().to_vec();
    let mut worst = 0.0f32;
    for dir in 0..n_dirs {
        // First probe follows the analytic gradient itself (strongest
        // response against evaluation noise); the rest are random.
        let mut d: Vec<f32> = if dir == 0 {
            analytic.clone()
        } else {
            (0..base.len()).map(|_| rng.gen_range(-1.0..1.0f32)).collect()
        };
        let norm = d.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() as f32;
        if norm < 1e-12 {
            continue;
        }
        for v in &mut d {
            *v /= norm;
        }
        let plus: Vec<f32> = base.iter().zip(&d).map(|(b, dv)| b + eps * dv).collect();
        let minus: Vec<f32> = base.iter().zip(&d).map(|(b, dv)| b - eps * dv).collect();
        let fp = f(&Tensor::from_vec(plus, x.shape())?)?.item()?;
        let fm = f(&Tensor::from_vec(minus, x.shape())?)?.item()?;
        let fd = (fp as f64 - fm as f64) / (2.0 * eps as f64);
        let a: f64 = analytic
            .iter()
            .zip(&d)
            .map(|(g, dv)| *g as f64 * *dv as f64)
            .sum();
        if !fd.is_finite() || !a.is_finite() {
            return Ok(f32::INFINITY);
        }
        let rel = (a - fd).abs() / a.abs().max(1e-6);
        worst = worst.max(rel as f32);
    }
    Ok(worst)
}
