//! Central finite-difference verification of tape gradients.
//!
//! The reported figure is the worst relative error over the probed
//! coordinates:
//!
//! ```text
//! |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
//! ```
//!
//! with `numeric = (f(x+eps) - f(x-eps)) / (2 eps)`. Callers are responsible
//! for probing points away from the nondifferentiable kinks of relu and
//! maxpool.

use crate::rng::Rng;
use crate::tape::{Result, Tape, Var};
use crate::tensor::Tensor;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (1e-8f64).max(analytic.abs() + numeric.abs())
}

/// Checks a scalar-valued function of one tensor, probing every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps, None, None)
}

/// Checks a scalar-valued function of several tensors.
///
/// With `probes = Some(k)`, k coordinates are sampled per input instead of
/// probing all of them; large composites would otherwise need two forward
/// passes per parameter.
pub fn grad_check_multi<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    probes: Option<usize>,
    rng: Option<&mut Rng>,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_floor(f, inputs, eps, probes, 0.0, rng)
}

/// Like [`grad_check_multi`], but probes are drawn only from coordinates
/// whose analytic gradient reaches `min_analytic`.
///
/// The central difference (f(x+eps) - f(x-eps)) / (2 eps) carries about
/// ulp(|f|) / (2 eps) of rounding noise, so coordinates with smaller
/// gradients cannot be certified to a relative tolerance at 64-bit
/// precision; probing them measures the arithmetic, not the backward pass.
pub fn grad_check_with_floor<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    probes: Option<usize>,
    min_analytic: f64,
    rng: Option<&mut Rng>,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).expect("leaf requires grad").clone())
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut local_rng = Rng::new(0x6d73726e);
    let rng = match rng {
        Some(r) => r,
        None => &mut local_rng,
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (slot, input) in inputs.iter().enumerate() {
        let candidates: Vec<usize> = (0..input.len())
            .filter(|&i| analytic[slot].data()[i].abs() >= min_analytic)
            .collect();
        let coords: Vec<usize> = match probes {
            Some(k) if k < candidates.len() => {
                let picks = rng.choose_distinct(candidates.len(), k);
                picks.into_iter().map(|p| candidates[p]).collect()
            }
            _ => candidates,
        };
        for i in coords {
            let original = input.data()[i];
            work[slot].data_mut()[i] = original + eps;
            let fp = eval(&work)?;
            work[slot].data_mut()[i] = original - eps;
            let fm = eval(&work)?;
            work[slot].data_mut()[i] = original;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[slot].data()[i], numeric));
        }
    }
    Ok(worst)
}
