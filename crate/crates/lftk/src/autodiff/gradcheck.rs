//! Finite-difference gradient verification.
//!
//! Central differences against the reverse-mode result, with the realized
//! f32 step recovered from the perturbed values so rounding of `x ± h` does
//! not masquerade as gradient error. Callers must keep inputs away from
//! non-differentiable points (relu kinks, l1 sign flips, max-axis ties) by at
//! least the step size.

use super::Tensor;

#[derive(Clone, Copy)]
pub struct FdOpts {
    /// central-difference half step
    pub h: f64,
    pub tol_rel: f64,
    pub tol_abs: f64,
}

impl Default for FdOpts {
    fn default() -> Self {
        FdOpts { h: 1e-2, tol_rel: 1e-4, tol_abs: 1e-5 }
    }
}

/// Compare reverse-mode gradients of `f` (a scalar-valued closure re-running
/// the forward pass) against central differences for every element of every
/// listed input. Returns the worst relative error seen, or a description of
/// the first element outside tolerance.
pub fn check(
    inputs: &[&Tensor],
    f: &dyn Fn() -> Tensor,
    opts: &FdOpts,
) -> Result<f64, String> {
    for t in inputs {
        t.zero_grad();
    }
    let loss = f();
    assert_eq!(loss.len(), 1, "gradcheck needs a scalar loss");
    loss.backward();
    let grads: Vec<Vec<f32>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    for t in inputs {
        t.zero_grad();
    }

    let mut worst = 0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let orig = t.values()[j];
            let vp = orig + opts.h as f32;
            let vm = orig - opts.h as f32;
            t.values_mut()[j] = vp;
            let lp = f().item() as f64;
            t.values_mut()[j] = vm;
            let lm = f().item() as f64;
            t.values_mut()[j] = orig;
            let fd = (lp - lm) / (vp as f64 - vm as f64);
            let a = grads[ti][j] as f64;
            let diff = (a - fd).abs();
            let scale = a.abs().max(fd.abs());
            if diff > opts.tol_rel * scale && diff > opts.tol_abs {
                return Err(format!(
                    "input {} element {}: analytic {:.6e} vs finite-difference {:.6e} \
                     (diff {:.3e}, rel {:.3e})",
                    ti,
                    j,
                    a,
                    fd,
                    diff,
                    diff / scale.max(1e-300),
                ));
            }
            if scale > 0.0 {
                worst = worst.max(diff / scale);
            }
        }
    }
    Ok(worst)
}
