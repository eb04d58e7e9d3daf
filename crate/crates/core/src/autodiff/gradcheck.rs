//! Central finite-difference gradient checking in 64-bit precision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so that gradients that are
/// zero analytically and numerically compare as equal.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub elements: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Checks an op built by `build` on seeded standard-normal inputs of the given shapes.
///
/// The op output is reduced to a scalar with fixed random weights, and every
/// input element is perturbed by `±STEP`.
pub fn grad_check<F>(input_shapes: &[&[usize]], seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = input_shapes
        .iter()
        .map(|s| Tensor::randn(s, 1.0, &mut rng))
        .collect();
    grad_check_at(&inputs, seed ^ 0x9e37_79b9_7f4a_7c15, build)
}

/// Same as [`grad_check`] at caller-chosen input values.
pub fn grad_check_at<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // probe the output shape once to draw the reduction weights
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Tensor::randn(g.shape(out), 1.0, &mut rng)
    };

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let s = g.weighted_sum(out, &weights)?;
        Ok(g.value(s).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let s = g.weighted_sum(out, &weights)?;
    g.backward(s)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        elements: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let x0 = input.data()[e];
            probe[i].data_mut()[e] = x0 + STEP;
            let plus = eval(&probe)?;
            probe[i].data_mut()[e] = x0 - STEP;
            let minus = eval(&probe)?;
            probe[i].data_mut()[e] = x0;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(analytic[i].data()[e], numeric);
            if !err.is_finite() {
                return Err(Error::Numerical {
                    name: format!("input {i}"),
                    detail: format!("element {e}"),
                });
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, e);
            }
            report.elements += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_op_is_exact_to_rounding() {
        let r = grad_check(&[&[3, 4]], 1, |_, xs| Ok(xs[0])).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert_eq!(r.elements, 12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // scale by 2 in the forward pass but report the op as a reshape
        let r = grad_check(&[&[4]], 3, |g, xs| {
            let doubled = g.value(xs[0]).map(|v| 2.0 * v);
            let c = g.constant(doubled);
            g.add(c, xs[0])
        })
        .unwrap();
        assert!(r.max_rel_err > 0.5);
    }
}
