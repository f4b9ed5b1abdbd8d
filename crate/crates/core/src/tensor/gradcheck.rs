use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Below this magnitude gradients are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Tape gradients, one vector per input.
    pub analytic: Vec<Vec<f64>>,
    /// Central-difference estimates, same layout.
    pub numeric: Vec<Vec<f64>>,
    /// `|a - n| / max(|a|, |n|, 1e-3)` per coordinate.
    pub relative_errors: Vec<Vec<f64>>,
    pub max_relative_error: f64,
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives one leaf per entry of `point` (all marked trainable) and must
/// return a single-element node.
pub fn gradcheck<F>(f: F, point: &[Tensor], step: f64) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
        let y = f(&tape, &vars)?.scalar();
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("gradcheck function value {y}")));
        }
        Ok(y)
    };

    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = point.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
        let y = f(&tape, &vars)?;
        if y.numel() != 1 || !y.scalar().is_finite() {
            return Err(Error::NonFinite(format!("gradcheck function value {:?}", y.value())));
        }
        tape.backward(y)?;
        vars.iter()
            .map(|v| v.grad().unwrap_or_else(|| vec![0.0; v.numel()]))
            .collect()
    };

    let mut numeric = Vec::with_capacity(point.len());
    let mut work: Vec<Tensor> = point.to_vec();
    for t in 0..point.len() {
        let mut est = vec![0.0; point[t].numel()];
        for (i, e) in est.iter_mut().enumerate() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[t].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[t].data_mut()[i] = orig;
            *e = (up - down) / (2.0 * step);
        }
        numeric.push(est);
    }

    let relative_errors: Vec<Vec<f64>> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            a.iter()
                .zip(n)
                .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
                .collect()
        })
        .collect();
    let max_relative_error = relative_errors.iter().flatten().copied().fold(0.0, f64::max);
    Ok(GradcheckReport {
        analytic,
        numeric,
        relative_errors,
        max_relative_error,
    })
}
