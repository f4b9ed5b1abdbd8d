//! Independent reference implementations and the checks built on them.
//!
//! Shared by the integration tests of this crate and the acceptance runner.
#![allow(dead_code)]

pub mod baseline;
pub mod checks;
pub mod oracle;

use layoutrel::rng::Rng;
use layoutrel::tensor::Tensor;

/// Result of one check: pass/fail plus a one-line summary.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }

    pub fn fail(detail: impl Into<String>) -> Self {
        Outcome::new(false, detail)
    }

    /// All of `parts` must pass; details are joined.
    pub fn all(parts: Vec<Outcome>) -> Self {
        let pass = parts.iter().all(|o| o.pass);
        let detail = parts.iter().map(|o| o.detail.as_str()).collect::<Vec<_>>().join("; ");
        Outcome { pass, detail }
    }

    #[track_caller]
    pub fn assert(&self) {
        assert!(self.pass, "{}", self.detail);
    }
}

pub fn uniform(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

pub fn tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(rng, n, lo, hi)).expect("shape matches data")
}

/// Uniform draw in `[lo, hi]` at least `margin` away from every point in `avoid`.
pub fn away(rng: &mut Rng, lo: f64, hi: f64, avoid: &[f64], margin: f64) -> f64 {
    loop {
        let x = rng.uniform(lo, hi);
        if avoid.iter().all(|a| (x - a).abs() >= margin) {
            return x;
        }
    }
}

pub fn tensor_away(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64, avoid: &[f64]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| away(rng, lo, hi, avoid, 0.05)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
