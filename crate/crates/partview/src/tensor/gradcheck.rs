//! Finite-difference verification of recorded gradients.
//!
//! The checker rebuilds the forward graph from scratch for every perturbed
//! evaluation, so the builder closure must be deterministic.

use super::{Tape, Tensor};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckItem {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub items: Vec<GradCheckItem>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    pub fn worst(&self) -> f64 {
        self.items.iter().map(|i| i.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares tape gradients of a scalar-valued graph against central finite
/// differences, parameter by parameter. The relative error per parameter is
/// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(
    builder: F,
    params: &[(&str, &Tensor)],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    // Analytic pass.
    for (_, p) in params {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = builder(&tape)?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    drop(tape);

    // Numeric passes: rebuild the graph at perturbed parameter values.
    let eval = |b: &F| -> Result<f64> {
        let tape = Tape::new();
        let loss = b(&tape)?;
        Ok(loss.item())
    };

    let mut items = Vec::with_capacity(params.len());
    for (pi, (name, p)) in params.iter().enumerate() {
        let mut max_rel = 0.0f64;
        for i in 0..p.numel() {
            p.nudge(i, step);
            let up = eval(&builder)?;
            p.nudge(i, -2.0 * step);
            let down = eval(&builder)?;
            p.nudge(i, step);
            let numeric = (up - down) / (2.0 * step);
            let rel = (analytic[pi][i] - numeric).abs() / numeric.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
        items.push(GradCheckItem {
            name: name.to_string(),
            max_rel_err: max_rel,
            passed: max_rel <= tolerance,
        });
    }
    Ok(GradCheckReport {
        tolerance,
        step,
        items,
    })
}
