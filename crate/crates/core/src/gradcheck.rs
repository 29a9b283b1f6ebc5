//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values, so it is independent of
//! the reverse rules it checks.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub compared: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares reverse-mode gradients of `f(inputs)` with central differences.
///
/// `f` must build a one-element loss from the provided input variables.
/// Entries where both gradients are at most `floor` in magnitude are skipped.
pub fn check<F>(f: F, inputs: &[Tensor], step: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        compared: 0,
        skipped: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ii, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var, &inputs[ii]);
        for j in 0..inputs[ii].len() {
            let orig = inputs[ii].data()[j];
            probe[ii].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[ii].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[ii].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[j];
            let scale = a.abs().max(numeric.abs());
            if scale <= floor {
                report.skipped += 1;
                continue;
            }
            report.compared += 1;
            let rel = (a - numeric).abs() / scale;
            if rel >= report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ii, j));
            }
        }
    }
    Ok(report)
}
