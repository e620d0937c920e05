//! Central finite-difference oracle for checking analytic gradients.
//!
//! The oracle only evaluates forward values; it never looks at the backward
//! pass it is checking.

use crate::autograd::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Denominator floor: gradients smaller than this are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    pub fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let err = rel_error(analytic, numeric, floor);
        self.checked += 1;
        if err > self.max_rel_error || !err.is_finite() {
            self.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", label());
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + eps) − f(x − eps)) / 2eps`.
pub fn central_difference<F>(mut f: F, x: f64, eps: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let plus = f(x + eps)?;
    let minus = f(x - eps)?;
    Ok((plus - minus) / (2.0 * eps))
}

/// Checks every element of every input of a graph-building scalar function.
pub fn check_inputs<F>(inputs: &[Tensor], f: &F, cfg: GradCheck) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut total = GradReport::default();
    for r in check_each(inputs, f, cfg)? {
        total.merge(r);
    }
    Ok(total)
}

/// Like [`check_inputs`], with one report per input.
pub fn check_each<F>(inputs: &[Tensor], f: &F, cfg: GradCheck) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let mut report = GradReport::default();
        let analytic = grads
            .get(*var)
            .map(|t| t.as_standard_layout().into_owned())
            .unwrap_or_else(|| Tensor::zeros(inputs[k].raw_dim()));
        for idx in 0..inputs[k].len() {
            let x0 = inputs[k].as_slice().expect("contiguous")[idx];
            let numeric = central_difference(
                |x| {
                    work[k].as_slice_mut().expect("contiguous")[idx] = x;
                    eval(&work)
                },
                x0,
                cfg.eps,
            )?;
            work[k].as_slice_mut().expect("contiguous")[idx] = x0;
            let a = analytic.as_slice().expect("contiguous")[idx];
            report.record(|| format!("input {k}[{idx}]"), a, numeric, cfg.floor);
        }
        reports.push(report);
    }
    Ok(reports)
}
