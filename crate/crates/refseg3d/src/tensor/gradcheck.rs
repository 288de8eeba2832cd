//! Finite-difference verification of tape gradients.
//!
//! The model under test is abstracted as a closure from named parameter
//! vectors to a scalar loss, optionally also returning the tape's analytic
//! gradients. The checker perturbs one element at a time with a central
//! difference and compares.

use std::collections::BTreeMap;
use std::fmt;

/// Loss plus, when requested, per-parameter gradients keyed like the input.
pub type EvalOut = (f64, Option<BTreeMap<String, Vec<f64>>>);

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub max_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub step: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_err() <= self.tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradient check: step={:.1e} tol={:.1e} verdict={}",
            self.step,
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        for p in &self.params {
            writeln!(
                f,
                "  {:<28} max_err={:.3e} at [{}] analytic={:+.6e} numeric={:+.6e}",
                p.name, p.max_err, p.worst_index, p.analytic_at_worst, p.numeric_at_worst
            )?;
        }
        Ok(())
    }
}

/// Error between an analytic and a central-difference derivative: relative
/// when either is appreciable, absolute when both are near zero (a relative
/// measure there would only amplify round-off).
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale > 1e-6 {
        diff / scale
    } else {
        diff
    }
}

/// Checks every element of every parameter in `params` against a central
/// difference of `eval`. `eval` is called once with `want_grads = true` and
/// then twice per element with `want_grads = false`.
pub fn grad_check<F>(
    params: &BTreeMap<String, Vec<f64>>,
    step: f64,
    tol: f64,
    eval: F,
) -> anyhow::Result<GradCheckReport>
where
    F: Fn(&BTreeMap<String, Vec<f64>>, bool) -> anyhow::Result<EvalOut>,
{
    let (_, grads) = eval(params, true)?;
    let grads = grads.ok_or_else(|| anyhow::anyhow!("eval did not return gradients"))?;

    let mut reports = Vec::new();
    let mut work = params.clone();
    for (name, values) in params {
        let analytic = grads
            .get(name)
            .ok_or_else(|| anyhow::anyhow!("no gradient returned for parameter {name}"))?;
        if analytic.len() != values.len() {
            anyhow::bail!(
                "gradient length mismatch for {name}: {} vs {}",
                analytic.len(),
                values.len()
            );
        }
        let mut report = ParamReport {
            name: name.clone(),
            max_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for i in 0..values.len() {
            let orig = values[i];
            work.get_mut(name).unwrap()[i] = orig + step;
            let (loss_plus, _) = eval(&work, false)?;
            work.get_mut(name).unwrap()[i] = orig - step;
            let (loss_minus, _) = eval(&work, false)?;
            work.get_mut(name).unwrap()[i] = orig;
            let numeric = (loss_plus - loss_minus) / (2.0 * step);
            let err = grad_error(analytic[i], numeric);
            if err > report.max_err {
                report.max_err = err;
                report.worst_index = i;
                report.analytic_at_worst = analytic[i];
                report.numeric_at_worst = numeric;
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        params: reports,
        step,
        tol,
    })
}
