//! Central finite-difference verification of tape adjoints.

use rayon::prelude::*;

use super::tape::{Fault, Tape, Var};
use super::tensor::{ParamId, ParameterSet};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so gradients that are zero in
/// exact arithmetic compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub h: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<5} {:<28} n={:<6} max_rel={:.3e} (idx {} analytic {:.6e} numeric {:.6e})",
                if p.passed { "ok" } else { "FAIL" },
                p.name,
                p.elements,
                p.max_rel_error,
                p.worst_index,
                p.analytic,
                p.numeric
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Finite-difference checker configuration.
#[derive(Clone, Copy, Debug)]
pub struct GradChecker {
    pub h: f64,
    pub tol: f64,
    /// Fault injected into the analytic (backward) pass only.
    pub fault: Option<Fault>,
}

impl Default for GradChecker {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            fault: None,
        }
    }
}

impl GradChecker {
    pub fn new(h: f64, tol: f64) -> Self {
        Self { h, tol, fault: None }
    }

    pub fn with_fault(mut self, fault: Option<Fault>) -> Self {
        self.fault = fault;
        self
    }

    /// Compare analytic gradients of `f` against `(f(θ+h) − f(θ−h)) / 2h`
    /// for every scalar in `params`.
    pub fn run<F>(&self, f: F, params: &ParameterSet) -> Result<GradCheckReport>
    where
        F: Fn(&ParameterSet, &mut Tape) -> Result<Var> + Sync,
    {
        let eval = |ps: &ParameterSet| -> Result<f64> {
            let mut tape = Tape::new();
            let loss = f(ps, &mut tape)?;
            Ok(tape.data(loss)[0])
        };

        let mut tape = Tape::with_fault(self.fault);
        let loss = f(params, &mut tape)?;
        let baseline = tape.data(loss)[0];
        tape.backward(loss)?;
        if eval(params)? != baseline {
            return Err(Error::GradCheck(
                "objective is not deterministic: two baseline evaluations differ".into(),
            ));
        }
        let mut analytic: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        for (id, g) in tape.param_grads() {
            analytic[id.index()].copy_from_slice(g);
        }

        let coords: Vec<(ParamId, usize)> = params
            .ids()
            .flat_map(|id| (0..params.get(id).numel()).map(move |k| (id, k)))
            .collect();
        let numeric: Vec<f64> = coords
            .par_iter()
            .map_init(
                || params.clone(),
                |work, &(id, k)| -> Result<f64> {
                    let orig = work.get(id).data()[k];
                    work.get_mut(id).data_mut()[k] = orig + self.h;
                    let up = eval(work);
                    work.get_mut(id).data_mut()[k] = orig - self.h;
                    let down = eval(work);
                    work.get_mut(id).data_mut()[k] = orig;
                    Ok((up? - down?) / (2.0 * self.h))
                },
            )
            .collect::<Result<_>>()?;

        let mut report = GradCheckReport {
            tol: self.tol,
            h: self.h,
            params: Vec::with_capacity(params.len()),
        };
        let mut cursor = 0;
        for id in params.ids() {
            let n = params.get(id).numel();
            let mut check = ParamCheck {
                name: params.name(id).to_string(),
                elements: n,
                max_rel_error: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
                passed: true,
            };
            for k in 0..n {
                let a = analytic[id.index()][k];
                let num = numeric[cursor + k];
                let err = relative_error(a, num);
                if err > check.max_rel_error || k == 0 {
                    check.max_rel_error = err;
                    check.worst_index = k;
                    check.analytic = a;
                    check.numeric = num;
                }
            }
            check.passed = check.max_rel_error <= self.tol;
            cursor += n;
            report.params.push(check);
        }
        Ok(report)
    }
}

/// Shorthand for [`GradChecker::run`] without fault injection.
pub fn grad_check<F>(f: F, params: &ParameterSet, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParameterSet, &mut Tape) -> Result<Var> + Sync,
{
    GradChecker::new(h, tol).run(f, params)
}
