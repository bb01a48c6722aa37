//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it checks.

use crate::error::Result;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::{ParamId, ParamSet, Tensor};

/// Components exposing their parameter sets.
pub trait Parameterized {
    fn param_sets(&self) -> Vec<&ParamSet>;
    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet>;
}

impl Parameterized for ParamSet {
    fn param_sets(&self) -> Vec<&ParamSet> {
        vec![self]
    }

    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![self]
    }
}

impl Parameterized for () {
    fn param_sets(&self) -> Vec<&ParamSet> {
        Vec::new()
    }

    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        Vec::new()
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Denominator floor: below this magnitude the comparison is absolute with
/// tolerance `tol * floor`.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares backward-pass gradients of `f` against central differences with
/// step `h`, over every parameter of `model` and every input tensor that has
/// a gradient buffer.
pub fn gradcheck<M, F>(model: &mut M, inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: Fn(&M, &mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |model: &M, inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
        let loss = f(model, &mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    // analytic
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let loss = f(model, &mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut analytic_params: Vec<Vec<Vec<f64>>> = Vec::new();
    for set in model.param_sets() {
        let mut per_set = Vec::new();
        for i in 0..set.len() {
            let id = ParamId(i);
            let v = tape.param(set, id);
            per_set.push(
                grads
                    .get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; set.get(id).len()]),
            );
        }
        analytic_params.push(per_set);
    }
    let analytic_inputs: Vec<Option<Vec<f64>>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, v)| {
            t.requires_grad()
                .then(|| grads.get(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        })
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let record = |report: &mut GradCheckReport, a: f64, n: f64, what: String| {
        let e = rel_err(a, n);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = format!("{what}: analytic {a:.6e} numeric {n:.6e}");
        }
    };

    let n_sets = analytic_params.len();
    for s in 0..n_sets {
        let n_params = model.param_sets()[s].len();
        for p in 0..n_params {
            let id = ParamId(p);
            let len = model.param_sets()[s].get(id).len();
            for j in 0..len {
                let orig = model.param_sets()[s].get(id).data()[j];
                model.param_sets_mut()[s].get_mut(id).data_mut()[j] = orig + h;
                let lp = eval(model, inputs)?;
                model.param_sets_mut()[s].get_mut(id).data_mut()[j] = orig - h;
                let lm = eval(model, inputs)?;
                model.param_sets_mut()[s].get_mut(id).data_mut()[j] = orig;
                let name = model.param_sets()[s]
                    .iter()
                    .nth(p)
                    .map(|(n, _)| n.to_string())
                    .unwrap_or_default();
                record(
                    &mut report,
                    analytic_params[s][p][j],
                    (lp - lm) / (2.0 * h),
                    format!("{name}[{j}]"),
                );
            }
        }
    }

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, analytic) in analytic_inputs.iter().enumerate() {
        let Some(analytic) = analytic else { continue };
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let lp = eval(model, &work)?;
            work[i].data_mut()[j] = orig - h;
            let lm = eval(model, &work)?;
            work[i].data_mut()[j] = orig;
            record(&mut report, analytic[j], (lp - lm) / (2.0 * h), format!("input{i}[{j}]"));
        }
    }
    Ok(report)
}
