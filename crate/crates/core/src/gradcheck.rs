//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{BotError, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Check at most this many evenly spaced coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    pub check_params: bool,
    pub check_inputs: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords_per_tensor: None,
            check_params: true,
            check_inputs: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Location of the largest error, e.g. `param recon.0.mca.wq[3]`.
    pub worst: String,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn coords(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len => (0..c).map(|i| i * len / c).collect(),
        _ => (0..len).collect(),
    }
}

fn eval_loss<F>(store: &ParameterStore, inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(BotError::Shape(format!("loss must be scalar, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences, over every parameter in `store` and every tensor in `inputs`.
pub fn grad_check<F>(
    store: &ParameterStore,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (param_grads, input_grads) = {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        let pg: Vec<Tensor> = store
            .ids()
            .map(|id| {
                grads
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
            })
            .collect();
        let ig: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (pg, ig)
    };
    for (i, g) in param_grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(BotError::NonFinite(format!("gradient of {}", store.names()[i])));
        }
    }
    if input_grads.iter().any(|g| !g.is_finite()) {
        return Err(BotError::NonFinite("input gradient".into()));
    }

    let eps = opts.epsilon;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: String::new(),
    };
    let note = |err: f64, what: String, report: &mut GradCheckReport| {
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = what;
        }
    };

    if opts.check_params {
        let mut work = store.clone();
        for (pi, id) in store.ids().enumerate() {
            for k in coords(store.value(id).len(), opts.max_coords_per_tensor) {
                let orig = store.value(id).data()[k];
                work.value_mut(id).data_mut()[k] = orig + eps;
                let up = eval_loss(&work, inputs, &f)?;
                work.value_mut(id).data_mut()[k] = orig - eps;
                let down = eval_loss(&work, inputs, &f)?;
                work.value_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let err = relative_error(param_grads[pi].data()[k], numeric);
                note(err, format!("param {}[{k}]", store.name(id)), &mut report);
            }
        }
    }

    if opts.check_inputs {
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (ii, t) in inputs.iter().enumerate() {
            for k in coords(t.len(), opts.max_coords_per_tensor) {
                let orig = t.data()[k];
                work[ii].data_mut()[k] = orig + eps;
                let up = eval_loss(store, &work, &f)?;
                work[ii].data_mut()[k] = orig - eps;
                let down = eval_loss(store, &work, &f)?;
                work[ii].data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let err = relative_error(input_grads[ii].data()[k], numeric);
                note(err, format!("input {ii}[{k}]"), &mut report);
            }
        }
    }
    Ok(report)
}
