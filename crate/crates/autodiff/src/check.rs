//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used to form the numeric estimate, so the
//! check stays independent of every backward rule it validates.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients
/// from amplifying round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-2;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Where the worst disagreement was found: (input name, flat index).
    pub worst: Option<(String, usize)>,
    pub worst_pair: (f64, f64),
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = err;
            self.worst = Some((name.to_string(), index));
            self.worst_pair = (analytic, numeric);
        }
    }
}

/// Compares analytic gradients of `f` with respect to each of `inputs`
/// against central differences with step `h`.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(0);
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new(0);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss, &mut ParamStore::new())?;
    let mut report = GradReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for idx in 0..inputs[k].len() {
            let orig = inputs[k].data()[idx];
            work[k].data_mut()[idx] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[idx] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            report.record(&format!("input{k}"), idx, analytic[idx], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Same as [`check_inputs`] but perturbs every entry of every parameter
/// in `params` (or only those listed in `only`).
pub fn check_params<F>(params: &mut ParamStore, only: Option<&[ParamId]>, f: F, h: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    params.zero_grad();
    let mut tape = Tape::new(0);
    let loss = f(&mut tape, params)?;
    tape.backward(loss, params)?;
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => params.ids().collect(),
    };
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| {
            let t = params.get(*id);
            t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    params.zero_grad();
    let mut report = GradReport::default();
    for (id, grad) in ids.iter().zip(analytic) {
        for (idx, a) in grad.into_iter().enumerate() {
            let orig = params.get(*id).data()[idx];
            params.get_mut(*id).data_mut()[idx] = orig + h;
            let up = {
                let mut t = Tape::new(0);
                let out = f(&mut t, params)?;
                t.value(out).item()
            };
            params.get_mut(*id).data_mut()[idx] = orig - h;
            let down = {
                let mut t = Tape::new(0);
                let out = f(&mut t, params)?;
                t.value(out).item()
            };
            params.get_mut(*id).data_mut()[idx] = orig;
            let name = params.name(*id).to_string();
            report.record(&name, idx, a, (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}
