//! Central finite-difference oracle for reverse-mode gradients.
//!
//! Only forward evaluations are used to build the numeric side, so the
//! check stays independent of every backward rule it validates.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Worst relative error seen over all checked tensors.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-7)
}

impl GradCheck {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, name: String, analytic: &[f64], numeric: &[f64]) {
        let e = rel_error(analytic, numeric);
        self.checked += numeric.len();
        if e > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = e;
            self.worst = name;
        }
    }
}

/// Check gradients of a scalar function of free input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out);
    let mut report = GradCheck::new();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric[j] = (fp - fm) / (2.0 * FD_STEP);
        }
        report.record(format!("input{i}"), &analytic, &numeric);
    }
    Ok(report)
}

/// Check gradients of a scalar function of the trainable parameters in
/// `store`. At most `max_entries` entries per tensor are probed (evenly
/// strided) to bound cost on wide layers.
pub fn check_params<F>(store: &ParamStore, max_entries: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out);
    let analytic: Vec<(ParamId, Tensor)> = grads.param_grads().into_iter().map(|(id, t)| (id, t.clone())).collect();
    let mut report = GradCheck::new();
    let mut work = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.get(id).len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let probe: Vec<usize> = (0..n).step_by(stride).collect();
        let full = analytic.iter().find(|(i, _)| *i == id).map(|(_, t)| t.data().to_vec());
        let mut a = Vec::with_capacity(probe.len());
        let mut num = Vec::with_capacity(probe.len());
        for &j in &probe {
            a.push(full.as_ref().map_or(0.0, |v| v[j]));
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            num.push((fp - fm) / (2.0 * FD_STEP));
        }
        report.record(store.name(id).to_string(), &a, &num);
    }
    Ok(report)
}
