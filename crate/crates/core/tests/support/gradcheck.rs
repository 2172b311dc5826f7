//! Central finite-difference oracle.
//!
//! Analytic gradients come from the `f32` tape. Numeric gradients replay the
//! same forward code in `f64`, so the difference quotient is not dominated by
//! `f32` rounding at `h = 1e-3`.

use std::collections::BTreeMap;

use adaptlab_core::tape::{Graph, Var};
use adaptlab_core::tensor::{Real, Tensor};
use adaptlab_core::Result;

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_TOL: f64 = 1e-4;
/// Below this analytic magnitude the absolute tolerance applies.
pub const SMALL: f64 = 1e-2;

pub trait Scenario {
    /// Named leaves the loss is differentiated against.
    fn inputs(&self) -> Vec<(String, Tensor)>;
    /// Records a scalar loss from the bound leaves.
    fn loss<T: Real>(&self, g: &mut Graph<T>, vars: &BTreeMap<String, Var>) -> Result<Var>;
}

#[allow(dead_code)]
#[derive(Debug, Clone)]
pub struct Mismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs_small: f64,
    pub failures: Vec<Mismatch>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

fn eval_f64<S: Scenario>(s: &S, inputs: &[(String, Tensor<f64>)]) -> f64 {
    let mut g: Graph<f64> = Graph::new();
    let vars = inputs
        .iter()
        .map(|(n, t)| (n.clone(), g.constant(t.clone())))
        .collect();
    let loss = s.loss(&mut g, &vars).expect("forward");
    g.value(loss).data()[0]
}

pub fn within_tolerance(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < SMALL {
        diff < ABS_TOL
    } else {
        diff / analytic.abs().max(numeric.abs()) < REL_TOL
    }
}

/// Compares every partial derivative (or every `stride`-th one) of the loss.
pub fn check<S: Scenario>(s: &S, stride: usize) -> Report {
    let inputs = s.inputs();
    let mut g: Graph<f32> = Graph::new();
    let vars: BTreeMap<String, Var> = inputs
        .iter()
        .map(|(n, t)| (n.clone(), g.param(t.clone())))
        .collect();
    let loss = s.loss(&mut g, &vars).expect("forward");
    let grads = g.backward(loss).expect("backward");

    let base: Vec<(String, Tensor<f64>)> =
        inputs.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
    let mut report = Report::default();
    let mut counter = 0usize;
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[name])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in 0..t.numel() {
            counter += 1;
            if (counter - 1) % stride.max(1) != 0 {
                continue;
            }
            let mut plus = base.clone();
            plus[k].1.data_mut()[i] += STEP;
            let mut minus = base.clone();
            minus[k].1.data_mut()[i] -= STEP;
            let numeric = (eval_f64(s, &plus) - eval_f64(s, &minus)) / (2.0 * STEP);
            let a = analytic[i] as f64;
            report.checked += 1;
            if a.abs() < SMALL {
                report.max_abs_small = report.max_abs_small.max((a - numeric).abs());
            } else {
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                report.max_rel = report.max_rel.max(rel);
            }
            if !within_tolerance(a, numeric) {
                report.failures.push(Mismatch {
                    name: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report
}

/// `sum(y ⊙ w)` for a fixed weight tensor, a generic probe loss.
pub fn weighted_sum<T: Real>(g: &mut Graph<T>, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.cast());
    let w = if g.shape(w) != g.shape(y) {
        let shape = g.shape(y).to_vec();
        g.reshape(w, &shape)?
    } else {
        w
    };
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}
