//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only ever evaluates forward values, so it is independent of
//! every backward rule it checks.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Denominator floor of the relative error, so exact zeros compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares the gradient of the scalar built by `f` with central differences.
///
/// At most `max_coords` coordinates per input are probed (evenly strided);
/// `None` probes all of them.
pub fn check<F>(
    inputs: &[Tensor<f64>],
    f: F,
    eps: f64,
    max_coords: Option<usize>,
) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&mut g, &vars);
    let grads = g.backward(root);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let n = inputs[ti].numel();
        let zeros = vec![0.0; n];
        let analytic = grads.get(*v).unwrap_or(&zeros).to_vec();
        let step = match max_coords {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        for coord in (0..n).step_by(step) {
            let orig = work[ti].data()[coord];
            work[ti].data_mut()[coord] = orig + eps;
            let up = eval(&work);
            work[ti].data_mut()[coord] = orig - eps;
            let down = eval(&work);
            work[ti].data_mut()[coord] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = rel_err(analytic[coord], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: err,
                    worst_input: ti,
                    worst_coord: coord,
                    analytic: analytic[coord],
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    report
}
