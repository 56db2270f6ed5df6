//! Central-difference gradient verification.
//!
//! The numeric side only re-runs forward evaluations, so it stays
//! independent of the reverse sweep it is checking.

use super::{DiffError, Graph, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked parameter elements.
    pub max_rel_err: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: (usize, usize),
    /// Tape and numeric gradients at the worst element.
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalar elements checked.
    pub checked: usize,
    /// True when any forward pass evaluated a relu/abs within 10h of its
    /// kink; central differences are unreliable there and the result
    /// should be excluded from pass/fail decisions.
    pub kink_flagged: bool,
}

/// Relative error with a floor: tiny gradients are compared absolutely
/// so finite-difference round-off does not read as failure, while a
/// missing gradient (analytic 0 vs numeric 1e-5) still registers.
fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs()).max(1e-3);
    (a - n).abs() / scale
}

/// Checks the tape gradient of a scalar-valued graph against central
/// finite differences `(f(p+h) - f(p-h)) / 2h`, element by element.
///
/// `build` must construct the same graph for the same parameter values;
/// it is invoked once for the analytic pass and twice per parameter
/// element for the numeric passes.
pub fn grad_check<F>(build: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, DiffError>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(f64, f64), DiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let shape = g.value(loss).shape();
        if shape != (1, 1) {
            return Err(DiffError::NotScalar { rows: shape.0, cols: shape.1 });
        }
        Ok((g.value(loss).item(), g.nearest_kink()))
    };

    // analytic pass
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let shape = g.value(loss).shape();
    if shape != (1, 1) {
        return Err(DiffError::NotScalar { rows: shape.0, cols: shape.1 });
    }
    let grads = g.backward(loss)?;
    let mut kink = g.nearest_kink();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
        .collect();
    drop(g);

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        kink_flagged: false,
    };
    for pi in 0..params.len() {
        for e in 0..params[pi].len() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let (fp, kp) = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let (fm, km) = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            kink = kink.min(kp).min(km);

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[e];
            let rel = relative_error(a, numeric);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, e);
                report.analytic = a;
                report.numeric = numeric;
            }
            report.checked += 1;
        }
    }
    report.kink_flagged = kink <= 10.0 * h;
    Ok(report)
}
