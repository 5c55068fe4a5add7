//! Central finite-difference verification of graph gradients.

use crate::error::{shape_err, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Magnitudes below this are compared absolutely rather than relatively.
const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Index of the worst coordinate.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates where one-sided differences disagree (non-differentiable
    /// points); excluded from the pass/fail decision.
    pub kinks: Vec<usize>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = f(&mut g, v)?;
    if g.value(out).numel() != 1 {
        return Err(shape_err("gradient check needs a scalar function"));
    }
    Ok(g.value(out).item())
}

/// Compares the autodiff gradient of scalar `f` at `x` against central
/// differences with step [`DEFAULT_STEP`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_with(f, x, tol, DEFAULT_STEP)
}

pub fn finite_diff_check_with<F>(f: F, x: &Tensor, tol: f64, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = f(&mut g, v)?;
    if g.value(out).numel() != 1 {
        return Err(shape_err("gradient check needs a scalar function"));
    }
    let f0 = g.value(out).item();
    g.backward(out)?;
    let analytic = g
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        kinks: Vec::new(),
        tol,
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;

        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        let scale = fwd.abs().max(bwd.abs());
        if (fwd - bwd).abs() > 1e-2 * scale + 1e-6 {
            report.kinks.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs());
        let err = if denom < ABS_FLOOR {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / denom
        };
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let f = |g: &mut Graph, v: Var| {
            let z = g.constant(Tensor::zeros(&[3]));
            let m = g.mse(v, z)?;
            Ok(g.scale(m, 3.0))
        };
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let l = f(&mut g, v).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0, 6.0]);
        let r = finite_diff_check(f, &x, 1e-6).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn relu_kink_is_flagged() {
        let x = Tensor::new(vec![3], vec![0.0, 0.5, -0.5]).unwrap();
        let r = finite_diff_check(
            |g, v| {
                let r = g.relu(v);
                Ok(g.sum(r))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert_eq!(r.kinks, vec![0]);
        assert_eq!(r.checked, 2);
        assert!(r.passed());
    }
}
