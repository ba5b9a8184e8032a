use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the per-coordinate relative error, so coordinates
/// whose true derivative is ~0 are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::inference();
    let v = g.input(x.clone());
    let out = f(&mut g, v)?;
    let val = g.value(out);
    if val.numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
    }
    let y = val.item();
    if !y.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite function value".into()));
    }
    Ok(y)
}

/// Compares the reverse-mode gradient of the scalar map `f` at `x` with
/// central differences on every coordinate. Returns the maximum relative
/// error `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    Ok(grad_check_coords(f, x, step, &all)?.max_rel_err)
}

/// [`grad_check`] restricted to the listed coordinates of `x`.
pub fn grad_check_coords<F>(f: F, x: &Tensor<f64>, step: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Contract(format!("grad_check step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
    }
    g.backward(out)?;
    let analytic = g
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: 0,
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
