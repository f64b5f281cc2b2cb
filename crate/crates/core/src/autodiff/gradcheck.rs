use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so that gradients that are zero up
/// to rounding are compared in absolute terms.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter tensor and flat element index where the maximum occurred.
    pub worst_param: usize,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

fn eval<F>(f: &F, params: &[Tensor<f64>], with_grad: bool) -> Result<(f64, Vec<Tensor<f64>>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check: function returned shape {:?}",
            tape.shape(root)
        )));
    }
    let loss = tape.value(root).data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let mut grads = Vec::new();
    if with_grad {
        tape.backward(root)?;
        for (p, &v) in params.iter().zip(&vars) {
            grads.push(
                tape.take_grad(v)
                    .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())),
            );
        }
    }
    Ok((loss, grads))
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences with step `h`, element by element over `params`.
///
/// The error of one element is `|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with_floor(f, params, h, GRADCHECK_FLOOR)
}

pub fn grad_check_with_floor<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) || !(floor > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "grad_check: step {h} and floor {floor} must be positive"
        )));
    }
    let (_, analytic) = eval(&f, params, true)?;
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let x0 = params[p].data()[i];
            work[p].data_mut()[i] = x0 + h;
            let (fp, _) = eval(&f, &work, false)?;
            work[p].data_mut()[i] = x0 - h;
            let (fm, _) = eval(&f, &work, false)?;
            work[p].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[p].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst_param = p;
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
