//! Central finite-difference gradient checking.
//!
//! Uses only forward evaluations for the numeric side, so it is an oracle
//! independent of the adjoint code it checks.

use super::{Real, Tape, Tensor, TensorError, Var};

/// Outcome of comparing analytic and numeric gradients for every input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` per input.
    pub relative_errors: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// A scalar-valued function of tape leaves, evaluable at any precision.
pub trait ScalarFn {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var, TensorError>;
}

fn analytic_at<T: Real>(
    inputs: &[Tensor<f64>],
    f: impl FnOnce(&mut Tape<T>, &[Var]) -> Result<Var, TensorError>,
) -> Result<Vec<Vec<f64>>, TensorError> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.cast(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .wrt(*v)
                .map(|g| g.iter().map(|x| x.f64()).collect())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect())
}

fn compare(
    inputs: &[Tensor<f64>],
    step: f64,
    analytic: Vec<Vec<f64>>,
    eval: impl Fn(&[Tensor<f64>]) -> Result<f64, TensorError>,
) -> Result<GradCheck, TensorError> {
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut numeric_all = Vec::with_capacity(inputs.len());
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        errors.push(relative_error(a, &numeric));
        numeric_all.push(numeric);
    }
    Ok(GradCheck {
        relative_errors: errors,
        analytic,
        numeric: numeric_all,
    })
}

fn forward_f64(
    values: &[Tensor<f64>],
    f: impl FnOnce(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Checks `d f / d inputs` in 64-bit precision.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let analytic = analytic_at::<f64>(inputs, &f)?;
    compare(inputs, step, analytic, |v| forward_f64(v, &f))
}

/// Checks `d f / d inputs` with analytic gradients taken at precision `T`.
/// The numeric reference always evaluates `f` at `f64`.
pub fn check_at<T: Real, F: ScalarFn>(
    inputs: &[Tensor<f64>],
    step: f64,
    f: &F,
) -> Result<GradCheck, TensorError> {
    let analytic = analytic_at::<T>(inputs, |tape, vars| f.eval(tape, vars))?;
    compare(inputs, step, analytic, |v| {
        forward_f64(v, |tape, vars| f.eval(tape, vars))
    })
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
