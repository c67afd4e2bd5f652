use super::{Matrix, NumericsError, Tape, Var};

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares the tape gradient of a scalar function with central differences.
///
/// `f` receives a fresh tape and the input registered as a parameter and
/// must return a `1×1` node. The result is
/// `max |analytic - numeric| / (|analytic| + 1e-8)` over all entries.
pub fn grad_check<F>(f: F, x: &Matrix<f64>) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let eval = |input: &Matrix<f64>| -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(input.clone());
        let out = f(&mut tape, v);
        tape.scalar(out)
    };

    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v);
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
    if !analytic.is_finite() {
        return Err(NumericsError::NonFiniteGradient);
    }

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + GRAD_CHECK_STEP;
        let up = eval(&probe);
        probe.data_mut()[i] = orig - GRAD_CHECK_STEP;
        let down = eval(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        if !numeric.is_finite() {
            return Err(NumericsError::NonFiniteGradient);
        }
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}
