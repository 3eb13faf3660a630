use super::{Result, Tape, Tensor, TensorError, Var};

/// Compares the tape gradient of a scalar function against central
/// differences.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`. The
/// function is evaluated twice at `x` first; any difference between the two
/// evaluations is reported as [`TensorError::NonDeterministic`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(TensorError::BadStep(step));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point.clone());
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(value.shape().to_vec()));
        }
        Ok(value.item())
    };

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let root = f(&mut tape, xv)?;
    let analytic = tape.backward(root)?.get(xv);
    let first = tape.value(root).item();
    let second = eval(x)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic((first - second).abs()));
    }

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
