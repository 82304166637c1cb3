//! Central finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::matrix::Matrix;
use super::tape::{Tape, Var};

/// Denominator offset in the relative error.
pub const REL_OFFSET: f64 = 1e-8;

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Returns `max |analytic - numeric| / (|numeric| + 1e-8)`.
pub fn grad_check<T, F>(mut f: F, x: &Matrix<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    grad_check_many(|t, xs| f(t, xs[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once; the maximum is taken over
/// every coordinate of every input.
pub fn grad_check_many<T, F>(mut f: F, xs: &[Matrix<T>], h: f64) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(1e-5..=1e-3).contains(&h) {
        return Err(Error::Param(format!("finite-difference step {h} outside [1e-5, 1e-3]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).item();
    if !f0.is_finite() {
        return Err(Error::Numeric(format!("function value {f0} is not finite")));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Matrix<T>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| grads.get_or_zeros(v, x.shape()))
        .collect();

    let mut eval = |inputs: &[Matrix<T>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item().as_f64())
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Matrix<T>> = xs.to_vec();
    for k in 0..xs.len() {
        for i in 0..xs[k].len() {
            let orig = xs[k].as_slice()[i];
            probe[k].as_mut_slice()[i] = T::lit(orig.as_f64() + h);
            let plus = eval(&probe)?;
            probe[k].as_mut_slice()[i] = T::lit(orig.as_f64() - h);
            let minus = eval(&probe)?;
            probe[k].as_mut_slice()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k].as_slice()[i].as_f64();
            let rel = (a - numeric).abs() / (numeric.abs() + REL_OFFSET);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
