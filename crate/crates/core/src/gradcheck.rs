//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar
/// variable. Returns the maximum over inputs of
/// `max_i |analytic_i − numeric_i| / (max_i |numeric_i| + 1e-12)`: errors are
/// measured against each input's gradient scale, since coordinate-wise ratios
/// on near-zero entries only measure the roundoff of the differences.
pub fn finite_diff_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tape<T>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.scalar_value(out)?.as_f64();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("finite_diff_check"))
        }
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = f(&tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (slot, (input, &var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(var, input);
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for idx in 0..input.len() {
            let mut data = input.to_vec();
            let base = data[idx];
            data[idx] = T::lit(base.as_f64() + eps);
            probe[slot] = Tensor::new(input.rows(), input.cols(), data.clone())?;
            let up = eval(&probe)?;
            data[idx] = T::lit(base.as_f64() - eps);
            probe[slot] = Tensor::new(input.rows(), input.cols(), data)?;
            let down = eval(&probe)?;
            probe[slot] = input.clone();

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[idx].as_f64();
            diff = diff.max((a - numeric).abs());
            scale = scale.max(numeric.abs());
        }
        worst = worst.max(diff / (scale + 1e-12));
    }
    Ok(worst)
}
