use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F, Func>(mut f: Func, x: &Tensor<F>, h: F) -> Result<Tensor<F>>
where
    F: Real,
    Func: FnMut(&Tensor<F>) -> Result<F>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    let two_h = h + h;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "finite difference: non-finite function value at coordinate {i} (f+ = {plus}, f- = {minus})"
            )));
        }
        grad.push((plus - minus) / two_h);
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), grad))
}
