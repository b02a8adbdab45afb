//! Central finite differences against tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn eval<T, F>(f: &F, x: &Tensor<T>) -> Result<T>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = f(&tape, xv)?;
    out.item()
}

/// Largest `|analytic - central| / max(1, |central|)` over all coordinates
/// of `x`, with step `h`.
///
/// `f` must be deterministic: it is evaluated twice at `x` and any bitwise
/// difference is reported as a contract error.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_difference_check_at(f, x, h, &coords)
}

/// As [`finite_difference_check`], restricted to the listed flat coordinates.
pub fn finite_difference_check_at<T, F>(f: F, x: &Tensor<T>, h: T, coords: &[usize]) -> Result<T>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    if h <= T::zero() {
        bail!(Contract, "finite-difference step must be positive");
    }
    if let Some(&c) = coords.iter().find(|&&c| c >= x.numel()) {
        bail!(Dimension, "coordinate {c} out of range for {} values", x.numel());
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.variable(x.clone());
        let out = f(&tape, xv)?;
        if out.shape().iter().product::<usize>() != 1 {
            bail!(Contract, "checked function must be scalar-valued, got {:?}", out.shape());
        }
        let first = out.item()?;
        let again = eval(&f, x)?;
        if first.to_f64_lossy().to_bits() != again.to_f64_lossy().to_bits() {
            bail!(Contract, "checked function is not deterministic ({first} vs {again})");
        }
        if !out.requires_grad() {
            Tensor::zeros(x.shape())?
        } else {
            tape.backward(out)?;
            tape.grad(xv).unwrap_or(Tensor::zeros(x.shape())?)
        }
    };
    let two_h = h + h;
    let mut worst = T::zero();
    let mut probe = x.clone();
    for &c in coords {
        let orig = probe.data()[c];
        probe.data_mut()[c] = orig + h;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[c] = orig - h;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[c] = orig;
        let fd = (fp - fm) / two_h;
        let err = (analytic.data()[c] - fd).abs() / fd.abs().max(T::one());
        if !err.is_finite() {
            bail!(Numeric, "non-finite gradient error at coordinate {c}");
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
