//! Segmentation losses and the weighted two-modality objective.

use crate::autograd::Var;
use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DICE_SMOOTH: f64 = 1e-5;
pub const CE_FLOOR: f64 = 1e-12;
const PROB_SUM_TOL: f64 = 1e-6;

/// Weights of the Dice, cross-entropy and affinity-consistency terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta_ce: f64,
    pub lambda_csa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta_ce: 1.0,
            lambda_csa: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta_ce", self.beta_ce),
            ("lambda_csa", self.lambda_csa),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bail!(Config, "loss weight {name} = {v} must be finite and non-negative");
            }
        }
        Ok(())
    }
}

fn check_inputs<T: Scalar>(probs: &Var<'_, T>, target: &Tensor<T>) -> Result<(usize, usize)> {
    let shape = probs.shape();
    if shape.len() != 4 {
        bail!(Dimension, "probabilities must be [n,C,h,w], got {shape:?}");
    }
    if target.shape() != shape.as_slice() {
        bail!(Dimension, "target {:?} vs probabilities {shape:?}", target.shape());
    }
    let (n, c) = (shape[0], shape[1]);
    let plane = shape[2] * shape[3];
    let p = probs.value();
    let tol = T::lit(PROB_SUM_TOL);
    for s in 0..n {
        for px in 0..plane {
            let sum: T = (0..c).map(|k| p.data()[(s * c + k) * plane + px]).sum();
            if (sum - T::one()).abs() > tol {
                bail!(Contract, "probabilities at sample {s}, pixel {px} sum to {sum}, not 1");
            }
        }
    }
    Ok((n, c))
}

/// Soft Dice loss `1 - mean_c (2Σpg + s) / (Σp + Σg + s)` with sums over
/// the batch and both spatial axes. Class 0 is left out when
/// `include_background` is false.
pub fn dice_loss<'t, T: Scalar>(probs: Var<'t, T>, target: &Tensor<T>, include_background: bool) -> Result<Var<'t, T>> {
    let (_, c) = check_inputs(&probs, target)?;
    let start = usize::from(!include_background);
    if start >= c {
        bail!(Config, "dice loss over zero classes");
    }
    let tape = probs.tape();
    let g = tape.constant(target.clone());
    let smooth = T::lit(DICE_SMOOTH);
    let inter = probs.mul(g)?.sum_axes(&[0, 2, 3], false)?;
    let psum = probs.sum_axes(&[0, 2, 3], false)?;
    let gsum = g.sum_axes(&[0, 2, 3], false)?;
    let num = inter.scale(T::lit(2.0)).add_scalar(smooth);
    let den = psum.add(gsum)?.add_scalar(smooth);
    let per_class = num.div(den)?;
    let keep = Tensor::from_fn(&[c], |k| if k >= start { T::one() } else { T::zero() })?;
    let mean = per_class
        .mul_const(keep)?
        .sum_all()
        .scale(T::one() / T::from_usize_lossy(c - start));
    Ok(mean.neg().add_scalar(T::one()))
}

/// Pixel-mean cross entropy `-mean log p_true`, with `p_true` clamped to
/// `[1e-12, 1]`.
pub fn ce_loss<'t, T: Scalar>(probs: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    check_inputs(&probs, target)?;
    let g = probs.tape().constant(target.clone());
    let p_true = probs.mul(g)?.sum_axes(&[1], false)?;
    Ok(p_true.clamp(T::lit(CE_FLOOR), T::one()).ln()?.mean_all().neg())
}

/// Dice and cross-entropy terms of one modality.
#[derive(Clone, Copy, Debug)]
pub struct SegLoss<'t, T> {
    pub dice: Var<'t, T>,
    pub ce: Var<'t, T>,
}

/// `α(dice¹ + dice²) + β(ce¹ + ce²) + λ·csa`. The affinity term is left
/// out of the graph entirely when `csa` is `None` or `λ = 0`.
pub fn total_loss<'t, T: Scalar>(
    seg1: SegLoss<'t, T>,
    seg2: SegLoss<'t, T>,
    csa: Option<Var<'t, T>>,
    w: &LossWeights,
) -> Result<Var<'t, T>> {
    w.validate()?;
    let mut parts = vec![
        ("dice1", seg1.dice),
        ("ce1", seg1.ce),
        ("dice2", seg2.dice),
        ("ce2", seg2.ce),
    ];
    if let Some(c) = csa {
        parts.push(("csa", c));
    }
    for (name, v) in &parts {
        let x = v.item()?;
        if !x.is_finite() {
            bail!(Numeric, "loss component {name} is {x}");
        }
    }
    let dice = seg1.dice.add(seg2.dice)?.scale(T::lit(w.alpha));
    let ce = seg1.ce.add(seg2.ce)?.scale(T::lit(w.beta_ce));
    let mut total = dice.add(ce)?;
    if let Some(c) = csa {
        if w.lambda_csa != 0.0 {
            total = total.add(c.scale(T::lit(w.lambda_csa)))?;
        }
    }
    Ok(total)
}
