//! Per-class Dice overlap and boundary Hausdorff distance.

use std::fmt::Write as _;

use crate::data::{Batch, Sample};
use crate::error::{bail, Error, Result};
use crate::model::DualStreamModel;
use crate::nn::ModalityId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn binary<T: Scalar>(mask: &Tensor<T>, what: &str) -> Result<Vec<bool>> {
    if mask.rank() != 2 {
        bail!(Dimension, "{what} mask must be [H,W], got {:?}", mask.shape());
    }
    mask.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v == T::one() {
                Ok(true)
            } else if v == T::zero() {
                Ok(false)
            } else {
                Err(Error::Contract(format!("{what} mask has non-binary value {v} at {i}")))
            }
        })
        .collect()
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Dimension, "mask shapes differ: {:?} vs {:?}", a.shape(), b.shape());
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`, and 1 when both masks are empty.
pub fn dice_score<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    same_shape(pred, gt)?;
    let p = binary(pred, "predicted")?;
    let g = binary(gt, "ground-truth")?;
    Ok(dice_from_bools(&p, &g))
}

fn dice_from_bools(p: &[bool], g: &[bool]) -> f64 {
    let inter = p.iter().zip(g).filter(|(a, b)| **a && **b).count();
    let total = p.iter().filter(|&&a| a).count() + g.iter().filter(|&&b| b).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Mask pixels with a 4-neighbour outside the mask or on the image edge.
pub fn boundary_pixels(mask: &[bool], height: usize, width: usize) -> Vec<(usize, usize)> {
    let inside = |r: usize, c: usize| mask[r * width + c];
    let mut out = Vec::new();
    for r in 0..height {
        for c in 0..width {
            if !inside(r, c) {
                continue;
            }
            let edge = r == 0 || c == 0 || r + 1 == height || c + 1 == width;
            if edge || !inside(r - 1, c) || !inside(r + 1, c) || !inside(r, c - 1) || !inside(r, c + 1) {
                out.push((r, c));
            }
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of
/// parabolas). `f` holds `None` for "no site".
fn edt_1d(f: &[Option<i64>]) -> Vec<Option<i64>> {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&i| f[i].is_some()).collect();
    if sites.is_empty() {
        return vec![None; n];
    }
    let val = |q: usize| f[q].expect("site");
    // Intersection of parabolas rooted at q and p (q > p), as a rational
    // compared by cross multiplication.
    let meets_before = |p: usize, q: usize, r: usize| -> bool {
        // Is intersection(q, r) <= intersection(p, q)?
        let (p, q, r) = (p as i64, q as i64, r as i64);
        let (fp, fq, fr) = (val(p as usize), val(q as usize), val(r as usize));
        let num_pq = (fq + q * q) - (fp + p * p);
        let den_pq = 2 * (q - p);
        let num_qr = (fr + r * r) - (fq + q * q);
        let den_qr = 2 * (r - q);
        num_qr * den_pq <= num_pq * den_qr
    };
    let mut hull: Vec<usize> = Vec::with_capacity(sites.len());
    for &q in &sites {
        while hull.len() >= 2 && meets_before(hull[hull.len() - 2], hull[hull.len() - 1], q) {
            hull.pop();
        }
        hull.push(q);
    }
    let mut out = vec![None; n];
    let mut k = 0;
    for (x, slot) in out.iter_mut().enumerate() {
        let cost = |s: usize| {
            let d = x as i64 - s as i64;
            d * d + val(s)
        };
        while k + 1 < hull.len() && cost(hull[k + 1]) <= cost(hull[k]) {
            k += 1;
        }
        *slot = Some(cost(hull[k]));
    }
    out
}

/// Exact squared Euclidean distance from every pixel to the nearest site.
fn squared_distance_transform(sites: &[(usize, usize)], height: usize, width: usize) -> Vec<Option<i64>> {
    let mut grid = vec![None; height * width];
    for &(r, c) in sites {
        grid[r * width + c] = Some(0);
    }
    for r in 0..height {
        let row = edt_1d(&grid[r * width..(r + 1) * width]);
        grid[r * width..(r + 1) * width].copy_from_slice(&row);
    }
    for c in 0..width {
        let col: Vec<Option<i64>> = (0..height).map(|r| grid[r * width + c]).collect();
        for (r, v) in edt_1d(&col).into_iter().enumerate() {
            grid[r * width + c] = v;
        }
    }
    grid
}

fn directed_squared(from: &[(usize, usize)], to_dt: &[Option<i64>], width: usize) -> i64 {
    from.iter()
        .map(|&(r, c)| to_dt[r * width + c].expect("target boundary non-empty"))
        .max()
        .unwrap_or(0)
}

/// Symmetric Hausdorff distance between the boundary pixel sets, in
/// pixels. `None` when either mask is empty.
pub fn surface_hausdorff<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Option<f64>> {
    surface_hausdorff_scaled(pred, gt, 1.0)
}

/// [`surface_hausdorff`] multiplied by an isotropic pixel spacing.
pub fn surface_hausdorff_scaled<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, spacing: f64) -> Result<Option<f64>> {
    same_shape(pred, gt)?;
    if !(spacing > 0.0 && spacing.is_finite()) {
        bail!(Config, "pixel spacing {spacing} must be positive");
    }
    let p = binary(pred, "predicted")?;
    let g = binary(gt, "ground-truth")?;
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    Ok(hausdorff_from_bools(&p, &g, h, w).map(|d| d * spacing))
}

fn hausdorff_from_bools(p: &[bool], g: &[bool], h: usize, w: usize) -> Option<f64> {
    let bp = boundary_pixels(p, h, w);
    let bg = boundary_pixels(g, h, w);
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let dp = squared_distance_transform(&bp, h, w);
    let dg = squared_distance_transform(&bg, h, w);
    let sq = directed_squared(&bp, &dg, w).max(directed_squared(&bg, &dp, w));
    Some((sq as f64).sqrt())
}

/// Scores of one sample, indexed by class.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    pub id: String,
    pub dice: Vec<f64>,
    pub hausdorff: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegReport {
    pub classes: usize,
    pub samples: Vec<SampleScores>,
    /// Mean over samples.
    pub mean_dice: Vec<f64>,
    /// Mean over the samples where the distance is defined.
    pub mean_hausdorff: Vec<Option<f64>>,
}

impl SegReport {
    pub fn from_samples(classes: usize, samples: Vec<SampleScores>) -> Result<Self> {
        if samples.is_empty() {
            bail!(Data, "cannot report on an empty dataset");
        }
        let n = samples.len() as f64;
        let mean_dice = (0..classes)
            .map(|c| samples.iter().map(|s| s.dice[c]).sum::<f64>() / n)
            .collect();
        let mean_hausdorff = (0..classes)
            .map(|c| {
                let defined: Vec<f64> = samples.iter().filter_map(|s| s.hausdorff[c]).collect();
                (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
            })
            .collect();
        Ok(Self {
            classes,
            samples,
            mean_dice,
            mean_hausdorff,
        })
    }

    /// Mean Dice over classes 1..C.
    pub fn foreground_dice(&self) -> f64 {
        let fg = &self.mean_dice[1..];
        fg.iter().sum::<f64>() / fg.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,class,dice,hausdorff\n");
        for s in &self.samples {
            for c in 0..self.classes {
                let hd = s.hausdorff[c].map_or("nan".to_string(), |d| format!("{d:?}"));
                let _ = writeln!(out, "{},{c},{:?},{hd}", s.id, s.dice[c]);
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<8}{:>10}{:>12}\n", "class", "dice", "hausdorff");
        for c in 0..self.classes {
            let hd = self.mean_hausdorff[c].map_or("undefined".to_string(), |d| format!("{d:.4}"));
            let _ = writeln!(out, "{c:<8}{:>10.4}{hd:>12}", self.mean_dice[c]);
        }
        let _ = writeln!(out, "{:<8}{:>10.4}", "fg-mean", self.foreground_dice());
        out
    }
}

/// Argmax over the class axis of `[n,C,H,W]` probabilities; ties resolve to
/// the lowest class.
pub fn argmax_labels<T: Scalar>(probs: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
    if probs.rank() != 4 {
        bail!(Dimension, "probabilities must be [n,C,H,W], got {:?}", probs.shape());
    }
    let s = probs.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let d = probs.data();
    Ok((0..n)
        .map(|i| {
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if d[(i * c + k) * plane + p] > d[(i * c + best) * plane + p] {
                            best = k;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect())
}

/// Scores label images against ground-truth label images of `h x w`.
pub fn score_labels(id: &str, pred: &[usize], gt: &[usize], classes: usize, h: usize, w: usize) -> SampleScores {
    let mut dice = Vec::with_capacity(classes);
    let mut hausdorff = Vec::with_capacity(classes);
    for c in 0..classes {
        let p: Vec<bool> = pred.iter().map(|&l| l == c).collect();
        let g: Vec<bool> = gt.iter().map(|&l| l == c).collect();
        dice.push(dice_from_bools(&p, &g));
        hausdorff.push(hausdorff_from_bools(&p, &g, h, w));
    }
    SampleScores {
        id: id.to_string(),
        dice,
        hausdorff,
    }
}

const EVAL_BATCH: usize = 8;

/// Eval-mode argmax predictions of stream `m` on `samples`, scored per
/// class against each sample's masks.
pub fn evaluate<T: Scalar>(model: &mut DualStreamModel<T>, samples: &[Sample<T>], m: ModalityId) -> Result<SegReport> {
    if samples.is_empty() {
        bail!(Data, "cannot evaluate on an empty dataset");
    }
    let classes = model.spec().classes;
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample<T>> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs)?;
        let probs = model.predict(&batch.images, m)?;
        for (s, pred) in chunk.iter().zip(argmax_labels(&probs)?) {
            let gt: Vec<usize> = s.masks.labels().iter().map(|&l| s.masks.class_ids()[l]).collect();
            scores.push(score_labels(&s.id, &pred, &gt, classes, s.masks.height(), s.masks.width()));
        }
    }
    SegReport::from_samples(classes, scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Tensor<f64> {
        let mut d = vec![0.0; h * w];
        for &(r, c) in on {
            d[r * w + c] = 1.0;
        }
        Tensor::new(vec![h, w], d).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask(3, 3, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        let b = mask(3, 3, &[(0, 1), (1, 1), (0, 2), (1, 2)]);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.5);
        let c = mask(3, 3, &[(2, 2)]);
        assert_eq!(dice_score(&a, &c).unwrap(), 0.0);
        let e = mask(3, 3, &[]);
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
        let bad = Tensor::full(&[3, 3], 0.5).unwrap();
        assert!(matches!(dice_score(&bad, &a), Err(Error::Contract(_))));
    }

    #[test]
    fn hausdorff_examples() {
        let a = mask(5, 5, &[(0, 0)]);
        let b = mask(5, 5, &[(3, 4)]);
        assert_eq!(surface_hausdorff(&a, &b).unwrap(), Some(5.0));
        assert_eq!(surface_hausdorff(&a, &a).unwrap(), Some(0.0));
        assert_eq!(surface_hausdorff(&a, &mask(5, 5, &[])).unwrap(), None);
        assert_eq!(surface_hausdorff_scaled(&a, &b, 0.5).unwrap(), Some(2.5));
    }

    #[test]
    fn interior_pixels_are_not_boundary() {
        let all = vec![true; 25];
        let b = boundary_pixels(&all, 5, 5);
        assert_eq!(b.len(), 16);
        assert!(!b.contains(&(2, 2)));
    }

    #[test]
    fn report_aggregation() {
        let gt = vec![0, 1, 1, 0];
        let s1 = score_labels("a", &gt, &gt, 2, 2, 2);
        let s2 = score_labels("b", &[0, 0, 0, 0], &gt, 2, 2, 2);
        let r = SegReport::from_samples(2, vec![s1, s2]).unwrap();
        assert_eq!(r.mean_dice[1], 0.5);
        assert_eq!(r.mean_hausdorff[1], Some(0.0));
        assert!(r.to_csv().starts_with("sample_id,class,dice,hausdorff\n"));
        assert!(r.to_table().contains("fg-mean"));
        assert!(SegReport::from_samples(2, vec![]).is_err());
    }
}
