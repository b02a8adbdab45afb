//! Class-specific feature maps, between-layer affinity matrices and the
//! cross-modality affinity consistency loss.
//!
//! For a class mask `M^c` and feature maps `F(l)` (`M` channels) and `F(k)`
//! (`N` channels), channel `m` of `F(l) ⊙ M^c` and channel `n` of
//! `F(k) ⊙ M^c` are compared by cosine similarity scaled by `1/S_c`, where
//! `S_c` is the mask area at the resolution the comparison happens at. When
//! the two layers have different spatial extents the finer masked map is
//! average-pooled down to the coarser one.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::autograd::Var;
use crate::error::{bail, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-class binary masks `[C,H,W]` partitioning an image.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMaskSet<T> {
    masks: Tensor<T>,
    class_ids: Vec<usize>,
    region_sizes: Vec<usize>,
}

impl<T: Scalar> ClassMaskSet<T> {
    /// Validates that every entry is 0 or 1 and that each pixel belongs to
    /// exactly one class.
    pub fn new(masks: Tensor<T>, class_ids: Vec<usize>) -> Result<Self> {
        if masks.rank() != 3 {
            bail!(Dimension, "class masks must be [C,H,W], got {:?}", masks.shape());
        }
        let (c, h, w) = (masks.shape()[0], masks.shape()[1], masks.shape()[2]);
        if class_ids.len() != c {
            bail!(Dimension, "{} class ids for {c} masks", class_ids.len());
        }
        let plane = h * w;
        let mut region_sizes = vec![0usize; c];
        let mut cover = vec![0usize; plane];
        for (ci, size) in region_sizes.iter_mut().enumerate() {
            for (p, &v) in masks.data()[ci * plane..(ci + 1) * plane].iter().enumerate() {
                if v == T::one() {
                    *size += 1;
                    cover[p] += 1;
                } else if v != T::zero() {
                    bail!(Data, "mask {ci} has non-binary value {v} at pixel {p}");
                }
            }
        }
        if let Some(p) = cover.iter().position(|&n| n != 1) {
            bail!(Data, "masks do not partition the image: pixel {p} covered {} times", cover[p]);
        }
        Ok(Self {
            masks,
            class_ids,
            region_sizes,
        })
    }

    /// One-hot expansion of a label image (row-major `height*width` class
    /// indices in `0..classes`).
    pub fn from_labels(labels: &[usize], height: usize, width: usize, classes: usize) -> Result<Self> {
        if labels.len() != height * width {
            bail!(Dimension, "{} labels for a {height}x{width} image", labels.len());
        }
        let plane = height * width;
        let mut data = vec![T::zero(); classes * plane];
        let mut region_sizes = vec![0usize; classes];
        for (p, &l) in labels.iter().enumerate() {
            if l >= classes {
                bail!(Data, "label {l} at pixel {p} is not below {classes}");
            }
            data[l * plane + p] = T::one();
            region_sizes[l] += 1;
        }
        Ok(Self {
            masks: Tensor::new(vec![classes, height, width], data)?,
            class_ids: (0..classes).collect(),
            region_sizes,
        })
    }

    pub fn masks(&self) -> &Tensor<T> {
        &self.masks
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn region_sizes(&self) -> &[usize] {
        &self.region_sizes
    }

    pub fn classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn height(&self) -> usize {
        self.masks.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.masks.shape()[2]
    }

    /// Mask `[H,W]` of the class at position `index`.
    pub fn mask(&self, index: usize) -> Tensor<T> {
        let plane = self.height() * self.width();
        Tensor::new_unchecked(
            vec![self.height(), self.width()],
            self.masks.data()[index * plane..(index + 1) * plane].to_vec(),
        )
    }

    /// Class position of each pixel.
    pub fn labels(&self) -> Vec<usize> {
        let plane = self.height() * self.width();
        let mut out = vec![0; plane];
        for c in 0..self.classes() {
            for (p, &v) in self.masks.data()[c * plane..(c + 1) * plane].iter().enumerate() {
                if v == T::one() {
                    out[p] = c;
                }
            }
        }
        out
    }
}

/// Stacks mask sets into a one-hot batch `[n,C,H,W]`.
pub fn stack_masks<T: Scalar>(sets: &[&ClassMaskSet<T>]) -> Result<Tensor<T>> {
    let first = sets.first().ok_or_else(|| Error::Data("empty mask batch".into()))?;
    let shape = first.masks.shape().to_vec();
    let mut data = Vec::with_capacity(sets.len() * first.masks.numel());
    for s in sets {
        if s.masks.shape() != shape.as_slice() {
            bail!(Dimension, "mask batch mixes {:?} and {:?}", shape, s.masks.shape());
        }
        data.extend_from_slice(s.masks.data());
    }
    let mut out_shape = vec![sets.len()];
    out_shape.extend(shape);
    Tensor::new(out_shape, data)
}

/// Number of ones in a binary mask.
pub fn region_size<T: Scalar>(mask: &Tensor<T>) -> usize {
    mask.data().iter().filter(|&&v| v == T::one()).count()
}

/// Nearest-neighbour resampling of a binary `[H,W]` mask by an integer
/// factor per axis. Downsampling keeps the top-left pixel of each block;
/// upsampling replicates.
pub fn resize_mask<T: Scalar>(mask: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    if mask.rank() != 2 {
        bail!(Dimension, "resize_mask expects [H,W], got {:?}", mask.shape());
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (th, tw) = target;
    let axis_map = |src: usize, dst: usize| -> Result<Box<dyn Fn(usize) -> usize>> {
        if dst == 0 {
            bail!(Dimension, "resize target extent 0");
        }
        if src >= dst && src.is_multiple_of(dst) {
            let f = src / dst;
            Ok(Box::new(move |i| i * f))
        } else if dst > src && dst.is_multiple_of(src) {
            let f = dst / src;
            Ok(Box::new(move |i| i / f))
        } else {
            bail!(Dimension, "cannot resize extent {src} to {dst} by an integer factor")
        }
    };
    let my = axis_map(h, th)?;
    let mx = axis_map(w, tw)?;
    let src = mask.data();
    let mut data = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = my(y);
        for x in 0..tw {
            data.push(src[sy * w + mx(x)]);
        }
    }
    Tensor::new(vec![th, tw], data)
}

/// `F ⊙ M` for features `[ch,h,w]` and a mask `[h,w]` broadcast over
/// channels.
pub fn class_mask_apply<'t, T: Scalar>(features: Var<'t, T>, mask: &Tensor<T>) -> Result<Var<'t, T>> {
    let fs = features.shape();
    if fs.len() != 3 || mask.shape() != &fs[1..] {
        bail!(
            Dimension,
            "mask {:?} does not match feature map {:?}",
            mask.shape(),
            fs
        );
    }
    let m = mask.reshape(&[1, fs[1], fs[2]])?;
    features.mul_const(m)
}

/// `(1/S_c) · cos(vec(fm), vec(fn))` for two already-masked channels of
/// equal extent. A zero-norm channel gives 0 with zero gradient.
pub fn affinity_entry<'t, T: Scalar>(fm: Var<'t, T>, fn_: Var<'t, T>, region: usize) -> Result<Var<'t, T>> {
    let (sm, sn) = (fm.shape(), fn_.shape());
    if sm != sn {
        bail!(Dimension, "affinity of channels with shapes {sm:?} and {sn:?}");
    }
    if region == 0 {
        return Err(Error::EmptyClass("S_c = 0".into()));
    }
    let len: usize = sm.iter().product();
    let um = fm.reshape(&[1, len])?.normalize_rows()?;
    let un = fn_.reshape(&[1, len])?.normalize_rows()?;
    Ok(um
        .matmul_t(un)?
        .reshape(&[])?
        .scale(T::one() / T::from_usize_lossy(region)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over classes of the mean squared entry difference.
    #[default]
    FrobeniusMse,
    /// Mean over classes of the squared mean entry difference.
    LiteralMeanThenSquare,
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::FrobeniusMse => "frobenius-mse",
            Reduction::LiteralMeanThenSquare => "literal-mean-then-square",
        })
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frobenius-mse" => Ok(Self::FrobeniusMse),
            "literal-mean-then-square" => Ok(Self::LiteralMeanThenSquare),
            _ => bail!(Config, "unknown reduction {s:?} (frobenius-mse | literal-mean-then-square)"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsaConfig {
    /// 1-based group indices `(l, k)` whose outputs are compared.
    pub layer_pair: (usize, usize),
    pub include_background: bool,
    pub reduction: Reduction,
    /// Replace every class mask by the all-ones mask.
    pub class_agnostic: bool,
}

impl Default for CsaConfig {
    fn default() -> Self {
        Self {
            layer_pair: (5, 6),
            include_background: true,
            reduction: Reduction::FrobeniusMse,
            class_agnostic: false,
        }
    }
}

impl CsaConfig {
    pub fn validate(&self, groups: usize) -> Result<()> {
        let (l, k) = self.layer_pair;
        if l == k {
            bail!(Config, "affinity layer pair must name two different groups, got ({l},{k})");
        }
        for g in [l, k] {
            if g == 0 || g > groups {
                bail!(Config, "affinity layer {g} outside 1..={groups}");
            }
        }
        Ok(())
    }
}

/// `M`x`N` affinity matrix of one class between two layers.
#[derive(Clone, Debug)]
pub struct AffinityMatrix<'t, T> {
    pub values: Var<'t, T>,
    /// `None` for the class-agnostic (all-ones mask) variant.
    pub class_id: Option<usize>,
    pub layer_pair: (usize, usize),
    /// `S_c` at the comparison resolution, one per contributing sample.
    pub region_sizes: Vec<usize>,
}

impl<T: Scalar> AffinityMatrix<'_, T> {
    pub fn shape(&self) -> Vec<usize> {
        self.values.shape()
    }
}

fn masked_at<'t, T: Scalar>(
    features: Var<'t, T>,
    mask: &Tensor<T>,
    class_agnostic: bool,
    common: (usize, usize),
) -> Result<Var<'t, T>> {
    let s = features.shape();
    let (h, w) = (s[1], s[2]);
    let masked = if class_agnostic {
        features
    } else {
        class_mask_apply(features, &resize_mask(mask, (h, w))?)?
    };
    if (h, w) == common {
        return Ok(masked);
    }
    if h % common.0 != 0 || w % common.1 != 0 || h / common.0 != w / common.1 {
        bail!(Dimension, "feature extent {h}x{w} does not pool down to {}x{}", common.0, common.1);
    }
    masked.avg_pool2d(h / common.0)
}

/// Affinity matrix of one class between `f_l` (`[M,h,w]`) and `f_k`
/// (`[N,h',w']`) using the full-resolution mask `mask_c` (`[H,W]`).
pub fn affinity_matrix<'t, T: Scalar>(
    f_l: Var<'t, T>,
    f_k: Var<'t, T>,
    mask_c: &Tensor<T>,
    class_id: Option<usize>,
    config: &CsaConfig,
) -> Result<AffinityMatrix<'t, T>> {
    let (sl, sk) = (f_l.shape(), f_k.shape());
    if sl.len() != 3 || sk.len() != 3 {
        bail!(Dimension, "affinity layers must be [ch,h,w], got {sl:?} and {sk:?}");
    }
    if mask_c.rank() != 2 {
        bail!(Dimension, "class mask must be [H,W], got {:?}", mask_c.shape());
    }
    let common = if sl[1] <= sk[1] && sl[2] <= sk[2] {
        (sl[1], sl[2])
    } else if sk[1] <= sl[1] && sk[2] <= sl[2] {
        (sk[1], sk[2])
    } else {
        bail!(Dimension, "layer extents {sl:?} and {sk:?} are not nested");
    };
    let region = if config.class_agnostic {
        common.0 * common.1
    } else {
        region_size(&resize_mask(mask_c, common)?)
    };
    if region == 0 {
        return Err(Error::EmptyClass(format!(
            "class {class_id:?} has no pixels at {}x{}",
            common.0, common.1
        )));
    }
    let plane = common.0 * common.1;
    let ml = masked_at(f_l, mask_c, config.class_agnostic, common)?.reshape(&[sl[0], plane])?;
    let mk = masked_at(f_k, mask_c, config.class_agnostic, common)?.reshape(&[sk[0], plane])?;
    let values = ml
        .normalize_rows()?
        .matmul_t(mk.normalize_rows()?)?
        .scale(T::one() / T::from_usize_lossy(region));
    Ok(AffinityMatrix {
        values,
        class_id,
        layer_pair: config.layer_pair,
        region_sizes: vec![region],
    })
}

/// Consistency between the per-class affinity matrices of two modalities,
/// averaged over classes.
pub fn csa_loss<'t, T: Scalar>(
    a1: &[AffinityMatrix<'t, T>],
    a2: &[AffinityMatrix<'t, T>],
    reduction: Reduction,
) -> Result<Var<'t, T>> {
    if a1.is_empty() || a1.len() != a2.len() {
        bail!(Dimension, "affinity lists of lengths {} and {}", a1.len(), a2.len());
    }
    let mut total: Option<Var<'t, T>> = None;
    for (x, y) in a1.iter().zip(a2) {
        if x.class_id != y.class_id {
            bail!(Dimension, "class {:?} paired with class {:?}", x.class_id, y.class_id);
        }
        let (sx, sy) = (x.shape(), y.shape());
        if sx != sy {
            bail!(Dimension, "affinity shapes {sx:?} and {sy:?} differ");
        }
        let diff = x.values.sub(y.values)?;
        let term = match reduction {
            Reduction::FrobeniusMse => diff.square().mean_all(),
            Reduction::LiteralMeanThenSquare => diff.mean_all().square(),
        };
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    let total = total.expect("non-empty");
    Ok(total.scale(T::one() / T::from_usize_lossy(a1.len())))
}

/// Per-class affinity matrices of a batch, each averaged over the samples in
/// which the class is present at the comparison resolution.
pub struct BatchAffinities<'t, T> {
    pub matrices: Vec<AffinityMatrix<'t, T>>,
    /// `(sample, class)` pairs left out because the class was empty.
    pub skipped: Vec<(usize, usize)>,
}

/// Computes the affinities of a batch of tapped features `[n,M,h,w]` and
/// `[n,N,h',w']` against the samples' ground-truth masks. Each sample
/// contributes only its own features and masks.
pub fn batch_affinities<'t, T: Scalar>(
    f_l: Var<'t, T>,
    f_k: Var<'t, T>,
    masks: &[&ClassMaskSet<T>],
    config: &CsaConfig,
) -> Result<BatchAffinities<'t, T>> {
    let n = f_l.shape()[0];
    if f_k.shape()[0] != n || masks.len() != n {
        bail!(
            Dimension,
            "batch sizes differ: {} / {} features, {} mask sets",
            n,
            f_k.shape()[0],
            masks.len()
        );
    }
    let classes = masks.first().map(|m| m.classes()).unwrap_or(0);
    let class_list: Vec<Option<usize>> = if config.class_agnostic {
        vec![None]
    } else {
        let start = usize::from(!config.include_background);
        (start..classes).map(Some).collect()
    };
    let mut matrices = Vec::new();
    let mut skipped = Vec::new();
    let per_sample: Vec<(Var<'t, T>, Var<'t, T>)> = (0..n)
        .map(|i| Ok((f_l.select(i)?, f_k.select(i)?)))
        .collect::<Result<_>>()?;
    for class in class_list {
        let mut acc: Option<Var<'t, T>> = None;
        let mut sizes = Vec::new();
        for (i, (fl, fk)) in per_sample.iter().enumerate() {
            let mask = match class {
                Some(c) => {
                    if masks[i].classes() != classes {
                        bail!(Dimension, "sample {i} has {} classes, expected {classes}", masks[i].classes());
                    }
                    if masks[i].region_sizes()[c] == 0 {
                        skipped.push((i, c));
                        continue;
                    }
                    masks[i].mask(c)
                }
                None => Tensor::ones(&[masks[i].height(), masks[i].width()])?,
            };
            match affinity_matrix(*fl, *fk, &mask, class.map(|c| masks[i].class_ids()[c]), config) {
                Ok(a) => {
                    sizes.extend(a.region_sizes);
                    acc = Some(match acc {
                        Some(s) => s.add(a.values)?,
                        None => a.values,
                    });
                }
                Err(Error::EmptyClass(_)) => skipped.push((i, class.unwrap_or(0))),
                Err(e) => return Err(e),
            }
        }
        if let Some(sum) = acc {
            let count = sizes.len();
            matrices.push(AffinityMatrix {
                values: sum.scale(T::one() / T::from_usize_lossy(count)),
                class_id: class.map(|c| masks[0].class_ids()[c]),
                layer_pair: config.layer_pair,
                region_sizes: sizes,
            });
        }
    }
    Ok(BatchAffinities { matrices, skipped })
}

/// [`csa_loss`] over the classes present in both modalities' batches;
/// `None` when no class is shared.
pub fn batch_csa_loss<'t, T: Scalar>(
    a1: &BatchAffinities<'t, T>,
    a2: &BatchAffinities<'t, T>,
    reduction: Reduction,
) -> Result<Option<Var<'t, T>>> {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for x in &a1.matrices {
        if let Some(y) = a2.matrices.iter().find(|y| y.class_id == x.class_id) {
            left.push(x.clone());
            right.push(y.clone());
        }
    }
    if left.is_empty() {
        return Ok(None);
    }
    csa_loss(&left, &right, reduction).map(Some)
}

/// Writes one tensor record per matrix (`affinity_m{modality}_c{class}.csat`)
/// and a text sidecar `affinity_m{modality}.txt` listing class ids, layer
/// pair and `S_c` values.
pub fn write_affinity_dump<T: Scalar>(dir: &Path, modality: usize, matrices: &[AffinityMatrix<'_, T>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut sidecar = String::new();
    sidecar.push_str(&format!("modality={modality}\n"));
    for a in matrices {
        let tag = a.class_id.map_or_else(|| "all".to_string(), |c| c.to_string());
        let file = format!("affinity_m{modality}_c{tag}.csat");
        fs::write(dir.join(&file), a.values.value().to_record_bytes())?;
        let sizes: Vec<String> = a.region_sizes.iter().map(|s| s.to_string()).collect();
        sidecar.push_str(&format!(
            "class={tag} layer_pair={},{} shape={} S_c={} file={file}\n",
            a.layer_pair.0,
            a.layer_pair.1,
            a.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"),
            sizes.join(","),
        ));
    }
    let mut f = fs::File::create(dir.join(format!("affinity_m{modality}.txt")))?;
    f.write_all(sidecar.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        let h = rows.len();
        let w = rows[0].len();
        Tensor::new(vec![h, w], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn resize_identity_and_constant() {
        let m = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(resize_mask(&m, (2, 2)).unwrap(), m);
        let ones = Tensor::<f64>::ones(&[8, 8]).unwrap();
        let small = resize_mask(&ones, (4, 4)).unwrap();
        assert_eq!(region_size(&ones), 64);
        assert_eq!(region_size(&small), 16);
        assert!(small.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn resize_checkerboard_top_left_rule() {
        let m = Tensor::<f64>::from_fn(&[4, 4], |i| ((i / 4 + i % 4) % 2) as f64).unwrap();
        let r = resize_mask(&m, (2, 2)).unwrap();
        // explicit index map: (y,x) <- (2y, 2x)
        let expect: Vec<f64> = [(0, 0), (0, 2), (2, 0), (2, 2)]
            .iter()
            .map(|&(y, x)| m.data()[y * 4 + x])
            .collect();
        assert_eq!(r.data(), expect.as_slice());
        let up = resize_mask(&r, (4, 4)).unwrap();
        assert_eq!(up.data()[5], r.data()[0]);
        assert!(resize_mask(&m, (3, 3)).is_err());
    }

    #[test]
    fn mask_apply_examples() {
        let tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = class_mask_apply(f, &t2(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(out.value().data(), &[1.0, 0.0, 0.0, 4.0]);
        let ones = class_mask_apply(f, &Tensor::ones(&[2, 2]).unwrap()).unwrap();
        assert_eq!(ones.value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let zeros = class_mask_apply(f, &Tensor::zeros(&[2, 2]).unwrap()).unwrap();
        assert!(zeros.value().data().iter().all(|&v| v == 0.0));
        assert!(class_mask_apply(f, &Tensor::ones(&[3, 2]).unwrap()).is_err());
    }

    #[test]
    fn affinity_entry_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[4, 4], |i| i as f64 + 1.0).unwrap());
        let e = affinity_entry(a, a, 16).unwrap().item().unwrap();
        assert!((e - 0.0625).abs() < 1e-15);

        let p = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let q = tape.constant(t2(&[&[0.0, 0.0], &[0.0, 3.0]]));
        assert_eq!(affinity_entry(p, q, 4).unwrap().item().unwrap(), 0.0);

        let fm = tape.constant(Tensor::vector(&[1.0, 0.0]).unwrap());
        let fn_ = tape.constant(Tensor::vector(&[1.0, 1.0]).unwrap());
        let v = affinity_entry(fm, fn_, 2).unwrap().item().unwrap();
        assert!((v - 0.5 / 2f64.sqrt()).abs() < 1e-15);
        assert!((v - 0.35355).abs() < 1e-5);

        assert!(matches!(affinity_entry(fm, fn_, 0), Err(Error::EmptyClass(_))));
        let zero = tape.constant(Tensor::zeros(&[2]).unwrap());
        assert_eq!(affinity_entry(zero, fn_, 2).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn zero_norm_channel_has_zero_gradient() {
        let tape = Tape::<f64>::new();
        let zero = tape.variable(Tensor::zeros(&[3]).unwrap());
        let other = tape.variable(Tensor::vector(&[1.0, 2.0, 3.0]).unwrap());
        let e = affinity_entry(zero, other, 3).unwrap();
        e.backward().unwrap();
        assert!(zero.grad().unwrap().data().iter().all(|&g| g == 0.0));
        assert!(other.grad().unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn self_affinity_diagonal() {
        let tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::from_fn(&[3, 4, 4], |i| ((i * 7) % 5) as f64 - 1.5).unwrap());
        let mask = Tensor::from_fn(&[8, 8], |i| f64::from(i % 8 < 4)).unwrap();
        let a = affinity_matrix(f, f, &mask, Some(1), &CsaConfig::default()).unwrap();
        let s = a.region_sizes[0] as f64;
        assert_eq!(s, 8.0);
        let v = a.values.value();
        for m in 0..3 {
            assert!((v.get(&[m, m]).unwrap() - 1.0 / s).abs() < 1e-15);
        }
    }

    #[test]
    fn class_agnostic_equals_all_ones_class() {
        let tape = Tape::<f64>::new();
        let fl = tape.constant(Tensor::from_fn(&[2, 4, 4], |i| (i as f64 * 0.3).sin()).unwrap());
        let fk = tape.constant(Tensor::from_fn(&[3, 2, 2], |i| (i as f64 * 0.7).cos()).unwrap());
        let ones = Tensor::ones(&[8, 8]).unwrap();
        let cfg = CsaConfig::default();
        let agn = CsaConfig {
            class_agnostic: true,
            ..cfg
        };
        let a = affinity_matrix(fl, fk, &ones, Some(2), &cfg).unwrap();
        let b = affinity_matrix(fl, fk, &Tensor::zeros(&[8, 8]).unwrap(), None, &agn).unwrap();
        assert_eq!(a.values.value(), b.values.value());
    }

    #[test]
    fn csa_loss_examples() {
        let tape = Tape::<f64>::new();
        let mk = |v: &[f64], class| AffinityMatrix {
            values: tape.constant(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()),
            class_id: Some(class),
            layer_pair: (5, 6),
            region_sizes: vec![1],
        };
        let a = [mk(&[0.3, 0.1], 0)];
        for r in [Reduction::FrobeniusMse, Reduction::LiteralMeanThenSquare] {
            assert_eq!(csa_loss(&a, &a, r).unwrap().item().unwrap(), 0.0);
            let d = csa_loss(&[mk(&[0.5], 0)], &[mk(&[0.25], 0)], r).unwrap().item().unwrap();
            assert_eq!(d, 0.0625);
        }
        assert!(csa_loss(&[mk(&[0.5], 0)], &[mk(&[0.25, 0.1], 0)], Reduction::FrobeniusMse).is_err());
        assert!(csa_loss(&[mk(&[0.5], 0)], &[mk(&[0.25], 1)], Reduction::FrobeniusMse).is_err());
    }

    #[test]
    fn config_validation_and_parsing() {
        assert!(CsaConfig::default().validate(9).is_ok());
        let bad = CsaConfig {
            layer_pair: (3, 3),
            ..Default::default()
        };
        assert!(bad.validate(9).is_err());
        let out = CsaConfig {
            layer_pair: (5, 10),
            ..Default::default()
        };
        assert!(out.validate(9).is_err());
        assert_eq!("frobenius-mse".parse::<Reduction>().unwrap(), Reduction::FrobeniusMse);
        assert_eq!(
            Reduction::LiteralMeanThenSquare.to_string().parse::<Reduction>().unwrap(),
            Reduction::LiteralMeanThenSquare
        );
        assert!("l2".parse::<Reduction>().is_err());
    }

    #[test]
    fn mask_set_validation() {
        let ok = ClassMaskSet::<f64>::from_labels(&[0, 1, 1, 2], 2, 2, 3).unwrap();
        assert_eq!(ok.region_sizes(), &[1, 2, 1]);
        assert_eq!(ok.labels(), vec![0, 1, 1, 2]);
        let overlap = Tensor::new(vec![2, 1, 2], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(ClassMaskSet::new(overlap, vec![0, 1]).is_err());
        let nonbin = Tensor::new(vec![2, 1, 1], vec![0.5, 0.5]).unwrap();
        assert!(ClassMaskSet::new(nonbin, vec![0, 1]).is_err());
        assert!(ClassMaskSet::<f64>::from_labels(&[0, 3], 1, 2, 3).is_err());
    }
}
