//! Synthetic two-modality cardiac-like slices, PGM ingestion, per-slice
//! z-scoring and unpaired batch sampling.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::csa::{stack_masks, ClassMaskSet};
use crate::error::{bail, Error, Result};
use crate::nn::ModalityId;
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BACKGROUND: usize = 0;
pub const LEFT_VENTRICLE: usize = 1;
pub const MYOCARDIUM: usize = 2;
pub const RIGHT_VENTRICLE: usize = 3;
pub const SYNTHETIC_CLASSES: usize = 4;

const ZSCORE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    /// `[1,H,W]`.
    pub image: Tensor<T>,
    pub masks: ClassMaskSet<T>,
    pub modality: ModalityId,
    pub id: String,
}

/// Mean intensity per class plus additive Gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityProfile {
    pub class_means: [f64; SYNTHETIC_CLASSES],
    pub contrast: f64,
    pub noise_std: f64,
}

impl IntensityProfile {
    fn intensity(&self, class: usize) -> f64 {
        0.5 + self.contrast * (self.class_means[class] - 0.5)
    }
}

/// Inclusive range sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut DetRng) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub lv_radius: Range,
    pub ring_thickness: Range,
    pub rv_radius_x: Range,
    pub rv_radius_y: Range,
    /// Horizontal gap between the ring and the right ventricle.
    pub rv_gap: Range,
    /// Free border kept around the whole anatomy.
    pub margin: f64,
    pub profiles: [IntensityProfile; 2],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            lv_radius: Range::new(3.0, 5.0),
            ring_thickness: Range::new(1.5, 2.5),
            rv_radius_x: Range::new(2.5, 4.0),
            rv_radius_y: Range::new(4.0, 6.5),
            rv_gap: Range::new(1.0, 2.0),
            margin: 1.0,
            profiles: [
                IntensityProfile {
                    class_means: [0.15, 0.95, 0.35, 0.75],
                    contrast: 1.0,
                    noise_std: 0.05,
                },
                IntensityProfile {
                    class_means: [0.85, 0.05, 0.65, 0.25],
                    contrast: 1.0,
                    noise_std: 0.10,
                },
            ],
        }
    }
}

/// Axis-aligned ellipse in pixel-centre coordinates (x = column, y = row).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// LV disk, the myocardial ring around it, and a separate RV blob.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub lv: Ellipse,
    /// Outer boundary of the myocardium.
    pub epi: Ellipse,
    pub rv: Ellipse,
}

impl Geometry {
    /// Class at pixel centre `(row, col)`.
    pub fn label_at(&self, row: usize, col: usize) -> usize {
        let (x, y) = (col as f64, row as f64);
        if self.lv.contains(x, y) {
            LEFT_VENTRICLE
        } else if self.epi.contains(x, y) {
            MYOCARDIUM
        } else if self.rv.contains(x, y) {
            RIGHT_VENTRICLE
        } else {
            BACKGROUND
        }
    }

    pub fn rasterize(&self, height: usize, width: usize) -> Vec<usize> {
        (0..height * width)
            .map(|p| self.label_at(p / width, p % width))
            .collect()
    }
}

impl SyntheticSpec {
    fn max_span(&self) -> (f64, f64) {
        let lv_outer = self.lv_radius.max + self.ring_thickness.max;
        let w = 2.0 * lv_outer + self.rv_gap.max + 2.0 * self.rv_radius_x.max + 2.0 * self.margin;
        let h = (2.0 * lv_outer).max(2.0 * self.rv_radius_y.max) + 2.0 * self.margin;
        (w, h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            bail!(Config, "synthetic image {}x{} too small", self.height, self.width);
        }
        for (name, r) in [
            ("lv_radius", self.lv_radius),
            ("ring_thickness", self.ring_thickness),
            ("rv_radius_x", self.rv_radius_x),
            ("rv_radius_y", self.rv_radius_y),
            ("rv_gap", self.rv_gap),
        ] {
            if !(r.min > 0.0 && r.max >= r.min && r.max.is_finite()) {
                bail!(Config, "{name} range [{}, {}] invalid", r.min, r.max);
            }
        }
        let (w, h) = self.max_span();
        if w > (self.width - 1) as f64 || h > (self.height - 1) as f64 {
            bail!(
                Config,
                "anatomy needs {w:.1}x{h:.1} pixels but the image is {}x{}",
                self.width,
                self.height
            );
        }
        for p in &self.profiles {
            if !(p.noise_std >= 0.0 && p.contrast > 0.0) {
                bail!(Config, "intensity profile {p:?} invalid");
            }
        }
        Ok(())
    }

    pub fn sample_geometry(&self, rng: &mut DetRng) -> Geometry {
        let r = self.lv_radius.sample(rng);
        let t = self.ring_thickness.sample(rng);
        let rvx = self.rv_radius_x.sample(rng);
        let rvy = self.rv_radius_y.sample(rng);
        let gap = self.rv_gap.sample(rng);
        let outer = r + t;
        // RV to the left of the ring, so the anatomy spans
        // [cx - outer - gap - 2 rvx, cx + outer] horizontally.
        let lo_x = self.margin + outer + gap + 2.0 * rvx;
        let hi_x = (self.width - 1) as f64 - self.margin - outer;
        let half_h = outer.max(rvy);
        let lo_y = self.margin + half_h;
        let hi_y = (self.height - 1) as f64 - self.margin - half_h;
        let cx = Range::new(lo_x, hi_x.max(lo_x)).sample(rng);
        let cy = Range::new(lo_y, hi_y.max(lo_y)).sample(rng);
        Geometry {
            lv: Ellipse { cx, cy, rx: r, ry: r },
            epi: Ellipse {
                cx,
                cy,
                rx: outer,
                ry: outer,
            },
            rv: Ellipse {
                cx: cx - outer - gap - rvx,
                cy,
                rx: rvx,
                ry: rvy,
            },
        }
    }
}

/// `(x - mean) / (std + 1e-8)` with the population standard deviation.
pub fn zscore<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let n = image.numel();
    if n < 2 {
        bail!(Data, "z-scoring needs at least 2 pixels, got {n}");
    }
    let nf = T::from_usize_lossy(n);
    let mean = image.data().iter().copied().sum::<T>() / nf;
    let var = image.data().iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
    let denom = var.sqrt() + T::lit(ZSCORE_EPS);
    Ok(image.map(|x| (x - mean) / denom))
}

fn render<T: Scalar>(labels: &[usize], spec: &SyntheticSpec, m: usize, rng: &mut DetRng) -> Result<Tensor<T>> {
    let p = &spec.profiles[m];
    let raw: Vec<T> = labels
        .iter()
        .map(|&l| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(p.intensity(l) + p.noise_std * z)
        })
        .collect();
    zscore(&Tensor::new(vec![1, spec.height, spec.width], raw)?)
}

/// Renders `n` geometries in both modalities, then shuffles each list on its
/// own so that list positions carry no pairing.
pub fn generate<T: Scalar>(
    spec: &SyntheticSpec,
    n: usize,
    rng: &mut DetRng,
) -> Result<(Vec<Sample<T>>, Vec<Sample<T>>)> {
    spec.validate()?;
    if n == 0 {
        bail!(Config, "need at least one geometry");
    }
    let mut lists: [Vec<Sample<T>>; 2] = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for g in 0..n {
        let geometry = spec.sample_geometry(rng);
        let labels = geometry.rasterize(spec.height, spec.width);
        let masks = ClassMaskSet::from_labels(&labels, spec.height, spec.width, SYNTHETIC_CLASSES)?;
        for (m, list) in lists.iter_mut().enumerate() {
            list.push(Sample {
                image: render(&labels, spec, m, rng)?,
                masks: masks.clone(),
                modality: ModalityId::new(m)?,
                id: format!("g{g:04}_m{m}"),
            });
        }
    }
    let [mut a, mut b] = lists;
    a.shuffle(rng);
    b.shuffle(rng);
    Ok((a, b))
}

/// Stacked network inputs for one modality.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[n,1,H,W]`.
    pub images: Tensor<T>,
    /// One-hot `[n,C,H,W]`.
    pub targets: Tensor<T>,
    pub masks: Vec<ClassMaskSet<T>>,
    pub ids: Vec<String>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_samples(samples: &[&Sample<T>]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let shape = first.image.shape().to_vec();
        let mut data = Vec::with_capacity(samples.len() * first.image.numel());
        for s in samples {
            if s.image.shape() != shape.as_slice() {
                bail!(Dimension, "sample {} is {:?}, batch is {:?}", s.id, s.image.shape(), shape);
            }
            data.extend_from_slice(s.image.data());
        }
        let mut img_shape = vec![samples.len()];
        img_shape.extend(shape);
        let masks: Vec<ClassMaskSet<T>> = samples.iter().map(|s| s.masks.clone()).collect();
        let targets = stack_masks(&masks.iter().collect::<Vec<_>>())?;
        Ok(Self {
            images: Tensor::new(img_shape, data)?,
            targets,
            masks,
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Draws `batch_size` indices uniformly with replacement from a pool.
pub fn sample_indices(pool_len: usize, batch_size: usize, rng: &mut DetRng) -> Result<Vec<usize>> {
    if pool_len == 0 {
        bail!(Data, "cannot sample from an empty pool");
    }
    Ok((0..batch_size).map(|_| rng.gen_range(0..pool_len)).collect())
}

/// Independent draws from each pool, one random stream per modality.
pub fn sample_batch<'a, T: Scalar>(
    pool1: &'a [Sample<T>],
    pool2: &'a [Sample<T>],
    batch_size: usize,
    rng1: &mut DetRng,
    rng2: &mut DetRng,
) -> Result<(Vec<&'a Sample<T>>, Vec<&'a Sample<T>>)> {
    if pool1.is_empty() || pool2.is_empty() {
        bail!(Data, "cannot sample from an empty pool");
    }
    let a = sample_indices(pool1.len(), batch_size, rng1)?;
    let b = sample_indices(pool2.len(), batch_size, rng2)?;
    Ok((a.iter().map(|&i| &pool1[i]).collect(), b.iter().map(|&i| &pool2[i]).collect()))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        bail!(Dimension, "{} pixels for a {width}x{height} PGM", pixels.len());
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Reads a binary (P5) PGM with maxval 255. Returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = |what: &str| Error::Data(format!("{}: {what}", path.display()));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1;
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() != w * h || w == 0 || h == 0 {
        return Err(bad(&format!("expected {} pixel bytes, found {}", w * h, data.len())));
    }
    Ok((w, h, data.to_vec()))
}

/// Linear min-max quantization to 8 bits.
pub fn quantize<T: Scalar>(image: &Tensor<T>) -> Vec<u8> {
    let lo = image.data().iter().copied().fold(T::infinity(), T::min);
    let hi = image.data().iter().copied().fold(T::neg_infinity(), T::max);
    let span = hi - lo;
    image
        .data()
        .iter()
        .map(|&x| {
            if span > T::zero() {
                ((x - lo) / span * T::lit(255.0)).round().to_f64_lossy() as u8
            } else {
                0
            }
        })
        .collect()
}

fn mask_path(image: &Path) -> Option<PathBuf> {
    let stem = image.file_stem()?.to_str()?;
    Some(image.with_file_name(format!("{stem}_mask.pgm")))
}

fn load_pair<T: Scalar>(image_path: &Path, classes: usize, modality: ModalityId) -> Result<Sample<T>> {
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Data(format!("{}: bad file name", image_path.display())))?
        .to_string();
    let mpath = mask_path(image_path).expect("stem checked above");
    if !mpath.exists() {
        bail!(Data, "image {stem} has no mask file {}", mpath.display());
    }
    let (w, h, pixels) = read_pgm(image_path)?;
    let (mw, mh, labels) = read_pgm(&mpath)?;
    if (w, h) != (mw, mh) {
        bail!(Data, "{}: mask is {mw}x{mh}, image is {w}x{h}", mpath.display());
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        bail!(Data, "{}: class index {l} is not below {classes}", mpath.display());
    }
    let raw = Tensor::new(vec![1, h, w], pixels.iter().map(|&p| T::lit(f64::from(p))).collect())?;
    Ok(Sample {
        image: zscore(&raw)?,
        masks: ClassMaskSet::from_labels(&labels, h, w, classes)?,
        modality,
        id: stem,
    })
}

/// Loads every `<stem>.pgm` with its `<stem>_mask.pgm` from `dir`, sorted by
/// stem.
pub fn ingest_image_dir<T: Scalar>(dir: &Path, classes: usize, modality: ModalityId) -> Result<Vec<Sample<T>>> {
    let mut images: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    images.retain(|p| {
        p.extension().is_some_and(|e| e == "pgm")
            && !p
                .file_stem()
                .and_then(|s| s.to_str())
                .is_some_and(|s| s.ends_with("_mask"))
    });
    images.sort();
    images.iter().map(|p| load_pair(p, classes, modality)).collect()
}

pub const MANIFEST: &str = "manifest.txt";

/// Writes `m0/` and `m1/` PGM pairs plus a manifest listing
/// `<modality> <id>` in list order.
pub fn write_dataset<T: Scalar>(dir: &Path, pools: [&[Sample<T>]; 2]) -> Result<()> {
    let mut manifest = String::new();
    for (m, pool) in pools.iter().enumerate() {
        let sub = dir.join(format!("m{m}"));
        fs::create_dir_all(&sub)?;
        for s in pool.iter() {
            let (h, w) = (s.masks.height(), s.masks.width());
            write_pgm(&sub.join(format!("{}.pgm", s.id)), w, h, &quantize(&s.image))?;
            let labels: Vec<u8> = s.masks.labels().iter().map(|&l| s.masks.class_ids()[l] as u8).collect();
            write_pgm(&sub.join(format!("{}_mask.pgm", s.id)), w, h, &labels)?;
            manifest.push_str(&format!("{m} {}\n", s.id));
        }
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads a directory written by [`write_dataset`], keeping manifest order.
pub fn read_dataset<T: Scalar>(dir: &Path, classes: usize) -> Result<[Vec<Sample<T>>; 2]> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut out = [Vec::new(), Vec::new()];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (m, id) = line
            .split_once(' ')
            .ok_or_else(|| Error::Data(format!("manifest line {}: {line:?}", i + 1)))?;
        let m: usize = m
            .parse()
            .map_err(|_| Error::Data(format!("manifest line {}: bad modality {m:?}", i + 1)))?;
        let modality = ModalityId::new(m)?;
        let path = dir.join(format!("m{m}")).join(format!("{id}.pgm"));
        out[m].push(load_pair(&path, classes, modality)?);
    }
    Ok(out)
}
