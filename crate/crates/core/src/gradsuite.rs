//! The finite-difference suite run by `csa gradcheck`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Tape, Var};
use crate::config::TrainConfig;
use crate::csa::{batch_affinities, batch_csa_loss, ClassMaskSet, CsaConfig};
use crate::data::Batch;
use crate::error::Result;
use crate::gradcheck::{finite_difference_check, finite_difference_check_at};
use crate::losses::{ce_loss, dice_loss};
use crate::model::{BnSettings, DualStreamModel, ModelSpec, Setting};
use crate::nn::Mode;
use crate::rng::{DetRng, SeedTree};
use crate::tensor::Tensor;
use crate::train::{objective, objective_on};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn randn(shape: &[usize], rng: &mut DetRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng)).expect("non-empty shape")
}

fn random_labels(n: usize, h: usize, w: usize, classes: usize, rng: &mut DetRng) -> Vec<ClassMaskSet<f64>> {
    (0..n)
        .map(|_| {
            // Every class present, remaining pixels random.
            let mut labels: Vec<usize> = (0..h * w).map(|_| rng.gen_range(0..classes)).collect();
            for (c, l) in labels.iter_mut().take(classes).enumerate() {
                *l = c;
            }
            ClassMaskSet::from_labels(&labels, h, w, classes).expect("valid labels")
        })
        .collect()
}

fn onehot(sets: &[ClassMaskSet<f64>]) -> Tensor<f64> {
    crate::csa::stack_masks(&sets.iter().collect::<Vec<_>>()).expect("consistent masks")
}

/// Weighted sum against a fixed random tensor, so every output entry
/// carries a distinct cotangent.
fn probe<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, r: &Tensor<f64>) -> Result<Var<'t, f64>> {
    Ok(y.mul(tape.constant(r.clone()))?.sum_all())
}

fn entry(name: &str, err: Result<f64>) -> Result<CheckResult> {
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: err?,
    })
}

/// Runs every check with step 1e-5 and returns the per-check maximum
/// relative error.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let seeds = SeedTree::new(seed);
    let mut rng = seeds.stream("gradcheck", 0);
    let mut out = Vec::new();

    // Convolution, with respect to input and kernels.
    let x = randn(&[2, 2, 5, 5], &mut rng);
    let w = randn(&[3, 2, 3, 3], &mut rng);
    let b = randn(&[3], &mut rng);
    let r = randn(&[2, 3, 3, 3], &mut rng);
    out.push(entry(
        "conv2d/input",
        finite_difference_check(
            |t, v| {
                let y = v.conv2d(t.constant(w.clone()), Some(t.constant(b.clone())), 2, 1)?;
                probe(t, y, &r)
            },
            &x,
            STEP,
        ),
    )?);
    out.push(entry(
        "conv2d/kernels",
        finite_difference_check(
            |t, v| {
                let y = t.constant(x.clone()).conv2d(v, Some(t.constant(b.clone())), 2, 1)?;
                probe(t, y, &r)
            },
            &w,
            STEP,
        ),
    )?);

    // Transposed convolution.
    let x = randn(&[2, 3, 3, 3], &mut rng);
    let w = randn(&[3, 2, 4, 4], &mut rng);
    let r = randn(&[2, 2, 6, 6], &mut rng);
    out.push(entry(
        "deconv2d/input",
        finite_difference_check(
            |t, v| probe(t, v.deconv2d(t.constant(w.clone()), None, 2, 1)?, &r),
            &x,
            STEP,
        ),
    )?);
    out.push(entry(
        "deconv2d/kernels",
        finite_difference_check(
            |t, v| probe(t, t.constant(x.clone()).deconv2d(v, None, 2, 1)?, &r),
            &w,
            STEP,
        ),
    )?);

    // Batch norm in train mode.
    let x = randn(&[3, 2, 3, 3], &mut rng);
    let g = randn(&[2], &mut rng);
    let be = randn(&[2], &mut rng);
    let r = randn(&[3, 2, 3, 3], &mut rng);
    out.push(entry(
        "batchnorm/input",
        finite_difference_check(
            |t, v| {
                let (y, _) = v.batch_norm_train(t.constant(g.clone()), t.constant(be.clone()), 1e-5)?;
                probe(t, y, &r)
            },
            &x,
            STEP,
        ),
    )?);
    out.push(entry(
        "batchnorm/gamma",
        finite_difference_check(
            |t, v| {
                let (y, _) = t.constant(x.clone()).batch_norm_train(v, t.constant(be.clone()), 1e-5)?;
                probe(t, y, &r)
            },
            &g,
            STEP,
        ),
    )?);

    // ReLU followed by channel softmax.
    let x = randn(&[2, 4, 3, 3], &mut rng);
    let r = randn(&[2, 4, 3, 3], &mut rng);
    out.push(entry(
        "relu+softmax",
        finite_difference_check(|t, v| probe(t, v.scale(2.0).relu().softmax(1)?, &r), &x, STEP),
    )?);

    // Segmentation losses on softmax outputs.
    let logits = randn(&[2, 4, 4, 4], &mut rng);
    let target = onehot(&random_labels(2, 4, 4, 4, &mut rng));
    out.push(entry(
        "dice_loss",
        finite_difference_check(|_, v| dice_loss(v.softmax(1)?, &target, true), &logits, STEP),
    )?);
    out.push(entry(
        "ce_loss",
        finite_difference_check(|_, v| ce_loss(v.softmax(1)?, &target), &logits, STEP),
    )?);

    // Affinity loss through class masks and mask resizing: layer l at 8x8,
    // layer k at 4x4, masks given at 8x8.
    let fl = randn(&[2, 3, 8, 8], &mut rng);
    let fk1 = randn(&[2, 4, 4, 4], &mut rng);
    let fl2 = randn(&[2, 3, 8, 8], &mut rng);
    let fk2 = randn(&[2, 4, 4, 4], &mut rng);
    let masks1 = random_labels(2, 8, 8, 3, &mut rng);
    let masks2 = random_labels(2, 8, 8, 3, &mut rng);
    let cfg = CsaConfig::default();
    out.push(entry(
        "csa_loss",
        finite_difference_check(
            |t, v| {
                let m1: Vec<_> = masks1.iter().collect();
                let m2: Vec<_> = masks2.iter().collect();
                let a1 = batch_affinities(v, t.constant(fk1.clone()), &m1, &cfg)?;
                let a2 = batch_affinities(t.constant(fl2.clone()), t.constant(fk2.clone()), &m2, &cfg)?;
                Ok(batch_csa_loss(&a1, &a2, cfg.reduction)?.expect("shared classes"))
            },
            &fl,
            STEP,
        ),
    )?);
    out.push(entry(
        "csa_loss/coarse-layer",
        finite_difference_check(
            |t, v| {
                let m1: Vec<_> = masks1.iter().collect();
                let m2: Vec<_> = masks2.iter().collect();
                let a1 = batch_affinities(t.constant(fl.clone()), v, &m1, &cfg)?;
                let a2 = batch_affinities(t.constant(fl2.clone()), t.constant(fk2.clone()), &m2, &cfg)?;
                Ok(batch_csa_loss(&a1, &a2, cfg.reduction)?.expect("shared classes"))
            },
            &fk1,
            STEP,
        ),
    )?);

    out.extend(end_to_end(seed, &mut rng)?);
    Ok(out)
}

/// The full weighted objective of the CSA setting on `[2,1,16,16]`
/// inputs, dropout disabled, batch norm in train mode.
fn end_to_end(seed: u64, rng: &mut DetRng) -> Result<Vec<CheckResult>> {
    let cfg = TrainConfig {
        setting: Setting::Csa,
        dropout: 0.0,
        ..TrainConfig::default()
    };
    let model = DualStreamModel::<f64>::new(
        ModelSpec::default(),
        cfg.setting.sharing(),
        BnSettings::default(),
        &SeedTree::new(seed),
    )?;
    let make_batch = |rng: &mut DetRng| -> Result<Batch<f64>> {
        let masks = random_labels(2, 16, 16, 4, rng);
        Ok(Batch {
            images: randn(&[2, 1, 16, 16], rng),
            targets: onehot(&masks),
            masks,
            ids: vec!["a".into(), "b".into()],
        })
    };
    let b1 = make_batch(rng)?;
    let b2 = make_batch(rng)?;
    let mut results = Vec::new();
    let input_err = finite_difference_check(
        |t, v| {
            let mut m = model.clone();
            let bound = m.bind(t);
            let x2 = t.constant(b2.images.clone());
            let mut r0 = SeedTree::new(0).stream("dropout", 0);
            let mut r1 = SeedTree::new(0).stream("dropout", 1);
            let l = objective_on(&mut m, &bound, t, [v, x2], [&b1, &b2], &cfg, Mode::Train, [&mut r0, &mut r1])?;
            Ok(l.total)
        },
        &b1.images,
        STEP,
    );
    results.push(entry("objective/input", input_err)?);

    // A shared kernel of the first CSA layer, on a coordinate subset.
    let id = model
        .params()
        .find(&format!("g{}.c1.weight", cfg.csa.layer_pair.0))
        .expect("shared kernel exists");
    let w0 = model.params().tensor(id).clone();
    let coords: Vec<usize> = (0..64).map(|_| rng.gen_range(0..w0.numel())).collect();
    let kernel_err = finite_difference_check_at(
        |t, v| {
            let mut m = model.clone();
            let mut bound = m.bind(t);
            bound.replace(id, v);
            let mut r0 = SeedTree::new(0).stream("dropout", 0);
            let mut r1 = SeedTree::new(0).stream("dropout", 1);
            let l = objective(&mut m, &bound, t, [&b1, &b2], &cfg, Mode::Train, [&mut r0, &mut r1])?;
            Ok(l.total)
        },
        &w0,
        STEP,
        &coords,
    );
    results.push(entry("objective/shared-kernel", kernel_err)?);
    Ok(results)
}
