//! One PASS/FAIL line per acceptance criterion.
//!
//! Criteria 7 and 8 are empirical training outcomes: their lines are printed
//! with the measured values but do not fail the test. Every other criterion
//! is asserted. `CSA_ACCEPTANCE=1,4,9` restricts the run to a subset.

mod common;

use std::io::Write;
use std::time::Instant;

use common::{affinity_oracle, conv_oracle, csa_loss_oracle, deconv_oracle, hausdorff_oracle, rng, uniform};
use csa_core::config::DataSource;
use csa_core::csa::{affinity_entry, affinity_matrix, csa_loss, AffinityMatrix};
use csa_core::data::{generate, Batch, SyntheticSpec};
use csa_core::losses::{ce_loss, dice_loss};
use csa_core::metrics::{evaluate, surface_hausdorff};
use csa_core::model::BnSettings;
use csa_core::nn::BatchNormParams;
use csa_core::params::ParamStore;
use csa_core::train::{adam_step, holdout_pools, load_pools, lr_at, metrics_file, objective, train, AdamState};
use csa_core::{
    gradsuite, CsaConfig, DualStreamModel, ModalityId, Mode, Model64, Reduction, SeedTree, Setting, Tape64,
    Tensor, Tensor64, TrainConfig,
};
use rand::Rng;

// Tolerances.
const GRAD_BUDGET_SECS: f64 = 300.0;
const CONV_TOL: f64 = 1e-10;
const AFFINITY_TOL: f64 = 1e-12;
const ENTRY_TOL: f64 = 1e-12;
const ENTRY_PAIRS: usize = 1000;
/// Arbitrary (non power-of-two) positive scalings: rounding of the norm.
const SCALE_TOL: f64 = 1e-14;
const BN_MEAN_TOL: f64 = 1e-10;
const BN_VAR_TOL: f64 = 1e-5;
const TOTAL_TOL: f64 = 1e-12;
const CONVERGENCE_DICE: f64 = 0.95;
const CONVERGENCE_BUDGET_SECS: f64 = 1800.0;
const ORDER_SLACK: f64 = 0.01;
const ORDER_SEEDS: [u64; 5] = [7, 8, 9, 10, 11];

/// Writes past the test harness's output capture so the verdict lines show
/// up in a normal `cargo test` run.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor64 {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn small_cfg(setting: Setting) -> TrainConfig {
    let mut c = TrainConfig {
        setting,
        iterations: 4,
        batch_size: 2,
        data: DataSource::Synthetic { geometries: 6 },
        ..TrainConfig::default()
    };
    c.set("model.group_channels", "4,4,4,4,4,4,4,4,4").unwrap();
    c.set("model.deconv_channels", "4").unwrap();
    c
}

fn fresh(cfg: &TrainConfig) -> Model64 {
    DualStreamModel::new(cfg.model.clone(), cfg.setting.sharing(), cfg.bn, &SeedTree::new(cfg.seed)).unwrap()
}

fn batches(seed: u64, n: usize) -> [Batch<f64>; 2] {
    let mut r = SeedTree::new(seed).stream("data", 0);
    let (a, b) = generate::<f64>(&SyntheticSpec::default(), n, &mut r).unwrap();
    [
        Batch::from_samples(&a.iter().collect::<Vec<_>>()).unwrap(),
        Batch::from_samples(&b.iter().collect::<Vec<_>>()).unwrap(),
    ]
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let results = gradsuite::run_suite(7).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    verdict(
        failed.is_empty() && secs <= GRAD_BUDGET_SECS,
        format!("{} checks, worst rel error {worst:.2e}, failed {failed:?}, {secs:.1}s", results.len()),
    )
}

fn oracle_equivalence() -> Verdict {
    let mut r = rng(101);
    let tape = Tape64::new();
    let mut conv_err = 0.0f64;
    for (c, o, h, k, stride, pad) in [(3, 4, 8, 3, 1, 1), (2, 5, 9, 3, 2, 1), (4, 2, 6, 1, 1, 0), (1, 3, 7, 5, 1, 2)] {
        let xd = uniform(2 * c * h * h, &mut r);
        let kd = uniform(o * c * k * k, &mut r);
        let bd = uniform(o, &mut r);
        let y = tape
            .constant(t(&[2, c, h, h], xd.clone()))
            .conv2d(tape.constant(t(&[o, c, k, k], kd.clone())), Some(tape.constant(t(&[o], bd.clone()))), stride, pad)
            .unwrap()
            .value();
        let (want, _, _) = conv_oracle(&xd, (2, c, h, h), &kd, (o, k, k), Some(&bd), stride, pad);
        conv_err = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(conv_err, f64::max);
    }
    let mut deconv_err = 0.0f64;
    for (c, o, h, k, stride, pad) in [(3, 2, 4, 4, 2, 1), (2, 3, 4, 16, 8, 4), (1, 1, 5, 3, 1, 0)] {
        let xd = uniform(2 * c * h * h, &mut r);
        let kd = uniform(c * o * k * k, &mut r);
        let y = tape
            .constant(t(&[2, c, h, h], xd.clone()))
            .deconv2d(tape.constant(t(&[c, o, k, k], kd.clone())), None, stride, pad)
            .unwrap()
            .value();
        let (want, _, _) = deconv_oracle(&xd, (2, c, h, h), &kd, (o, k, k), stride, pad);
        deconv_err = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(deconv_err, f64::max);
    }
    let cfg = CsaConfig::default();
    let mut aff_err = 0.0f64;
    let mut loss_err = 0.0f64;
    for case in 0..50 {
        let (m, n) = (r.gen_range(1..=8), r.gen_range(1..=8));
        let (hl, hk) = [(8, 8), (8, 4), (4, 8)][case % 3];
        let fl = uniform(m * hl * hl, &mut r);
        let fk = uniform(n * hk * hk, &mut r);
        let mut mask: Vec<f64> = (0..64).map(|_| f64::from(u8::from(r.gen_bool(0.4)))).collect();
        mask[0] = 1.0;
        let got = affinity_matrix(
            tape.constant(t(&[m, hl, hl], fl.clone())),
            tape.constant(t(&[n, hk, hk], fk.clone())),
            &t(&[8, 8], mask.clone()),
            Some(1),
            &cfg,
        )
        .unwrap();
        let want = affinity_oracle(&fl, (m, hl, hl), &fk, (n, hk, hk), &mask, (8, 8)).unwrap();
        aff_err = got.values.value().data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(aff_err, f64::max);

        let classes = r.gen_range(1..=4);
        let raw1: Vec<Vec<f64>> = (0..classes).map(|_| uniform(m * n, &mut r)).collect();
        let raw2: Vec<Vec<f64>> = (0..classes).map(|_| uniform(m * n, &mut r)).collect();
        let wrap = |raw: &[Vec<f64>]| -> Vec<AffinityMatrix<'_, f64>> {
            raw.iter()
                .enumerate()
                .map(|(c, v)| AffinityMatrix {
                    values: tape.constant(t(&[m, n], v.clone())),
                    class_id: Some(c),
                    layer_pair: (5, 6),
                    region_sizes: vec![1],
                })
                .collect()
        };
        let got = csa_loss(&wrap(&raw1), &wrap(&raw2), Reduction::FrobeniusMse).unwrap().item().unwrap();
        loss_err = loss_err.max((got - csa_loss_oracle(&raw1, &raw2, true)).abs());
    }
    let mut hd_mismatch = 0;
    for _ in 0..300 {
        let (h, w) = (r.gen_range(1..=16), r.gen_range(1..=16));
        let a: Vec<bool> = (0..h * w).map(|_| r.gen_bool(0.3)).collect();
        let b: Vec<bool> = (0..h * w).map(|_| r.gen_bool(0.3)).collect();
        let ta = t(&[h, w], a.iter().map(|&v| f64::from(u8::from(v))).collect());
        let tb = t(&[h, w], b.iter().map(|&v| f64::from(u8::from(v))).collect());
        if surface_hausdorff(&ta, &tb).unwrap() != hausdorff_oracle(&a, &b, h, w) {
            hd_mismatch += 1;
        }
    }
    verdict(
        conv_err <= CONV_TOL && deconv_err <= CONV_TOL && aff_err <= AFFINITY_TOL && loss_err <= AFFINITY_TOL && hd_mismatch == 0,
        format!(
            "conv {conv_err:.1e}, deconv {deconv_err:.1e}, affinity {aff_err:.1e}, csa_loss {loss_err:.1e}, hausdorff mismatches {hd_mismatch}/300"
        ),
    )
}

fn affinity_entry_exactness() -> Verdict {
    let mut r = rng(202);
    let tape = Tape64::new();
    let (mut max_err, mut bound_violations, mut pow2_breaks, mut max_scale_dev) = (0.0f64, 0, 0, 0.0f64);
    let entry = |a: &[f64], b: &[f64], side: usize, s_c: usize| {
        affinity_entry(tape.constant(t(&[side, side], a.to_vec())), tape.constant(t(&[side, side], b.to_vec())), s_c)
            .unwrap()
            .item()
            .unwrap()
    };
    for _ in 0..ENTRY_PAIRS {
        let side = [4, 8][r.gen_range(0..2)];
        let mask: Vec<bool> = (0..side * side).map(|_| r.gen_bool(0.5)).collect();
        let s_c = mask.iter().filter(|&&m| m).count().max(1);
        let a: Vec<f64> = mask.iter().map(|&m| if m { r.gen_range(-3.0..3.0) } else { 0.0 }).collect();
        let b: Vec<f64> = mask.iter().map(|&m| if m { r.gen_range(-3.0..3.0) } else { 0.0 }).collect();
        let got = entry(&a, &b, side, s_c);
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for i in 0..a.len() {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        let cos = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na.sqrt() * nb.sqrt()) };
        max_err = max_err.max((got - cos / s_c as f64).abs());
        if got.abs() > 1.0 / s_c as f64 {
            bound_violations += 1;
        }
        let alpha = 2f64.powi(r.gen_range(-8..8));
        let sa: Vec<f64> = a.iter().map(|v| v * alpha).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * alpha).collect();
        if entry(&sa, &b, side, s_c).to_bits() != got.to_bits() || entry(&a, &sb, side, s_c).to_bits() != got.to_bits() {
            pow2_breaks += 1;
        }
        let beta = r.gen_range(0.01..100.0);
        let sb: Vec<f64> = b.iter().map(|v| v * beta).collect();
        max_scale_dev = max_scale_dev.max((entry(&a, &sb, side, s_c) - got).abs());
    }
    verdict(
        max_err <= ENTRY_TOL && bound_violations == 0 && pow2_breaks == 0 && max_scale_dev <= SCALE_TOL,
        format!(
            "{ENTRY_PAIRS} pairs: max err {max_err:.1e}, bound violations {bound_violations}, \
             power-of-two scalings inexact {pow2_breaks}, arbitrary-scale deviation {max_scale_dev:.1e}"
        ),
    )
}

fn single_stream_step(model: &mut Model64, adam: &mut AdamState<f64>, batch: &Batch<f64>, m: ModalityId) {
    let tape = Tape64::new();
    let bound = model.bind(&tape);
    let mut unused = SeedTree::new(0).stream("dropout", 0);
    let out = model
        .forward(&bound, tape.constant(batch.images.clone()), m, Mode::Train, 0.0, &mut unused)
        .unwrap();
    let loss = dice_loss(out.probs, &batch.targets, true)
        .unwrap()
        .add(ce_loss(out.probs, &batch.targets).unwrap())
        .unwrap();
    tape.backward(loss).unwrap();
    model.params_mut().accumulate_grads(&bound).unwrap();
    drop(bound);
    adam_step(model.params_mut(), adam, 1e-3).unwrap();
    model.params_mut().zero_grad();
}

fn bits(model: &Model64, names: &[String]) -> Vec<Vec<u64>> {
    names
        .iter()
        .map(|n| model.params().tensor(model.params().find(n).unwrap()).data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

fn batchnorm_semantics() -> Verdict {
    let mut r = rng(303);
    let mut store = ParamStore::<f64>::new();
    let p = BatchNormParams::init(&mut store, "bn", 3, 1e-5, BnSettings::default().momentum).unwrap();
    let tape = Tape64::new();
    let bound = store.bind(&tape);
    let x = t(&[4, 3, 5, 5], uniform(300, &mut r).iter().map(|v| 5.0 * v + 2.0).collect());
    let y = p.forward(tape.constant(x), &mut store, &bound, Mode::Train).unwrap().value();
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| y.data()[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        worst_mean = worst_mean.max(mean.abs());
        worst_var = worst_var.max((var - 1.0).abs());
    }

    let cfg = small_cfg(Setting::Msbn);
    let mut model = fresh(&cfg);
    let mut adam = AdamState::new(model.params());
    let bn1 = model.bn_param_names(ModalityId::SECOND);
    let before = bits(&model, &bn1);
    let kernel = model.conv_kernels(ModalityId::FIRST, 1, 0).clone();
    let bs = batches(4, 2);
    single_stream_step(&mut model, &mut adam, &bs[0], ModalityId::FIRST);
    let isolated = bits(&model, &bn1) == before && model.conv_kernels(ModalityId::SECOND, 1, 0) != &kernel;

    let mut pick = SeedTree::new(5).stream("interleave", 0);
    for _ in 0..100 {
        let m = pick.gen_range(0..2usize);
        single_stream_step(&mut model, &mut adam, &bs[m], ModalityId::new(m).unwrap());
    }
    let mut shared = true;
    for g in 1..=cfg.model.groups() {
        for l in 0..cfg.model.convs_per_group {
            let (a, b) = (model.conv_kernels(ModalityId::FIRST, g, l), model.conv_kernels(ModalityId::SECOND, g, l));
            shared &= a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        }
    }
    verdict(
        worst_mean < BN_MEAN_TOL && worst_var <= BN_VAR_TOL && isolated && shared,
        format!(
            "|mean| {worst_mean:.1e}, |var-1| {worst_var:.1e}, modality isolation {isolated}, kernels shared after 100 interleaved steps {shared}"
        ),
    )
}

fn loss_identities() -> Verdict {
    let bs = batches(6, 2);
    let mut zero_csa = true;
    for setting in [Setting::Joint, Setting::Msbn, Setting::Csa] {
        let cfg = TrainConfig {
            dropout: 0.0,
            ..small_cfg(setting)
        };
        let mut model = fresh(&cfg);
        let tape = Tape64::new();
        let bound = model.bind(&tape);
        let mut d = [SeedTree::new(1).stream("dropout", 0), SeedTree::new(1).stream("dropout", 0)];
        let [d0, d1] = &mut d;
        let l = objective(&mut model, &bound, &tape, [&bs[0], &bs[0]], &cfg, Mode::Train, [d0, d1]).unwrap();
        zero_csa &= l.csa.unwrap().item().unwrap() == 0.0;
    }
    let mut cfg = small_cfg(Setting::Csa);
    cfg.weights.lambda_csa = 0.0;
    let mut model = fresh(&cfg);
    let tape = Tape64::new();
    let bound = model.bind(&tape);
    let mut d = [SeedTree::new(1).stream("dropout", 0), SeedTree::new(1).stream("dropout", 1)];
    let [d0, d1] = &mut d;
    let l = objective(&mut model, &bound, &tape, [&bs[0], &bs[1]], &cfg, Mode::Train, [d0, d1]).unwrap();
    let seg: f64 = l.seg.iter().map(|s| s.dice.item().unwrap() + s.ce.item().unwrap()).sum();
    let gap = (l.total.item().unwrap() - seg).abs();

    let echo = TrainConfig::default().to_text();
    let w = TrainConfig::from_text(&echo).unwrap().weights;
    let defaults = (w.alpha, w.beta_ce, w.lambda_csa) == (1.0, 1.0, 0.5)
        && ["alpha=1.0", "beta_ce=1.0", "lambda_csa=0.5"].iter().all(|k| echo.lines().any(|l| l == *k));
    verdict(
        zero_csa && gap <= TOTAL_TOL && defaults,
        format!("csa on identical streams == 0: {zero_csa}; |total - seg| at lambda 0: {gap:.1e}; default weights echoed: {defaults}"),
    )
}

fn schedule() -> Verdict {
    let (a, b) = (lr_at(0), lr_at(1000));
    verdict(a == 1e-4 && b == 9.5e-5, format!("lr_at(0) = {a:?}, lr_at(1000) = {b:?}"))
}

fn convergence() -> Verdict {
    let cfg = TrainConfig::default();
    let pools = load_pools::<f64>(&cfg).unwrap();
    let start = Instant::now();
    let out = train(&cfg, [&pools[0], &pools[1]], None, |_| {}).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let d = [out.reports[0].foreground_dice(), out.reports[1].foreground_dice()];
    verdict(
        d.iter().all(|&x| x >= CONVERGENCE_DICE) && secs <= CONVERGENCE_BUDGET_SECS,
        format!(
            "{} {} iterations: training fg Dice m0 {:.4}, m1 {:.4} (need {CONVERGENCE_DICE}), {secs:.0}s",
            cfg.setting, cfg.iterations, d[0], d[1]
        ),
    )
}

fn direction_of_effect() -> Verdict {
    let settings = [Setting::Joint, Setting::Msbn, Setting::Csa];
    let mut means = [0.0f64; 3];
    for &seed in &ORDER_SEEDS {
        let base = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let pools = load_pools::<f64>(&base).unwrap();
        let held = holdout_pools::<f64>(seed, 40).unwrap();
        for (i, &setting) in settings.iter().enumerate() {
            let cfg = TrainConfig { setting, ..base.clone() };
            let mut out = train(&cfg, [&pools[0], &pools[1]], None, |_| {}).unwrap();
            let mut d = 0.0;
            for m in 0..2 {
                d += evaluate(&mut out.model, &held[m], ModalityId::new(m).unwrap()).unwrap().foreground_dice();
            }
            emit(&format!("    seed {seed} {setting}: held-out fg Dice {:.4}", d / 2.0));
            means[i] += d / 2.0 / ORDER_SEEDS.len() as f64;
        }
    }
    let [joint, msbn, csa] = means;
    verdict(
        csa >= msbn - ORDER_SLACK && msbn >= joint - ORDER_SLACK,
        format!("{} seeds, held-out fg Dice: Joint {joint:.4}, MSBN {msbn:.4}, CSA {csa:.4}", ORDER_SEEDS.len()),
    )
}

fn determinism_and_persistence() -> Verdict {
    let mut cfg = small_cfg(Setting::Csa);
    cfg.checkpoint_every = 2;
    let pools = load_pools::<f64>(&cfg).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        train(&cfg, [&pools[0], &pools[1]], Some(d.path()), |_| {}).unwrap();
    }
    let read = |i: usize, f: &str| std::fs::read(dirs[i].path().join(f)).unwrap();
    let files = ["log.csv", "checkpoint.ckpt", "checkpoint_000002.ckpt", "final_metrics_m0.csv", "final_metrics_m1.csv"];
    let identical = files.iter().all(|f| read(0, f) == read(1, f));
    let bytes = read(0, "checkpoint.ckpt");
    let mut model = Model64::from_checkpoint_bytes(&bytes).unwrap();
    let round_trip = model.to_checkpoint_bytes() == bytes;
    let mut reproduces = true;
    for (m, pool) in pools.iter().enumerate() {
        let report = evaluate(&mut model, pool, ModalityId::new(m).unwrap()).unwrap();
        reproduces &= report.to_csv().into_bytes() == read(0, &metrics_file(m));
    }
    verdict(
        identical && round_trip && reproduces,
        format!("bitwise identical runs {identical}, save/load/save identical {round_trip}, eval reproduces metrics {reproduces}"),
    )
}

#[test]
fn acceptance_criteria() {
    let selected: Option<Vec<usize>> = std::env::var("CSA_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(usize, &str, bool, fn() -> Verdict); 9] = [
        (1, "gradient suite", true, gradient_suite),
        (2, "oracle equivalence", true, oracle_equivalence),
        (3, "affinity entry exactness", true, affinity_entry_exactness),
        (4, "batch-norm semantics", true, batchnorm_semantics),
        (5, "loss identities", true, loss_identities),
        (6, "learning-rate schedule", true, schedule),
        (7, "convergence", false, convergence),
        (8, "direction of effect", false, direction_of_effect),
        (9, "determinism and persistence", true, determinism_and_persistence),
    ];
    let mut failures = Vec::new();
    for (id, name, gating, run) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let v = run();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        let note = if gating { "" } else { " [empirical, not asserted]" };
        emit(&format!("criterion {id} {name}: {tag} ({}){note}", v.detail));
        if gating && !v.pass {
            failures.push(id);
        }
    }
    assert!(failures.is_empty(), "failed criteria {failures:?}");
}
