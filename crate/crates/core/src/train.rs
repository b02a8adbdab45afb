//! Adam, the step schedule and the joint training loop.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autograd::{Tape, Var};
use crate::config::{DataSource, TrainConfig};
use crate::csa::{batch_affinities, batch_csa_loss};
use crate::data::{self, Batch, Sample, SyntheticSpec, SYNTHETIC_CLASSES};
use crate::error::{bail, Error, Result};
use crate::losses::{ce_loss, dice_loss, total_loss, SegLoss};
use crate::metrics::{evaluate, SegReport};
use crate::model::DualStreamModel;
use crate::nn::{ModalityId, Mode};
use crate::params::{Bound, ParamStore};
use crate::rng::{DetRng, SeedTree};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per parameter, indexed like the store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, p)| vec![T::zero(); p.tensor.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            hyper: AdamHyper::default(),
        }
    }
}

/// One bias-corrected Adam update of a flat parameter at step `t >= 1`.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        bail!(
            Dimension,
            "adam: {} params, {} grads, {}/{} moments",
            param.len(),
            grad.len(),
            m.len(),
            v.len()
        );
    }
    if t == 0 {
        bail!(Contract, "adam step index starts at 1");
    }
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let c1 = T::one() - T::lit(hyper.beta1.powi(t.min(i32::MAX as u64) as i32));
    let c2 = T::one() - T::lit(hyper.beta2.powi(t.min(i32::MAX as u64) as i32));
    let (lr, eps) = (T::lit(lr), T::lit(hyper.epsilon));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// Steps every trainable parameter using its accumulated gradient (zero if
/// none) and increments the step count.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        bail!(Config, "learning rate {lr} must be positive");
    }
    if state.m.len() != store.len() {
        bail!(Dimension, "adam state tracks {} parameters, store has {}", state.m.len(), store.len());
    }
    state.step += 1;
    let t = state.step;
    for (id, p) in store.iter_mut() {
        if !p.trainable {
            continue;
        }
        let i = id.index();
        let grad = p
            .tensor
            .grad()
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); p.tensor.numel()]);
        adam_update(p.tensor.data_mut(), &grad, &mut state.m[i], &mut state.v[i], t, lr, &state.hyper)?;
    }
    Ok(())
}

/// `lr0 * (1 - decay)^floor(iteration / every)`.
pub fn lr_schedule(lr0: f64, decay: f64, every: usize, iteration: usize) -> f64 {
    lr0 * (1.0 - decay).powi((iteration / every) as i32)
}

/// The default schedule: 1e-4 decayed by 5% every 1000 iterations.
pub fn lr_at(iteration: usize) -> f64 {
    lr_schedule(1e-4, 0.05, 1000, iteration)
}

/// Loss terms of one joint step.
pub struct StepLosses<'t, T> {
    pub seg: [SegLoss<'t, T>; 2],
    /// Present whenever both streams ran and share a class.
    pub csa: Option<Var<'t, T>>,
    pub total: Var<'t, T>,
}

/// Forward pass of both streams and the weighted objective. The affinity
/// term is always computed; it enters the objective only for the
/// affinity-based settings.
pub fn objective<'t, T: Scalar>(
    model: &mut DualStreamModel<T>,
    bound: &Bound<'t, T>,
    tape: &'t Tape<T>,
    batches: [&Batch<T>; 2],
    cfg: &TrainConfig,
    mode: Mode,
    rngs: [&mut DetRng; 2],
) -> Result<StepLosses<'t, T>> {
    let inputs = [
        tape.constant(batches[0].images.clone()),
        tape.constant(batches[1].images.clone()),
    ];
    objective_on(model, bound, tape, inputs, batches, cfg, mode, rngs)
}

/// [`objective`] with the network inputs supplied as tape values.
#[allow(clippy::too_many_arguments)]
pub fn objective_on<'t, T: Scalar>(
    model: &mut DualStreamModel<T>,
    bound: &Bound<'t, T>,
    tape: &'t Tape<T>,
    inputs: [Var<'t, T>; 2],
    batches: [&Batch<T>; 2],
    cfg: &TrainConfig,
    mode: Mode,
    rngs: [&mut DetRng; 2],
) -> Result<StepLosses<'t, T>> {
    let csa_cfg = cfg.effective_csa();
    let (l, k) = csa_cfg.layer_pair;
    let zero = || SegLoss {
        dice: tape.constant(Tensor::scalar(T::zero())),
        ce: tape.constant(Tensor::scalar(T::zero())),
    };
    let mut seg = [zero(), zero()];
    let mut taps = Vec::new();
    for (m, rng) in rngs.into_iter().enumerate() {
        let modality = ModalityId::new(m)?;
        if cfg.solo_stream.is_some_and(|s| s != modality) {
            continue;
        }
        let out = model.forward(bound, inputs[m], modality, mode, cfg.dropout, rng)?;
        seg[m] = SegLoss {
            dice: dice_loss(out.probs, &batches[m].targets, cfg.dice_include_background)?,
            ce: ce_loss(out.probs, &batches[m].targets)?,
        };
        taps.push((out.tapped_features[&l], out.tapped_features[&k], m));
    }
    let csa = if taps.len() == 2 {
        let mut aff = Vec::with_capacity(2);
        for &(fl, fk, m) in &taps {
            let masks: Vec<_> = batches[m].masks.iter().collect();
            aff.push(batch_affinities(fl, fk, &masks, &csa_cfg)?);
        }
        batch_csa_loss(&aff[0], &aff[1], csa_cfg.reduction)?
    } else {
        None
    };
    let in_graph = if cfg.setting.uses_affinity() { csa } else { None };
    let total = total_loss(seg[0], seg[1], in_graph, &cfg.weights)?;
    Ok(StepLosses { seg, csa, total })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub dice1: f64,
    pub ce1: f64,
    pub dice2: f64,
    pub ce2: f64,
    pub csa: Option<f64>,
    pub total: f64,
}

pub const LOG_HEADER: &str = "iter,lr,dice1,ce1,dice2,ce2,csa,total";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let csa = self.csa.map_or("none".to_string(), |c| format!("{c:?}"));
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{csa},{:?}",
            self.iter, self.lr, self.dice1, self.ce1, self.dice2, self.ce2, self.total
        )
    }
}

pub struct TrainOutcome<T> {
    pub model: DualStreamModel<T>,
    pub log: Vec<LogRow>,
    /// Eval-mode reports of each stream on its own training pool.
    pub reports: [SegReport; 2],
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "log.csv";
pub const CONFIG_ECHO_FILE: &str = "config.txt";

pub fn metrics_file(m: usize) -> String {
    format!("final_metrics_m{m}.csv")
}

/// Training pools named by the config.
pub fn load_pools<T: Scalar>(cfg: &TrainConfig) -> Result<[Vec<Sample<T>>; 2]> {
    match &cfg.data {
        DataSource::Synthetic { geometries } => {
            let mut rng = SeedTree::new(cfg.seed).stream("data", 0);
            let (a, b) = data::generate(&SyntheticSpec::default(), *geometries, &mut rng)?;
            Ok([a, b])
        }
        DataSource::Dir(dir) => data::read_dataset(dir, cfg.model.classes),
    }
}

/// Synthetic pools from a data substream disjoint from the training one.
pub fn holdout_pools<T: Scalar>(seed: u64, geometries: usize) -> Result<[Vec<Sample<T>>; 2]> {
    let mut rng = SeedTree::new(seed).stream("data", 1);
    let (a, b) = data::generate(&SyntheticSpec::default(), geometries, &mut rng)?;
    Ok([a, b])
}

/// Runs the configured number of joint steps. With `out_dir`, writes the
/// config echo, the per-iteration CSV log, checkpoints and final metrics.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    pools: [&[Sample<T>]; 2],
    out_dir: Option<&Path>,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if cfg.model.classes != SYNTHETIC_CLASSES && matches!(cfg.data, DataSource::Synthetic { .. }) {
        bail!(Config, "synthetic data has {SYNTHETIC_CLASSES} classes, model has {}", cfg.model.classes);
    }
    let seeds = SeedTree::new(cfg.seed);
    let mut model = DualStreamModel::<T>::new(cfg.model.clone(), cfg.setting.sharing(), cfg.bn, &seeds)?;
    let mut adam = AdamState::new(model.params());
    let mut samplers = [seeds.stream("sampler", 0), seeds.stream("sampler", 1)];
    let mut dropouts = [seeds.stream("dropout", 0), seeds.stream("dropout", 1)];

    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(CONFIG_ECHO_FILE), cfg.to_text())?;
            let mut f = fs::File::create(dir.join(LOG_FILE))?;
            writeln!(f, "{LOG_HEADER}")?;
            Some(f)
        }
        None => None,
    };

    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let lr = lr_schedule(cfg.lr, cfg.lr_decay, cfg.lr_decay_every, iter);
        let [s0, s1] = &mut samplers;
        let (b0, b1) = data::sample_batch(pools[0], pools[1], cfg.batch_size, s0, s1)?;
        let batches = [Batch::from_samples(&b0)?, Batch::from_samples(&b1)?];

        let tape = Tape::new();
        let bound = model.bind(&tape);
        let [d0, d1] = &mut dropouts;
        let losses = objective(&mut model, &bound, &tape, [&batches[0], &batches[1]], cfg, Mode::Train, [d0, d1])
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("iteration {iter}: {msg}")),
                other => other,
            })?;
        let item = |v: Var<'_, T>| -> Result<f64> { Ok(v.item()?.to_f64_lossy()) };
        let row = LogRow {
            iter,
            lr,
            dice1: item(losses.seg[0].dice)?,
            ce1: item(losses.seg[0].ce)?,
            dice2: item(losses.seg[1].dice)?,
            ce2: item(losses.seg[1].ce)?,
            csa: losses.csa.map(item).transpose()?,
            total: item(losses.total)?,
        };
        if !row.total.is_finite() {
            bail!(Numeric, "iteration {iter}: total loss is {}", row.total);
        }
        tape.backward(losses.total)?;
        model.params_mut().accumulate_grads(&bound)?;
        drop(bound);
        adam_step(model.params_mut(), &mut adam, lr)?;
        model.params_mut().zero_grad();

        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", row.to_csv())?;
        }
        on_row(&row);
        log.push(row);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 && iter + 1 < cfg.iterations {
                fs::write(dir.join(format!("checkpoint_{:06}.ckpt", iter + 1)), model.to_checkpoint_bytes())?;
            }
        }
    }

    let reports = [
        evaluate(&mut model, pools[0], ModalityId::FIRST)?,
        evaluate(&mut model, pools[1], ModalityId::SECOND)?,
    ];
    if let Some(dir) = out_dir {
        fs::write(dir.join(CHECKPOINT_FILE), model.to_checkpoint_bytes())?;
        for (m, r) in reports.iter().enumerate() {
            fs::write(dir.join(metrics_file(m)), r.to_csv())?;
        }
    }
    Ok(TrainOutcome { model, log, reports })
}
