use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use csa_core::autograd::Tape;
use csa_core::config::TrainConfig;
use csa_core::csa::{affinity_matrix, write_affinity_dump};
use csa_core::data::{self, Batch, SyntheticSpec};
use csa_core::error::Error;
use csa_core::gradsuite;
use csa_core::metrics::evaluate;
use csa_core::model::DualStreamModel;
use csa_core::nn::{ModalityId, Mode};
use csa_core::rng::SeedTree;
use csa_core::train::{self, load_pools, LogRow};

#[derive(Parser)]
#[command(name = "csa", version, about = "Two-modality segmentation with class-specific affinity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set setting=MSBN
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train both streams and write log, checkpoint and final metrics
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Print every n-th log line (0 = silent)
        #[arg(long, default_value_t = 100)]
        print_every: usize,
    },
    /// Evaluate a checkpoint on the configured training pool of one modality
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        modality: usize,
        /// Write the per-sample CSV report here
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write eval-mode affinity matrices of the first samples of each pool
    AffinityDump {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        samples: usize,
    },
    /// Run the finite-difference gradient suite
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Write a synthetic dataset as PGM pairs plus a manifest
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        geometries: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

/// Marks errors caused by bad user input.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_text(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    for pair in &args.overrides {
        cfg.set_pair(pair).map_err(|e| Usage(format!("--set {pair}: {e}")))?;
    }
    cfg.validate().map_err(|e| match e {
        Error::Config(msg) => anyhow::Error::new(Usage(msg)),
        other => other.into(),
    })?;
    Ok(cfg)
}

fn modality(index: usize) -> Result<ModalityId> {
    ModalityId::new(index).map_err(|e| Usage(e.to_string()).into())
}

fn load_checkpoint(path: &Path) -> Result<DualStreamModel<f64>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    DualStreamModel::from_checkpoint_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out, print_every } => {
            let cfg = load_config(&cfg)?;
            println!("# configuration");
            print!("{}", cfg.to_text());
            let pools = load_pools::<f64>(&cfg)?;
            let outcome = train::train(&cfg, [&pools[0], &pools[1]], Some(&out), |row: &LogRow| {
                if print_every > 0 && (row.iter.is_multiple_of(print_every) || row.iter + 1 == cfg.iterations) {
                    println!("{}", row.to_csv());
                }
            })?;
            for (m, r) in outcome.reports.iter().enumerate() {
                println!("# modality {m} training-set report");
                print!("{}", r.to_table());
            }
            println!("# wrote {}", out.display());
        }
        Command::Eval {
            cfg,
            checkpoint,
            modality: m,
            csv,
        } => {
            let cfg = load_config(&cfg)?;
            let m = modality(m)?;
            let mut model = load_checkpoint(&checkpoint)?;
            let pools = load_pools::<f64>(&cfg)?;
            let report = evaluate(&mut model, &pools[m.index()], m)?;
            print!("{}", report.to_table());
            if let Some(path) = csv {
                fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::AffinityDump {
            cfg,
            checkpoint,
            out,
            samples,
        } => {
            let cfg = load_config(&cfg)?;
            if samples == 0 {
                bail!(Usage("--samples must be positive".into()));
            }
            let mut model = load_checkpoint(&checkpoint)?;
            let pools = load_pools::<f64>(&cfg)?;
            let csa_cfg = cfg.effective_csa();
            let (l, k) = csa_cfg.layer_pair;
            for m in 0..2 {
                let modality = ModalityId::new(m)?;
                let chosen: Vec<_> = pools[m].iter().take(samples).collect();
                let batch = Batch::from_samples(&chosen)?;
                let tape = Tape::new();
                let bound = model.bind(&tape);
                let mut unused = SeedTree::new(cfg.seed).stream("dropout", m as u64);
                let x = tape.constant(batch.images.clone());
                let fwd = model.forward(&bound, x, modality, Mode::Eval, 0.0, &mut unused)?;
                let (fl, fk) = (fwd.tapped_features[&l], fwd.tapped_features[&k]);
                for (i, masks) in batch.masks.iter().enumerate() {
                    let mut matrices = Vec::new();
                    let class_list: Vec<Option<usize>> = if csa_cfg.class_agnostic {
                        vec![None]
                    } else {
                        (usize::from(!csa_cfg.include_background)..masks.classes()).map(Some).collect()
                    };
                    for c in class_list {
                        let mask = match c {
                            Some(c) => masks.mask(c),
                            None => csa_core::tensor::Tensor::ones(&[masks.height(), masks.width()])?,
                        };
                        match affinity_matrix(fl.select(i)?, fk.select(i)?, &mask, c, &csa_cfg) {
                            Ok(a) => matrices.push(a),
                            Err(Error::EmptyClass(msg)) => eprintln!("skipping {}: {msg}", batch.ids[i]),
                            Err(e) => return Err(e.into()),
                        }
                    }
                    let dir = out.join(&batch.ids[i]);
                    write_affinity_dump(&dir, m, &matrices)?;
                    println!("{}: {} matrices -> {}", batch.ids[i], matrices.len(), dir.display());
                }
            }
        }
        Command::Gradcheck { seed } => {
            let results = gradsuite::run_suite(seed)?;
            let mut ok = true;
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<28}{:>14.3e}  {verdict}", r.name, r.max_rel_error);
                ok &= r.passed();
            }
            if !ok {
                bail!("gradient check exceeded tolerance {:e}", gradsuite::TOLERANCE);
            }
        }
        Command::GenData { out, geometries, seed } => {
            let mut rng = SeedTree::new(seed).stream("data", 0);
            let (a, b) = data::generate::<f64>(&SyntheticSpec::default(), geometries, &mut rng)
                .map_err(|e| Usage(e.to_string()))?;
            data::write_dataset(&out, [&a, &b])?;
            println!("wrote {} samples per modality to {}", a.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
