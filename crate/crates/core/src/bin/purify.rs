//! Command-line driver for the purification laboratory: data generation,
//! target and purifier training, single attacks, per-seed evaluation, report
//! comparison, and the full pipeline.

use clap::{Parser, Subcommand};
use purify_core::baselines::DefenseTransform;
use purify_core::config::{
    validate_config, write_normalized_echo, AttackKind, ExperimentConfig,
};
use purify_core::data::{load_csv, DatasetManifest};
use purify_core::eval::{comparison_csv, comparison_grid, EvaluationReport};
use purify_core::nn::persist::{load_network, save_network};
use purify_core::pipeline::{
    evaluate_cell, run_pipeline, run_seed, seed_data_from_manifest, stage_gen_data,
    train_shared_attacks, CellContext,
};
use purify_core::purifier::{load_bundle, save_bundle, train_purifier, PurifierHyper, PurifierMode};
use purify_core::target::{accuracy, train_target, ModelOracle, Oracle};
use purify_core::{PurifyError, Result};
use std::fs;
use std::path::{Path, PathBuf};

/// Laboratory for the prediction-purification defense: train a classifier,
/// defend its confidence scores, attack it, and compare the reports.
#[derive(Parser)]
#[command(name = "purify", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and split allocation for one seed.
    GenData {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Experiment seed; defaults to the config's first seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for dataset.csv, refset.csv, and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the target classifier for one seed and save the model.
    TrainTarget {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Experiment seed; defaults to the config's first seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Reuse a saved dataset manifest instead of regenerating.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a purifier against a saved target model.
    TrainPurifier {
        /// Saved target model the purifier defends.
        #[arg(long)]
        target: PathBuf,
        /// CSV of reference samples the purifier trains on.
        #[arg(long)]
        refset: PathBuf,
        /// Loss mode: base, inv, mem, or both.
        #[arg(long)]
        mode: PurifierMode,
        /// Label-loss weight; defaults to the mode's standard value.
        #[arg(long)]
        lambda: Option<f64>,
        /// Inversion-adversary weight; defaults to the mode's standard value.
        #[arg(long)]
        alpha: Option<f64>,
        /// Membership-adversary weight; defaults to the mode's standard value.
        #[arg(long)]
        beta: Option<f64>,
        /// Training epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Directory the model bundle is written to.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one attack against a defended oracle and write its report.
    Attack {
        /// Attack to mount: mlleaks, mlleaks-a, nsh, label, or inversion.
        #[arg(long)]
        kind: AttackKind,
        /// Saved target model queried through the defense.
        #[arg(long)]
        oracle: PathBuf,
        /// Deployed defense: none, one_hot, random_noise:<magnitude>, or
        /// purifier:<bundle-dir>.
        #[arg(long, default_value = "none")]
        defense: String,
        /// Dataset manifest from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Optional experiment config supplying attack schedules.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Report file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every configured defense and attack for one seed.
    Evaluate {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Experiment seed; defaults to the config's first seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory the seed's artifacts and reports are written to.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare saved evaluation reports side by side.
    Report {
        /// Report files to compare.
        #[arg(long, num_args = 1.., value_name = "REPORT", required = true)]
        compare: Vec<PathBuf>,
        /// Also export the comparison as CSV for plotting.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the full pipeline: all seeds, defenses, attacks, and reports.
    Run {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(err) = dispatch(Cli::parse()) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, seed, out } => gen_data(&config, seed, &out),
        Command::TrainTarget { config, seed, data, out } => {
            cmd_train_target(&config, seed, data.as_deref(), &out)
        }
        Command::TrainPurifier { target, refset, mode, lambda, alpha, beta, epochs, seed, out } => {
            cmd_train_purifier(&target, &refset, mode, lambda, alpha, beta, epochs, seed, &out)
        }
        Command::Attack { kind, oracle, defense, data, config, seed, out } => {
            cmd_attack(kind, &oracle, &defense, &data, config.as_deref(), seed, &out)
        }
        Command::Evaluate { config, seed, out } => cmd_evaluate(&config, seed, &out),
        Command::Report { compare, csv } => cmd_report(&compare, csv.as_deref()),
        Command::Run { config, seed, out } => cmd_run(&config, seed, out),
    }
}

fn load_validated(path: &Path) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn pick_seed(cfg: &ExperimentConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(cfg.seeds[0])
}

fn gen_data(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = load_validated(config)?;
    let seed = pick_seed(&cfg, seed);
    let data = stage_gen_data(&cfg, seed, out)?;
    println!(
        "wrote {} samples ({} classes, {} features) and splits for seed {seed} to {}",
        data.dataset.len(),
        data.dataset.num_classes(),
        data.dataset.feature_dim(),
        out.display()
    );
    Ok(())
}

fn load_seed_data(
    cfg: &ExperimentConfig,
    seed: u64,
    manifest: Option<&Path>,
) -> Result<purify_core::pipeline::SeedData> {
    match manifest {
        Some(path) => seed_data_from_manifest(&DatasetManifest::load(path)?),
        None => purify_core::pipeline::seed_data(cfg, seed),
    }
}

fn cmd_train_target(
    config: &Path,
    seed: Option<u64>,
    manifest: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = load_validated(config)?;
    let seed = pick_seed(&cfg, seed);
    let data = load_seed_data(&cfg, seed, manifest)?;

    let mut target_cfg = cfg.target.clone();
    target_cfg.seed = seed;
    let d1 = data.dataset.select(&data.splits.d1);
    let d3 = data.dataset.select(&data.splits.d3);
    let net = train_target(&d1, &target_cfg)?;
    save_network(&net, out)?;

    let oracle = ModelOracle::new(&net);
    println!(
        "target saved to {} — train accuracy {:.4}, test accuracy {:.4}",
        out.display(),
        accuracy(&oracle.predict(d1.features()), d1.labels()),
        accuracy(&oracle.predict(d3.features()), d3.labels()),
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_purifier(
    target: &Path,
    refset: &Path,
    mode: PurifierMode,
    lambda: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    epochs: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let net = load_network(target)?;
    let reference = load_csv(refset)?;

    let mut hyper = PurifierHyper::for_mode(mode);
    if let Some(v) = lambda {
        hyper.lambda = v;
    }
    if let Some(v) = alpha {
        hyper.alpha = v;
    }
    if let Some(v) = beta {
        hyper.beta = v;
    }
    if let Some(v) = epochs {
        hyper.epochs = v;
    }
    hyper.validate()?;

    let oracle = ModelOracle::new(&net);
    let bundle = train_purifier(&oracle, &reference, &hyper, seed)?;
    save_bundle(&bundle, out)?;
    let last_g = bundle.trace.g.last().copied().unwrap_or(f64::NAN);
    println!(
        "purifier ({mode}, lambda={}, alpha={}, beta={}) saved to {} — final loss {last_g:.6}",
        hyper.lambda,
        hyper.alpha,
        hyper.beta,
        out.display()
    );
    Ok(())
}

/// Parses the `--defense` flag: `none`, `one_hot`, `random_noise:<magnitude>`,
/// or `purifier:<bundle-dir>`. Returns the report row name and the transform.
fn parse_defense(spec: &str, seed: u64) -> Result<(String, DefenseTransform)> {
    if spec == "none" {
        return Ok(("none".into(), DefenseTransform::None));
    }
    if spec == "one_hot" {
        return Ok(("one_hot".into(), DefenseTransform::OneHot));
    }
    if let Some(raw) = spec.strip_prefix("random_noise:") {
        let magnitude: f64 = raw.parse().map_err(|_| {
            PurifyError::Config(format!("random_noise magnitude {raw:?} is not a number"))
        })?;
        return Ok((
            format!("random_noise_{magnitude}"),
            DefenseTransform::RandomNoise { magnitude, seed },
        ));
    }
    if let Some(dir) = spec.strip_prefix("purifier:") {
        let bundle = load_bundle(Path::new(dir))?;
        let name = format!("purifier_{}", bundle.hyper.mode.as_str());
        return Ok((name, DefenseTransform::Purifier(Box::new(bundle))));
    }
    Err(PurifyError::Config(format!(
        "unknown defense {spec:?}; expected none, one_hot, random_noise:<magnitude>, \
         or purifier:<bundle-dir>"
    )))
}

fn cmd_attack(
    kind: AttackKind,
    oracle: &Path,
    defense: &str,
    data: &Path,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let target = load_network(oracle)?;
    let manifest = DatasetManifest::load(data)?;
    let seed_data = seed_data_from_manifest(&manifest)?;
    let (defense_name, transform) = parse_defense(defense, seed)?;

    let mut cfg = match config {
        Some(path) => load_validated(path)?,
        None => ExperimentConfig {
            dataset: purify_core::config::DatasetSource::Synthetic { spec: manifest.spec.clone() },
            allocation: manifest.allocation.clone(),
            seeds: vec![seed],
            ..serde_json::from_str(r#"{ "seeds": [1] }"#).expect("minimal config parses")
        },
    };
    cfg.attacks = vec![kind];

    let raw_oracle = ModelOracle::new(&target);
    let view = purify_core::attacks::AttackDataView::new(&seed_data.dataset, &seed_data.splits)?;
    let refset = seed_data.dataset.select(&seed_data.splits.d2);
    let shared = train_shared_attacks(&cfg, seed, &raw_oracle, &view, &refset, None)?;

    let ctx = CellContext {
        cfg: &cfg,
        data: &seed_data,
        target: &target,
        seed,
        target_train_secs: 0.0,
    };
    let (report, timing) = evaluate_cell(&ctx, &defense_name, &transform, &shared, None, None)?;
    report.save(out)?;
    let sidecar = out.with_extension("timing.json");
    fs::write(&sidecar, serde_json::to_string_pretty(&timing).expect("timing serializes"))
        .map_err(|e| PurifyError::Io { path: sidecar.display().to_string(), source: e })?;

    match kind {
        AttackKind::Inversion => println!(
            "inversion vs {defense_name}: reconstruction error {:.6} (report: {})",
            report.inversion_error_overall.unwrap_or(f64::NAN),
            out.display()
        ),
        _ => println!(
            "{kind} vs {defense_name}: membership accuracy {:.4} (report: {})",
            report.inference_accuracy.get(kind.as_str()).copied().unwrap_or(f64::NAN),
            out.display()
        ),
    }
    Ok(())
}

fn cmd_evaluate(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = load_validated(config)?;
    let seed = pick_seed(&cfg, seed);
    let outcomes = run_seed(&cfg, seed, out)?;
    let reports: Vec<EvaluationReport> = outcomes.iter().map(|c| c.report.clone()).collect();
    print!("{}", comparison_grid(&reports)?);
    println!("reports written under {}", out.display());
    Ok(())
}

fn cmd_report(compare: &[PathBuf], csv: Option<&Path>) -> Result<()> {
    let reports: Vec<EvaluationReport> =
        compare.iter().map(|p| EvaluationReport::load(p)).collect::<Result<_>>()?;
    print!("{}", comparison_grid(&reports)?);
    if let Some(path) = csv {
        fs::write(path, comparison_csv(&reports)?)
            .map_err(|e| PurifyError::Io { path: path.display().to_string(), source: e })?;
        println!("csv written to {}", path.display());
    }
    Ok(())
}

fn cmd_run(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let cfg = if seed.is_none() && out.is_none() {
        validate_config(config)?
    } else {
        let mut cfg = ExperimentConfig::load(config)?;
        if let Some(seed) = seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = out {
            cfg.output_dir = out;
        }
        cfg.validate()?;
        write_normalized_echo(&cfg)?;
        cfg
    };

    let outputs = run_pipeline(&cfg)?;
    let reports: Vec<EvaluationReport> = outputs.cells.iter().map(|c| c.report.clone()).collect();
    print!("{}", comparison_grid(&reports)?);
    println!("experiment {} complete: {}", outputs.config_hash, outputs.root.display());
    Ok(())
}
