//! End-to-end experiment orchestration: data → target → purifiers →
//! attacks → evaluation, with every artifact persisted under one hash-named
//! immutable directory and reports that are byte-identical across reruns.

use crate::attacks::{
    evaluate_membership, label_attack, mlleaks_adaptive, mlleaks_attack, nsh_attack,
    train_inversion_attack, AttackDataView, InversionConfig, MembershipAttack, MlleaksConfig,
    NshConfig,
};
use crate::baselines::{DefendedOracle, DefenseTransform};
use crate::config::{AttackKind, DatasetSource, DefenseSpec, ExperimentConfig};
use crate::data::{
    allocate, generate_synthetic, inversion_data, load_csv_expecting, save_csv, DatasetManifest,
    LabeledDataset, Splits,
};
use crate::eval::{
    assemble_report, comparison_csv, comparison_grid, confidence_distortion,
    correct_class_confidence, entropy_rows, histogram_gap, inversion_error, EvaluationReport,
    GapPair, ReportInputs, TimingReport, HISTOGRAM_BINS,
};
use crate::nn::persist::{save_dual, save_network};
use crate::nn::Network;
use crate::purifier::{predicted_dispersion, save_bundle, train_purifier, PurifierBundle};
use crate::target::{accuracy, train_target, ModelOracle, Oracle, TargetConfig};
use crate::{error, PurifyError, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

fn stage<T>(name: impl Into<String>, result: Result<T>) -> Result<T> {
    result.map_err(|e| PurifyError::Stage { stage: name.into(), source: Box::new(e) })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    fs::write(path, text).map_err(|e| error::io(path, e))
}

/// The dataset and realized split indices one seed runs on.
#[derive(Clone, Debug)]
pub struct SeedData {
    pub dataset: LabeledDataset,
    pub splits: Splits,
}

/// Generates (or loads) the dataset and allocates the splits for one seed,
/// entirely in memory. Synthetic sources regenerate with the experiment seed.
pub fn seed_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let dataset = match &cfg.dataset {
        DatasetSource::Synthetic { spec } => {
            let mut spec = spec.clone();
            spec.seed = seed;
            generate_synthetic(&spec)?
        }
        DatasetSource::Csv { path, num_classes } => load_csv_expecting(path, *num_classes)?,
    };
    let splits = allocate(&dataset, &cfg.allocation, seed)?;
    Ok(SeedData { dataset, splits })
}

/// Reconstructs the exact data a manifest describes: the synthetic dataset
/// is regenerated from its spec and the realized split indices are reused.
pub fn seed_data_from_manifest(manifest: &DatasetManifest) -> Result<SeedData> {
    let dataset = generate_synthetic(&manifest.spec)?;
    if manifest.splits.d1.iter().chain(&manifest.splits.d2).chain(&manifest.splits.d3).any(
        |&i| i >= dataset.len(),
    ) {
        return Err(PurifyError::Data(
            "manifest split indices fall outside the regenerated dataset".into(),
        ));
    }
    Ok(SeedData { dataset, splits: manifest.splits.clone() })
}

/// Data stage: [`seed_data`] plus persistence — `dataset.csv`, the reference
/// set the purifier trains on (`refset.csv`, the D2 rows), and the manifest
/// (synthetic sources) or `splits.json` (file sources).
pub fn stage_gen_data(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedData> {
    fs::create_dir_all(dir).map_err(|e| error::io(dir, e))?;
    let data = seed_data(cfg, seed)?;
    save_csv(&data.dataset, &dir.join("dataset.csv"))?;
    save_csv(&data.dataset.select(&data.splits.d2), &dir.join("refset.csv"))?;
    match &cfg.dataset {
        DatasetSource::Synthetic { spec } => {
            let mut spec = spec.clone();
            spec.seed = seed;
            DatasetManifest::new(spec, cfg.allocation.clone(), seed, data.splits.clone())
                .save(&dir.join("dataset.json"))?;
        }
        DatasetSource::Csv { .. } => {
            write_json(&data.splits, &dir.join("splits.json"))?;
        }
    }
    Ok(data)
}

/// Target stage: trains the classifier on D1 with the experiment seed and
/// persists it. Returns the model and its training wall time in seconds.
pub fn stage_train_target(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &SeedData,
    dir: &Path,
) -> Result<(Network, f64)> {
    let mut target_cfg = cfg.target.clone();
    target_cfg.seed = seed;
    let d1 = data.dataset.select(&data.splits.d1);
    let started = Instant::now();
    let net = train_target(&d1, &target_cfg)?;
    let secs = started.elapsed().as_secs_f64();
    save_network(&net, &dir.join("target.net"))?;
    Ok((net, secs))
}

/// The shadow-attack configuration implied by an experiment config: the
/// shadow mirrors the target's architecture on a shorter schedule.
pub fn mlleaks_config(cfg: &ExperimentConfig) -> MlleaksConfig {
    MlleaksConfig {
        shadow: TargetConfig { epochs: 25, ..cfg.target.clone() },
        top_k: cfg.mlleaks_top_k,
        ..MlleaksConfig::default()
    }
}

/// The attacks that do not depend on the deployed defense (their training
/// never queries the target), trained once per seed.
#[derive(Clone, Debug, Default)]
pub struct SharedAttacks {
    pub mlleaks: Option<MembershipAttack>,
    pub adaptive: Option<MembershipAttack>,
}

/// Trains the defense-independent attacks named in `attacks`, persisting
/// their models under `dir` when given.
pub fn train_shared_attacks(
    cfg: &ExperimentConfig,
    seed: u64,
    oracle: &dyn Oracle,
    view: &AttackDataView,
    reference: &LabeledDataset,
    dir: Option<&Path>,
) -> Result<SharedAttacks> {
    let mut shared = SharedAttacks::default();
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| error::io(dir, e))?;
    }
    let attack_cfg = mlleaks_config(cfg);

    if cfg.attacks.contains(&AttackKind::Mlleaks) {
        let attack = stage(
            format!("attack mlleaks [seed {seed}]"),
            mlleaks_attack(oracle, view, &attack_cfg, seed),
        )?;
        if let (Some(dir), MembershipAttack::SortedConfidence { net, .. }) = (dir, &attack) {
            save_network(net, &dir.join("mlleaks.net"))?;
        }
        shared.mlleaks = Some(attack);
    }

    if cfg.attacks.contains(&AttackKind::MlleaksA) {
        let attack = stage(
            format!("attack mlleaks-a [seed {seed}]"),
            mlleaks_adaptive(oracle, view, reference, &cfg.surrogate_hyper(), &attack_cfg, seed),
        )?;
        if let (Some(dir), MembershipAttack::SortedConfidence { net, surrogate, .. }) =
            (dir, &attack)
        {
            save_network(net, &dir.join("mlleaks-a.net"))?;
            if let Some(bundle) = surrogate {
                save_bundle(bundle, &dir.join("mlleaks-a-surrogate"))?;
            }
        }
        shared.adaptive = Some(attack);
    }
    Ok(shared)
}

/// Everything a single (defense, attack-suite) evaluation needs.
pub struct CellContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub data: &'a SeedData,
    pub target: &'a Network,
    pub seed: u64,
    /// Wall time of the target's training, echoed into the timing sidecar.
    pub target_train_secs: f64,
}

/// Trains the defense-dependent attacks against the defended oracle, runs
/// every metric, and assembles the report for one defense. Attack models are
/// persisted under `dir` when given. The returned timing stays out of the
/// report so reruns stay byte-identical.
pub fn evaluate_cell(
    ctx: &CellContext,
    defense_name: &str,
    transform: &DefenseTransform,
    shared: &SharedAttacks,
    purifier_train_secs: Option<f64>,
    dir: Option<&Path>,
) -> Result<(EvaluationReport, TimingReport)> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| error::io(dir, e))?;
    }
    let seed = ctx.seed;
    let tag = |what: &str| format!("{what} [seed {seed}, defense {defense_name}]");

    let raw_oracle = ModelOracle::new(ctx.target);
    let defended = stage(tag("evaluate"), DefendedOracle::new(&raw_oracle, transform))?;
    let view = stage(tag("evaluate"), AttackDataView::new(&ctx.data.dataset, &ctx.data.splits))?;
    let eval_members = view.eval_members();
    let eval_nonmembers = view.eval_nonmembers();

    let mut inference_accuracy = BTreeMap::new();
    for kind in ctx.cfg.attacks.iter().filter(|k| k.is_membership()) {
        let trained_here;
        let attack: &MembershipAttack = match kind {
            AttackKind::Mlleaks | AttackKind::MlleaksA => {
                let slot = if *kind == AttackKind::Mlleaks {
                    shared.mlleaks.as_ref()
                } else {
                    shared.adaptive.as_ref()
                };
                slot.ok_or_else(|| {
                    PurifyError::Config(format!("the {kind} attack was not trained for this cell"))
                })?
            }
            AttackKind::Nsh => {
                let attack = stage(
                    tag("attack nsh"),
                    nsh_attack(&defended, &view, &NshConfig::default(), seed),
                )?;
                if let (Some(dir), MembershipAttack::ConfidenceAndLabel { net }) = (dir, &attack) {
                    save_dual(net, &dir.join("nsh.dual"))?;
                }
                trained_here = attack;
                &trained_here
            }
            AttackKind::Label => {
                trained_here = label_attack();
                &trained_here
            }
            AttackKind::Inversion => unreachable!("filtered to membership attacks"),
        };
        let acc = stage(
            tag(&format!("evaluate {kind}")),
            evaluate_membership(attack, &defended, &eval_members, &eval_nonmembers),
        )?;
        inference_accuracy.insert(kind.as_str().to_string(), acc);
    }

    let inversion = if ctx.cfg.attacks.contains(&AttackKind::Inversion) {
        let split = inversion_data(&ctx.data.splits, seed);
        let auxiliary = ctx.data.dataset.select(&split.auxiliary);
        let model = stage(
            tag("attack inversion"),
            train_inversion_attack(&defended, &auxiliary, &InversionConfig::default(), seed),
        )?;
        if let Some(dir) = dir {
            save_network(&model.net, &dir.join("inversion.net"))?;
        }
        let errors = stage(
            tag("evaluate inversion"),
            inversion_error(
                &model,
                &defended,
                &ctx.data.dataset.select(&split.test_members),
                &ctx.data.dataset.select(&split.test_nonmembers),
            ),
        )?;
        Some(errors)
    } else {
        None
    };

    let d1 = ctx.data.dataset.select(&ctx.data.splits.d1);
    let d3 = ctx.data.dataset.select(&ctx.data.splits.d3);

    let started = Instant::now();
    let raw_d3 = raw_oracle.predict(d3.features());
    let raw_micros = started.elapsed().as_secs_f64() * 1e6 / d3.len() as f64;
    let started = Instant::now();
    let defended_d3 = defended.predict(d3.features());
    let defended_micros = started.elapsed().as_secs_f64() * 1e6 / d3.len() as f64;

    let metrics = (|| -> Result<ReportInputs> {
        let train_conf = defended.predict(d1.features());
        let conf_members = defended.predict(eval_members.features());
        let conf_nonmembers = defended.predict(eval_nonmembers.features());
        let correct_m = correct_class_confidence(&conf_members, eval_members.labels())?;
        let correct_n = correct_class_confidence(&conf_nonmembers, eval_nonmembers.labels())?;
        let confidence_gap = histogram_gap(&correct_m, &correct_n, HISTOGRAM_BINS)?;
        let entropy_gap = histogram_gap(
            &entropy_rows(&conf_members),
            &entropy_rows(&conf_nonmembers),
            HISTOGRAM_BINS,
        )?;
        Ok(ReportInputs {
            defense: defense_name.to_string(),
            seed,
            train_accuracy: accuracy(&train_conf, d1.labels()),
            test_accuracy: accuracy(&defended_d3, d3.labels()),
            confidence_distortion: confidence_distortion(&raw_d3, &defended_d3)?,
            inversion,
            inference_accuracy,
            dispersion_raw: predicted_dispersion(&raw_d3),
            dispersion_defended: predicted_dispersion(&defended_d3),
            confidence_gap: GapPair { max: confidence_gap.0, avg: confidence_gap.1 },
            entropy_gap: GapPair { max: entropy_gap.0, avg: entropy_gap.1 },
        })
    })();
    let report = stage(tag("evaluate"), metrics.and_then(assemble_report))?;

    let timing = TimingReport {
        target_train_secs: ctx.target_train_secs,
        purifier_train_secs,
        raw_query_micros_per_sample: raw_micros,
        defended_query_micros_per_sample: defended_micros,
        overhead_ratio: defended_micros / raw_micros.max(1e-9),
    };
    Ok((report, timing))
}

/// One evaluated (seed, defense) cell of a finished run.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub seed: u64,
    pub defense: String,
    pub report: EvaluationReport,
    pub report_path: PathBuf,
}

/// Runs every stage for one seed, writing all artifacts under `seed_dir`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, seed_dir: &Path) -> Result<Vec<CellOutcome>> {
    let data = stage(format!("gen-data [seed {seed}]"), stage_gen_data(cfg, seed, seed_dir))?;
    let (target, target_train_secs) = stage(
        format!("train-target [seed {seed}]"),
        stage_train_target(cfg, seed, &data, seed_dir),
    )?;

    let oracle = ModelOracle::new(&target);
    let refset = data.dataset.select(&data.splits.d2);
    let mut purifiers: BTreeMap<String, (PurifierBundle, f64)> = BTreeMap::new();
    for defense in &cfg.defenses {
        let Some(hyper) = cfg.hyper_for(defense) else { continue };
        let name = defense.name();
        let started = Instant::now();
        let bundle = stage(
            format!("train-purifier [seed {seed}, {name}]"),
            train_purifier(&oracle, &refset, &hyper, seed),
        )?;
        let secs = started.elapsed().as_secs_f64();
        save_bundle(&bundle, &seed_dir.join("purifiers").join(&name))?;
        purifiers.insert(name, (bundle, secs));
    }

    let view = AttackDataView::new(&data.dataset, &data.splits)?;
    let shared =
        train_shared_attacks(cfg, seed, &oracle, &view, &refset, Some(&seed_dir.join("attacks")))?;

    let ctx = CellContext { cfg, data: &data, target: &target, seed, target_train_secs };
    let mut outcomes = Vec::new();
    for defense in &cfg.defenses {
        let name = defense.name();
        let (transform, purifier_secs) = match defense {
            DefenseSpec::None => (DefenseTransform::None, None),
            DefenseSpec::OneHot => (DefenseTransform::OneHot, None),
            DefenseSpec::RandomNoise { magnitude } => {
                (DefenseTransform::RandomNoise { magnitude: *magnitude, seed }, None)
            }
            DefenseSpec::Purifier { .. } => {
                let (bundle, secs) = purifiers.get(&name).expect("purifier trained above").clone();
                (DefenseTransform::Purifier(Box::new(bundle)), Some(secs))
            }
        };
        let defense_dir = seed_dir.join(format!("defense-{name}"));
        let (report, timing) =
            evaluate_cell(&ctx, &name, &transform, &shared, purifier_secs, Some(&defense_dir))?;
        let report_path = defense_dir.join("report.json");
        report.save(&report_path)?;
        write_json(&timing, &defense_dir.join("timing.json"))?;
        outcomes.push(CellOutcome { seed, defense: name, report, report_path });
    }
    Ok(outcomes)
}

/// A finished experiment: where it lives and every cell's report.
#[derive(Clone, Debug)]
pub struct ExperimentOutputs {
    pub root: PathBuf,
    pub config_hash: String,
    pub cells: Vec<CellOutcome>,
}

/// SHA-256 of every file under `root` (except the checksum file itself),
/// one `hash  relative/path` line per file in stable order.
fn checksum_tree(root: &Path) -> Result<String> {
    let mut lines = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| error::io(root, std::io::Error::other(e)))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        if entry.depth() == 1 && entry.file_name() == "checksums.txt" {
            continue;
        }
        let bytes = fs::read(path).map_err(|e| error::io(path, e))?;
        let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        let rel = path.strip_prefix(root).expect("walked under root");
        lines.push(format!("{hex}  {}", rel.display()));
    }
    Ok(lines.join("\n") + "\n")
}

/// Runs the full experiment: every seed through every stage, then the
/// cross-cell summary and the checksum manifest. The output directory is
/// named by the config's semantic hash and is immutable once complete;
/// a failed run leaves its partial outputs in place for inspection.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<ExperimentOutputs> {
    cfg.validate()?;
    let config_hash = cfg.semantic_hash();
    let root = cfg.output_dir.join(cfg.experiment_dirname());
    let checksum_path = root.join("checksums.txt");
    if checksum_path.exists() {
        return Err(PurifyError::Config(format!(
            "{} already holds a completed run of this config; completed experiments are \
             immutable — move the directory aside or choose another output_dir",
            root.display()
        )));
    }
    fs::create_dir_all(&root).map_err(|e| error::io(&root, e))?;
    fs::write(root.join("config.json"), cfg.to_text())
        .map_err(|e| error::io(&root.join("config.json"), e))?;

    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir = root.join(format!("seed-{seed}"));
        cells.extend(run_seed(cfg, seed, &seed_dir)?);
        log::info!("seed {seed} finished ({} cells total)", cells.len());
    }

    let reports: Vec<EvaluationReport> = cells.iter().map(|c| c.report.clone()).collect();
    fs::write(root.join("summary.txt"), comparison_grid(&reports)?)
        .map_err(|e| error::io(&root.join("summary.txt"), e))?;
    fs::write(root.join("summary.csv"), comparison_csv(&reports)?)
        .map_err(|e| error::io(&root.join("summary.csv"), e))?;

    fs::write(&checksum_path, checksum_tree(&root)?).map_err(|e| error::io(&checksum_path, e))?;
    Ok(ExperimentOutputs { root, config_hash, cells })
}
