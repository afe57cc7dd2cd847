//! Whole-system acceptance checks, run at the default desk scale: three
//! seeds, every defense, every attack. Each numbered criterion prints one
//! verdict line; the test fails if any criterion fails.

mod common;

use purify_core::config::{
    AttackKind, DatasetSource, DefenseSpec, ExperimentConfig, PurifierSettings,
};
use purify_core::data::{inversion_data, AllocationConfig, SyntheticSpec};
use purify_core::eval::EvaluationReport;
use purify_core::pipeline::{run_pipeline, seed_data};
use purify_core::purifier::PurifierMode;
use purify_core::target::TargetConfig;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

const SEEDS: [u64; 3] = [1, 2, 3];

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

struct Grid(BTreeMap<String, BTreeMap<u64, EvaluationReport>>);

impl Grid {
    fn report(&self, defense: &str, seed: u64) -> &EvaluationReport {
        &self.0[defense][&seed]
    }

    fn per_seed(&self, defense: &str, f: impl Fn(&EvaluationReport) -> f64) -> Vec<f64> {
        SEEDS.iter().map(|s| f(self.report(defense, *s))).collect()
    }

    fn mean(&self, defense: &str, f: impl Fn(&EvaluationReport) -> f64) -> f64 {
        mean(&self.per_seed(defense, f))
    }
}

fn attack(report: &EvaluationReport, kind: &str) -> f64 {
    report.inference_accuracy[kind]
}

fn inv_err(report: &EvaluationReport) -> f64 {
    report.inversion_error_overall.expect("inversion attack was run")
}

fn desk_config(out: &Path) -> ExperimentConfig {
    let mut cfg: ExperimentConfig =
        serde_json::from_str(r#"{ "seeds": [1, 2, 3] }"#).expect("defaults fill every field");
    cfg.output_dir = out.to_path_buf();
    cfg
}

/// Mean squared error of the best constant reconstruction (the per-feature
/// mean) on the same member/non-member test pool the inversion attack is
/// scored on.
fn constant_reconstruction_floor(cfg: &ExperimentConfig, seed: u64) -> f64 {
    let sd = seed_data(cfg, seed).expect("dataset regenerates");
    let split = inversion_data(&sd.splits, seed);
    let mut idx = split.test_members.clone();
    idx.extend_from_slice(&split.test_nonmembers);
    let test = sd.dataset.select(&idx);
    let x = test.features();
    let n = x.rows() as f64;
    let mut means = x.column_sums();
    means.iter_mut().for_each(|m| *m /= n);
    let mut total = 0.0;
    for row in x.rows_iter() {
        for (v, m) in row.iter().zip(&means) {
            total += (v - m) * (v - m);
        }
    }
    total / (n * x.cols() as f64)
}

/// A smaller experiment that still exercises every pipeline stage, used to
/// rerun the whole thing twice and compare outputs byte for byte.
fn reduced_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSource::Synthetic {
            spec: SyntheticSpec {
                num_classes: 6,
                feature_dim: 30,
                samples_per_class: 60,
                prototype_density: 0.5,
                flip_noise: 0.2,
                seed: 1,
            },
        },
        allocation: AllocationConfig { d1: 120, d2: 120, d3: 120, attacker_fraction: 0.5 },
        target: TargetConfig {
            hidden_dims: vec![32],
            epochs: 12,
            batch_size: 32,
            ..TargetConfig::default()
        },
        purifier: PurifierSettings { epochs: 8, ..PurifierSettings::default() },
        attacks: AttackKind::ALL.to_vec(),
        defenses: vec![
            DefenseSpec::None,
            DefenseSpec::Purifier {
                mode: PurifierMode::Both,
                lambda: None,
                alpha: None,
                beta: None,
            },
        ],
        mlleaks_top_k: None,
        seeds: vec![5],
        output_dir: out.to_path_buf(),
    }
}

fn determinism_check(dir: &Path) -> (bool, String) {
    let a = match run_pipeline(&reduced_config(&dir.join("a"))) {
        Ok(a) => a,
        Err(e) => return (false, format!("first run failed: {e}")),
    };
    let b = match run_pipeline(&reduced_config(&dir.join("b"))) {
        Ok(b) => b,
        Err(e) => return (false, format!("second run failed: {e}")),
    };
    if a.config_hash != b.config_hash {
        return (false, "config hashes differ between identical configs".into());
    }
    let mut rels: Vec<PathBuf> = a
        .cells
        .iter()
        .map(|c| c.report_path.strip_prefix(&a.root).expect("report under root").to_path_buf())
        .collect();
    rels.push(PathBuf::from("summary.txt"));
    rels.push(PathBuf::from("summary.csv"));
    let count = rels.len();
    for rel in rels {
        let bytes_a = std::fs::read(a.root.join(&rel)).expect("first run artifact");
        let bytes_b = std::fs::read(b.root.join(&rel)).expect("second run artifact");
        if bytes_a != bytes_b {
            return (false, format!("{} differs between reruns", rel.display()));
        }
    }
    (
        true,
        format!(
            "{count} report files byte-identical across independent reruns (config hash {})",
            &a.config_hash[..12]
        ),
    )
}

#[test]
fn acceptance() {
    let mut verdicts: Vec<(usize, bool, String)> = Vec::new();

    let started = Instant::now();
    let grads = common::all_gradient_combinations(10);
    let grad_secs = started.elapsed().as_secs_f64();
    verdicts.push(match grads {
        Ok(trials) => (
            1,
            trials >= 100 && grad_secs <= 30.0,
            format!(
                "gradients: {trials} finite-difference trials across every layer/loss \
                 combination within rel tol 1e-3 in {grad_secs:.1}s"
            ),
        ),
        Err(e) => (1, false, format!("gradients: {e}")),
    });

    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = desk_config(&dir.path().join("runs"));
    let outputs = run_pipeline(&cfg).expect("full desk-scale pipeline");
    let mut grid: BTreeMap<String, BTreeMap<u64, EvaluationReport>> = BTreeMap::new();
    for cell in &outputs.cells {
        grid.entry(cell.defense.clone()).or_default().insert(cell.seed, cell.report.clone());
    }
    let g = Grid(grid);
    let noise_name = g
        .0
        .keys()
        .find(|k| k.starts_with("random_noise"))
        .expect("random-noise defense evaluated")
        .clone();

    let nsh_none = g.mean("none", |r| attack(r, "nsh"));
    let mll_none = g.mean("none", |r| attack(r, "mlleaks"));
    let est_none = g.mean("none", |r| r.label_estimate);
    let inv_none = g.mean("none", inv_err);
    let floors: Vec<f64> =
        SEEDS.iter().map(|s| constant_reconstruction_floor(&cfg, *s)).collect();
    let floor = mean(&floors);
    verdicts.push((
        2,
        nsh_none >= est_none + 0.03 && mll_none >= 0.53 && inv_none < floor,
        format!(
            "undefended attacks viable: nsh {} vs label estimate {} (needs +3pts), mlleaks {} \
             (needs >=53%), inversion error {inv_none:.4} vs best-constant floor {floor:.4}",
            pct(nsh_none),
            pct(est_none),
            pct(mll_none),
        ),
    ));

    let nsh_both = g.mean("purifier_both", |r| attack(r, "nsh"));
    let recovery = (nsh_none - nsh_both) / (nsh_none - est_none);
    verdicts.push((
        3,
        nsh_both <= est_none + 0.02 && recovery >= 0.60,
        format!(
            "membership defense: nsh under purifier_both {} vs label estimate {} (needs \
             <=+2pts), gap recovery {:.0}% (needs >=60%)",
            pct(nsh_both),
            pct(est_none),
            100.0 * recovery,
        ),
    ));

    let inv_both = g.mean("purifier_both", inv_err);
    let inv_rel = inv_both / inv_none - 1.0;
    verdicts.push((
        4,
        inv_rel >= 0.05,
        format!(
            "inversion defense: retrained attacker error {inv_both:.4} vs undefended \
             {inv_none:.4} ({:+.1}%, needs >=+5%)",
            100.0 * inv_rel,
        ),
    ));

    let acc_none = g.mean("none", |r| r.test_accuracy);
    let acc_both = g.mean("purifier_both", |r| r.test_accuracy);
    let acc_drop = acc_none - acc_both;
    let distortion = g.mean("purifier_both", |r| r.confidence_distortion);
    verdicts.push((
        5,
        acc_drop <= 0.010 && distortion <= 0.10,
        format!(
            "utility: test accuracy {} -> {} (drop {:.2}pts, needs <=1.0), confidence \
             distortion {:.4} (needs <=0.10)",
            pct(acc_none),
            pct(acc_both),
            100.0 * acc_drop,
            distortion,
        ),
    ));

    let dispersion_pairs: Vec<String> = SEEDS
        .iter()
        .map(|s| {
            let r = g.report("purifier_both", *s);
            format!("seed {s}: {:.5} -> {:.5}", r.dispersion_raw, r.dispersion_defended)
        })
        .collect();
    verdicts.push((
        6,
        SEEDS.iter().all(|s| {
            let r = g.report("purifier_both", *s);
            r.dispersion_defended < r.dispersion_raw
        }),
        format!("dispersion shrinks every seed: {}", dispersion_pairs.join("; ")),
    ));

    let inv_inv = g.mean("purifier_inv", inv_err);
    let inv_base = g.mean("purifier_base", inv_err);
    let nsh_mem = g.mean("purifier_mem", |r| attack(r, "nsh"));
    let nsh_base = g.mean("purifier_base", |r| attack(r, "nsh"));
    verdicts.push((
        7,
        inv_inv >= inv_base && nsh_mem <= nsh_base,
        format!(
            "specialization: inversion error inv-mode {inv_inv:.4} vs base {inv_base:.4} \
             (needs >=), nsh mem-mode {} vs base {} (needs <=)",
            pct(nsh_mem),
            pct(nsh_base),
        ),
    ));

    let nsh_inv = g.mean("purifier_inv", |r| attack(r, "nsh"));
    let inv_mem = g.mean("purifier_mem", inv_err);
    verdicts.push((
        8,
        nsh_inv < nsh_none && inv_mem >= 0.98 * inv_none,
        format!(
            "cross defense: nsh under inv-mode {} vs undefended {} (needs <), inversion \
             error under mem-mode {inv_mem:.4} vs undefended {inv_none:.4} (needs >=98%)",
            pct(nsh_inv),
            pct(nsh_none),
        ),
    ));

    let label_devs: Vec<f64> = SEEDS
        .iter()
        .map(|s| {
            let r = g.report("none", *s);
            (attack(r, "label") - r.label_estimate).abs()
        })
        .collect();
    let max_dev = label_devs.iter().cloned().fold(0.0, f64::max);
    verdicts.push((
        9,
        max_dev <= 0.02,
        format!(
            "label closed form: measured accuracy within {:.2}pts of 0.5 + gap/2 on every \
             seed (needs <=2pts)",
            100.0 * max_dev,
        ),
    ));

    let label_exact = SEEDS.iter().all(|s| {
        let none = attack(g.report("none", *s), "label");
        attack(g.report("one_hot", *s), "label") == none
            && attack(g.report(&noise_name, *s), "label") == none
    });
    let mll_onehot = g.mean("one_hot", |r| attack(r, "mlleaks"));
    let label_onehot = g.mean("one_hot", |r| attack(r, "label"));
    verdicts.push((
        10,
        label_exact && (mll_onehot - label_onehot).abs() <= 0.02,
        format!(
            "argmax-preserving: label attack bit-identical under one_hot and {noise_name} \
             ({label_exact}), mlleaks under one_hot {} vs label {} (needs within 2pts)",
            pct(mll_onehot),
            pct(label_onehot),
        ),
    ));

    let (det_pass, det_detail) = determinism_check(&dir.path().join("det"));
    verdicts.push((11, det_pass, det_detail));

    let gap_pairs: Vec<String> = SEEDS
        .iter()
        .map(|s| {
            let n = g.report("none", *s);
            let b = g.report("purifier_both", *s);
            format!(
                "seed {s}: conf {:.3} -> {:.3}, entropy {:.3} -> {:.3}",
                n.confidence_gap.max, b.confidence_gap.max, n.entropy_gap.max, b.entropy_gap.max
            )
        })
        .collect();
    verdicts.push((
        12,
        SEEDS.iter().all(|s| {
            let n = g.report("none", *s);
            let b = g.report("purifier_both", *s);
            b.confidence_gap.max < n.confidence_gap.max && b.entropy_gap.max < n.entropy_gap.max
        }),
        format!("histogram gaps shrink every seed: {}", gap_pairs.join("; ")),
    ));

    verdicts.sort_by_key(|(i, _, _)| *i);
    for (i, pass, detail) in &verdicts {
        println!("criterion {i:2} {} — {detail}", if *pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<usize> =
        verdicts.iter().filter(|(_, pass, _)| !pass).map(|(i, _, _)| *i).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
