//! Metrics and the evaluation report: utility, confidence distortion,
//! inversion error, membership-inference accuracies, confidence/entropy
//! histogram gaps, and cluster dispersion, with a stable on-disk form.

use crate::attacks::InversionModel;
use crate::data::LabeledDataset;
use crate::nn::loss::mse;
use crate::nn::Matrix;
use crate::target::Oracle;
use crate::{error, PurifyError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Equal-width bins over [0, 1] used by the histogram-gap diagnostics; the
/// count is recorded in every report so gaps stay comparable.
pub const HISTOGRAM_BINS: usize = 20;

/// Mean over rows of the L2 distance between raw and defended confidences.
/// A simplex-to-simplex distance never exceeds sqrt(2).
pub fn confidence_distortion(raw: &Matrix, defended: &Matrix) -> Result<f64> {
    if raw.rows() == 0 {
        return Err(PurifyError::Data("distortion needs at least one sample".into()));
    }
    if (raw.rows(), raw.cols()) != (defended.rows(), defended.cols()) {
        return Err(PurifyError::Shape(format!(
            "distortion inputs disagree: {}x{} vs {}x{}",
            raw.rows(),
            raw.cols(),
            defended.rows(),
            defended.cols()
        )));
    }
    let total: f64 = raw
        .rows_iter()
        .zip(defended.rows_iter())
        .map(|(a, b)| {
            a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        })
        .sum();
    Ok(total / raw.rows() as f64)
}

/// Per-dimension reconstruction MSE of the inversion attack, reported for
/// members, non-members, and their size-weighted mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionErrors {
    pub members: f64,
    pub nonmembers: f64,
    pub overall: f64,
}

pub fn inversion_error(
    model: &InversionModel,
    oracle: &dyn Oracle,
    members: &LabeledDataset,
    nonmembers: &LabeledDataset,
) -> Result<InversionErrors> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(PurifyError::Data(
            "inversion evaluation needs non-empty member and non-member sets".into(),
        ));
    }
    let err_of = |set: &LabeledDataset| -> Result<f64> {
        let recon = model.reconstruct(&oracle.predict(set.features()))?;
        Ok(mse(&recon, set.features()))
    };
    let members_err = err_of(members)?;
    let nonmembers_err = err_of(nonmembers)?;
    let (nm, nn) = (members.len() as f64, nonmembers.len() as f64);
    Ok(InversionErrors {
        members: members_err,
        nonmembers: nonmembers_err,
        overall: (nm * members_err + nn * nonmembers_err) / (nm + nn),
    })
}

/// Entropy of a confidence row divided by `ln k`, in [0, 1]; `0 ln 0` is 0.
pub fn normalized_entropy(row: &[f64]) -> f64 {
    if row.len() < 2 {
        return 0.0;
    }
    let entropy: f64 = row.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum();
    (entropy / (row.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Normalized entropy of every confidence row.
pub fn entropy_rows(conf: &Matrix) -> Vec<f64> {
    conf.rows_iter().map(normalized_entropy).collect()
}

/// The oracle's confidence in each sample's true class.
pub fn correct_class_confidence(conf: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != conf.rows() {
        return Err(PurifyError::Shape(format!(
            "{} labels for {} confidence rows",
            labels.len(),
            conf.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= conf.cols()) {
        return Err(PurifyError::Data(format!(
            "label {bad} outside the {} confidence columns",
            conf.cols()
        )));
    }
    Ok(labels.iter().enumerate().map(|(i, &y)| conf.get(i, y)).collect())
}

/// Maximum and mean per-bin difference between the normalized histograms of
/// two value lists over [0, 1]. Symmetric in its arguments.
pub fn histogram_gap(members: &[f64], nonmembers: &[f64], bins: usize) -> Result<(f64, f64)> {
    if bins == 0 {
        return Err(PurifyError::Config("histogram needs at least one bin".into()));
    }
    if members.is_empty() || nonmembers.is_empty() {
        return Err(PurifyError::Data("histogram gap needs non-empty value lists".into()));
    }
    let frequencies = |values: &[f64]| -> Vec<f64> {
        let mut counts = vec![0usize; bins];
        for &v in values {
            let idx = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        counts.into_iter().map(|c| c as f64 / values.len() as f64).collect()
    };
    let fm = frequencies(members);
    let fn_ = frequencies(nonmembers);
    let gaps: Vec<f64> = fm.iter().zip(&fn_).map(|(a, b)| (a - b).abs()).collect();
    let max = gaps.iter().cloned().fold(0.0, f64::max);
    let avg = gaps.iter().sum::<f64>() / bins as f64;
    Ok((max, avg))
}

/// A maximum/average pair from one histogram-gap diagnostic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapPair {
    pub max: f64,
    pub avg: f64,
}

/// Wall-clock timings of one experiment. Kept out of the deterministic
/// report file and written as a sidecar instead.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub target_train_secs: f64,
    pub purifier_train_secs: Option<f64>,
    pub raw_query_micros_per_sample: f64,
    pub defended_query_micros_per_sample: f64,
    /// Defended query time over raw query time.
    pub overhead_ratio: f64,
}

pub const REPORT_FORMAT: &str = "evaluation-report/v1";

/// Everything one defense-under-attack experiment produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format: String,
    pub defense: String,
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Train minus test accuracy.
    pub generalization_gap: f64,
    /// The closed-form label-attack estimate `0.5 + gap/2`.
    pub label_estimate: f64,
    pub confidence_distortion: f64,
    pub inversion_error_members: Option<f64>,
    pub inversion_error_nonmembers: Option<f64>,
    pub inversion_error_overall: Option<f64>,
    /// Membership-inference accuracy per attack kind, in key order.
    pub inference_accuracy: BTreeMap<String, f64>,
    pub dispersion_raw: f64,
    pub dispersion_defended: f64,
    pub histogram_bins: usize,
    /// Member/non-member gap of the confidence in the correct class.
    pub confidence_gap: GapPair,
    /// Member/non-member gap of the normalized prediction entropy.
    pub entropy_gap: GapPair,
    /// Absent in the report file so identical runs serialize identically;
    /// the pipeline writes timings to a sidecar.
    pub timing: Option<TimingReport>,
}

/// The measured ingredients of a report, before derived fields are filled.
#[derive(Clone, Debug)]
pub struct ReportInputs {
    pub defense: String,
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub confidence_distortion: f64,
    pub inversion: Option<InversionErrors>,
    pub inference_accuracy: BTreeMap<String, f64>,
    pub dispersion_raw: f64,
    pub dispersion_defended: f64,
    pub confidence_gap: GapPair,
    pub entropy_gap: GapPair,
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(PurifyError::Numeric(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

/// Fills the derived fields and checks every bound the report promises.
pub fn assemble_report(inputs: ReportInputs) -> Result<EvaluationReport> {
    check_fraction("train_accuracy", inputs.train_accuracy)?;
    check_fraction("test_accuracy", inputs.test_accuracy)?;
    for (kind, &acc) in &inputs.inference_accuracy {
        check_fraction(&format!("inference_accuracy[{kind}]"), acc)?;
    }
    for (name, gap) in
        [("confidence_gap", inputs.confidence_gap), ("entropy_gap", inputs.entropy_gap)]
    {
        check_fraction(&format!("{name}.max"), gap.max)?;
        check_fraction(&format!("{name}.avg"), gap.avg)?;
    }
    if !(0.0..=f64::sqrt(2.0) + 1e-9).contains(&inputs.confidence_distortion) {
        return Err(PurifyError::Numeric(format!(
            "confidence distortion must lie in [0, sqrt(2)], got {}",
            inputs.confidence_distortion
        )));
    }
    let gap = inputs.train_accuracy - inputs.test_accuracy;
    Ok(EvaluationReport {
        format: REPORT_FORMAT.into(),
        defense: inputs.defense,
        seed: inputs.seed,
        train_accuracy: inputs.train_accuracy,
        test_accuracy: inputs.test_accuracy,
        generalization_gap: gap,
        label_estimate: 0.5 + gap / 2.0,
        confidence_distortion: inputs.confidence_distortion,
        inversion_error_members: inputs.inversion.map(|e| e.members),
        inversion_error_nonmembers: inputs.inversion.map(|e| e.nonmembers),
        inversion_error_overall: inputs.inversion.map(|e| e.overall),
        inference_accuracy: inputs.inference_accuracy,
        dispersion_raw: inputs.dispersion_raw,
        dispersion_defended: inputs.dispersion_defended,
        histogram_bins: HISTOGRAM_BINS,
        confidence_gap: inputs.confidence_gap,
        entropy_gap: inputs.entropy_gap,
        timing: None,
    })
}

impl EvaluationReport {
    /// Serializes with a stable field order; identical reports produce
    /// byte-identical text.
    pub fn to_text(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| PurifyError::Parse { path: "<report>".into(), reason: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?).map_err(|e| error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EvaluationReport> {
        let text = fs::read_to_string(path).map_err(|e| error::io(path, e))?;
        let report: EvaluationReport =
            serde_json::from_str(&text).map_err(|e| error::parse(path, e.to_string()))?;
        if report.format != REPORT_FORMAT {
            return Err(error::parse(
                path,
                format!("expected a {REPORT_FORMAT} file, found {}", report.format),
            ));
        }
        Ok(report)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

/// All attack kinds appearing in any report, in stable order.
fn attack_columns(reports: &[EvaluationReport]) -> Vec<String> {
    let mut kinds: Vec<String> = reports
        .iter()
        .flat_map(|r| r.inference_accuracy.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    kinds.sort();
    kinds
}

/// A fixed-width side-by-side grid of the headline metrics, one row per
/// report.
pub fn comparison_grid(reports: &[EvaluationReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(PurifyError::Data("nothing to compare: no reports".into()));
    }
    let attacks = attack_columns(reports);
    let mut header: Vec<String> = vec![
        "defense".into(),
        "seed".into(),
        "train_acc".into(),
        "test_acc".into(),
        "gap".into(),
        "distortion".into(),
        "inv_err".into(),
    ];
    header.extend(attacks.iter().cloned());
    header.push("conf_gap_max".into());
    header.push("entropy_gap_max".into());

    let mut rows: Vec<Vec<String>> = vec![header];
    for r in reports {
        let mut row = vec![
            r.defense.clone(),
            r.seed.to_string(),
            format!("{:.4}", r.train_accuracy),
            format!("{:.4}", r.test_accuracy),
            format!("{:.4}", r.generalization_gap),
            format!("{:.4}", r.confidence_distortion),
            fmt_opt(r.inversion_error_overall),
        ];
        for kind in &attacks {
            row.push(fmt_opt(r.inference_accuracy.get(kind).copied()));
        }
        row.push(format!("{:.4}", r.confidence_gap.max));
        row.push(format!("{:.4}", r.entropy_gap.max));
        rows.push(row);
    }

    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> =
            row.iter().zip(&widths).map(|(cell, w)| format!("{cell:>w$}")).collect();
        out.push_str(&line.join("  "));
        out.push('\n');
        if i == 0 {
            let underline: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&underline.join("  "));
            out.push('\n');
        }
    }
    Ok(out)
}

/// The same comparison as [`comparison_grid`] in CSV form for plotting.
pub fn comparison_csv(reports: &[EvaluationReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(PurifyError::Data("nothing to compare: no reports".into()));
    }
    let attacks = attack_columns(reports);
    let mut out = String::from(
        "defense,seed,train_accuracy,test_accuracy,generalization_gap,label_estimate,\
         confidence_distortion,inversion_error_members,inversion_error_nonmembers,\
         inversion_error_overall",
    );
    for kind in &attacks {
        out.push_str(&format!(",attack_{kind}"));
    }
    out.push_str(
        ",dispersion_raw,dispersion_defended,confidence_gap_max,confidence_gap_avg,\
         entropy_gap_max,entropy_gap_avg\n",
    );
    let csv_opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v}"));
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}",
            r.defense,
            r.seed,
            r.train_accuracy,
            r.test_accuracy,
            r.generalization_gap,
            r.label_estimate,
            r.confidence_distortion,
            csv_opt(r.inversion_error_members),
            csv_opt(r.inversion_error_nonmembers),
            csv_opt(r.inversion_error_overall),
        ));
        for kind in &attacks {
            out.push(',');
            out.push_str(&csv_opt(r.inference_accuracy.get(kind).copied()));
        }
        out.push_str(&format!(
            ",{},{},{},{},{},{}\n",
            r.dispersion_raw,
            r.dispersion_defended,
            r.confidence_gap.max,
            r.confidence_gap.avg,
            r.entropy_gap.max,
            r.entropy_gap.avg,
        ));
    }
    Ok(out)
}
