//! Synthetic dataset generation, CSV ingestion, and the experiment's data
//! allocation: disjoint splits D1 (target training), D2 (reference), D3
//! (test), plus the attacker-held subsets and the inversion attack's
//! auxiliary/test partition.

use crate::nn::{rng_for, Matrix};
use crate::{error, PurifyError, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Recipe for the synthetic tabular dataset: each class gets a random binary
/// prototype, and each sample is its class prototype with independent bit
/// flips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub prototype_density: f64,
    pub flip_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 20,
            feature_dim: 100,
            samples_per_class: 300,
            prototype_density: 0.5,
            flip_noise: 0.285,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(PurifyError::Config("num_classes must be at least 2".into()));
        }
        if self.feature_dim < 2 {
            return Err(PurifyError::Config("feature_dim must be at least 2".into()));
        }
        if self.samples_per_class == 0 {
            return Err(PurifyError::Config("samples_per_class must be positive".into()));
        }
        for (name, p) in [("prototype_density", self.prototype_density), ("flip_noise", self.flip_noise)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(PurifyError::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Feature matrix plus integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(PurifyError::Data(format!(
                "feature rows ({}) and labels ({}) disagree",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(PurifyError::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledDataset { features, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// New dataset holding the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Draws the class prototypes and the per-sample bit flips. Samples are
/// ordered by class here; [`allocate`] owns the shuffle.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    generate_synthetic_with_prototypes(spec).map(|(ds, _)| ds)
}

/// As [`generate_synthetic`], also returning the k×d prototype matrix so
/// callers can measure separability against the ground truth.
pub fn generate_synthetic_with_prototypes(spec: &SyntheticSpec) -> Result<(LabeledDataset, Matrix)> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, "data/synthetic");
    let (k, d, per_class) = (spec.num_classes, spec.feature_dim, spec.samples_per_class);
    let mut prototypes = Matrix::zeros(k, d);
    for v in prototypes.data_mut() {
        *v = f64::from(rng.gen::<f64>() < spec.prototype_density);
    }
    let mut features = Matrix::zeros(k * per_class, d);
    let mut labels = Vec::with_capacity(k * per_class);
    for class in 0..k {
        for s in 0..per_class {
            let row = features.row_mut(class * per_class + s);
            for (v, &proto) in row.iter_mut().zip(prototypes.row(class)) {
                let flip = rng.gen::<f64>() < spec.flip_noise;
                *v = if flip { 1.0 - proto } else { proto };
            }
            labels.push(class);
        }
    }
    let dataset = LabeledDataset::new(features, labels, k)?;
    Ok((dataset, prototypes))
}

/// Split sizes and the fraction of D1/D3 handed to the attacker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationConfig {
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
    pub attacker_fraction: f64,
}

impl Default for AllocationConfig {
    fn default() -> Self {
        AllocationConfig { d1: 2000, d2: 2000, d3: 2000, attacker_fraction: 0.5 }
    }
}

impl AllocationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d1 == 0 || self.d2 == 0 || self.d3 == 0 {
            return Err(PurifyError::Config("split sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.attacker_fraction) {
            return Err(PurifyError::Config(format!(
                "attacker_fraction must lie in [0, 1], got {}",
                self.attacker_fraction
            )));
        }
        Ok(())
    }
}

/// Row indices of every split. Dᴬ is a prefix of D1's index list and D′ᴬ a
/// prefix of D3's, so the membership evaluation sets are the corresponding
/// suffixes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub d1: Vec<usize>,
    pub d2: Vec<usize>,
    pub d3: Vec<usize>,
    pub d_a: Vec<usize>,
    pub d_a_prime: Vec<usize>,
}

impl Splits {
    /// Members the attack models are evaluated on: D1 minus Dᴬ.
    pub fn eval_members(&self) -> &[usize] {
        &self.d1[self.d_a.len()..]
    }

    /// Non-members the attack models are evaluated on: D3 minus D′ᴬ.
    pub fn eval_nonmembers(&self) -> &[usize] {
        &self.d3[self.d_a_prime.len()..]
    }
}

/// Shuffles the dataset and carves out disjoint D1/D2/D3 plus the attacker
/// subsets (a fraction of D1 and of D3).
pub fn allocate(dataset: &LabeledDataset, cfg: &AllocationConfig, seed: u64) -> Result<Splits> {
    cfg.validate()?;
    let need = cfg.d1 + cfg.d2 + cfg.d3;
    if need > dataset.len() {
        return Err(PurifyError::Data(format!(
            "allocation needs {need} samples but the dataset has {}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng_for(seed, "data/allocate"));
    let d1 = order[..cfg.d1].to_vec();
    let d2 = order[cfg.d1..cfg.d1 + cfg.d2].to_vec();
    let d3 = order[cfg.d1 + cfg.d2..need].to_vec();
    let n_a = (cfg.d1 as f64 * cfg.attacker_fraction).round() as usize;
    let n_a_prime = (cfg.d3 as f64 * cfg.attacker_fraction).round() as usize;
    let d_a = d1[..n_a].to_vec();
    let d_a_prime = d3[..n_a_prime].to_vec();
    Ok(Splits { d1, d2, d3, d_a, d_a_prime })
}

/// The inversion attack's data: 80% of each split as auxiliary training
/// data, the remaining 20% of D1 and D3 as the member/non-member test sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionSplit {
    pub auxiliary: Vec<usize>,
    pub test_members: Vec<usize>,
    pub test_nonmembers: Vec<usize>,
}

pub fn inversion_data(splits: &Splits, seed: u64) -> InversionSplit {
    let mut rng = rng_for(seed, "data/inversion");
    let mut auxiliary = Vec::new();
    let mut tails: Vec<Vec<usize>> = Vec::new();
    for part in [&splits.d1, &splits.d2, &splits.d3] {
        let mut idx = part.clone();
        idx.shuffle(&mut rng);
        let cut = (idx.len() * 4) / 5;
        auxiliary.extend_from_slice(&idx[..cut]);
        tails.push(idx[cut..].to_vec());
    }
    let test_nonmembers = tails.pop().expect("three parts");
    tails.pop();
    let test_members = tails.pop().expect("three parts");
    InversionSplit { auxiliary, test_members, test_nonmembers }
}

/// Writes `label,f1,...,fd` rows. Floats use the shortest representation
/// that parses back to the same value, so round-trips are exact.
pub fn save_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (row, &label) in dataset.features.rows_iter().zip(&dataset.labels) {
        write!(out, "{label}").expect("string write");
        for v in row {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| error::io(path, e))
}

/// Reads `label,f1,...,fd` rows, inferring the class count as max label + 1.
pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    load_csv_inner(path, None)
}

/// As [`load_csv`] but rejects labels outside the declared class count.
pub fn load_csv_expecting(path: &Path, num_classes: usize) -> Result<LabeledDataset> {
    load_csv_inner(path, Some(num_classes))
}

fn load_csv_inner(path: &Path, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| error::io(path, e))?;
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .expect("split yields at least one field")
            .parse()
            .map_err(|_| error::parse(path, format!("line {lineno}: label is not an integer")))?;
        if let Some(k) = num_classes {
            if label >= k {
                return Err(error::parse(
                    path,
                    format!("line {lineno}: label {label} exceeds declared class count {k}"),
                ));
            }
        }
        let row: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| error::parse(path, format!("line {lineno}: bad feature value {f:?}")))
            })
            .collect::<Result<_>>()?;
        if row.is_empty() {
            return Err(error::parse(path, format!("line {lineno}: no feature columns")));
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(error::parse(
                    path,
                    format!("line {lineno}: expected {w} features, found {}", row.len()),
                ));
            }
            _ => {}
        }
        labels.push(label);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(error::parse(path, "no data rows"));
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |&m| m + 1));
    let features = Matrix::from_rows(&rows);
    LabeledDataset::new(features, labels, k)
}

/// Everything needed to reconstruct an experiment's data exactly: the
/// generator spec, the allocation, and the realized split indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub spec: SyntheticSpec,
    pub allocation: AllocationConfig,
    pub allocation_seed: u64,
    pub splits: Splits,
    pub notes: String,
}

pub const MANIFEST_FORMAT: &str = "dataset-manifest/v1";

impl DatasetManifest {
    pub fn new(spec: SyntheticSpec, allocation: AllocationConfig, allocation_seed: u64, splits: Splits) -> Self {
        DatasetManifest {
            format: MANIFEST_FORMAT.to_string(),
            spec,
            allocation,
            allocation_seed,
            splits,
            notes: "all splits drawn i.i.d. from one synthetic generator; \
                    D2 shares D1's class distribution by construction"
                .to_string(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| error::io(path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| error::parse(path, e.to_string()))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(error::parse(
                path,
                format!("unsupported manifest format {:?}", manifest.format),
            ));
        }
        Ok(manifest)
    }
}

/// Classifies each sample by Hamming-nearest prototype (ties to the lowest
/// class index) and returns the accuracy against the true labels.
pub fn nearest_prototype_accuracy(dataset: &LabeledDataset, prototypes: &Matrix) -> f64 {
    let mut correct = 0usize;
    for (row, &label) in dataset.features.rows_iter().zip(&dataset.labels) {
        let mut best = (f64::INFINITY, 0usize);
        for (class, proto) in prototypes.rows_iter().enumerate() {
            let dist: f64 = row.iter().zip(proto).map(|(&a, &b)| (a - b).abs()).sum();
            if dist < best.0 {
                best = (dist, class);
            }
        }
        if best.1 == label {
            correct += 1;
        }
    }
    correct as f64 / dataset.len() as f64
}
