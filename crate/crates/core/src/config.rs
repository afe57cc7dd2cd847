//! The experiment configuration: one structured-text file pinning every knob
//! of a full run — data, splits, target, purifier schedule, attack and
//! defense lists, and explicit seeds — with per-field validation, explicit
//! defaults, and a content hash that names the output directory.

use crate::data::{AllocationConfig, SyntheticSpec};
use crate::purifier::{PurifierHyper, PurifierMode, ADVERSARY_LR};
use crate::target::TargetConfig;
use crate::{error, PurifyError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Where the experiment's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Synthetic data; each experiment seed regenerates the world with that
    /// seed substituted into the spec, so different seeds draw independent
    /// datasets from the same distribution.
    Synthetic { spec: SyntheticSpec },
    /// `label,f1,...,fd` rows loaded from disk, fixed across seeds; the
    /// class count is stated explicitly so sparse label sets cannot shrink
    /// the confidence vector.
    Csv { path: PathBuf, num_classes: usize },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic { spec: SyntheticSpec::default() }
    }
}

impl DatasetSource {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSource::Synthetic { spec } => spec.num_classes,
            DatasetSource::Csv { num_classes, .. } => *num_classes,
        }
    }
}

/// One attack to mount against every deployed defense.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    /// Shadow-model membership attack on sorted confidence vectors.
    Mlleaks,
    /// The defense-aware variant: pipes confidences through the attacker's
    /// own surrogate purifier before scoring.
    MlleaksA,
    /// Membership attack on the confidence vector paired with the true label.
    Nsh,
    /// Closed-form baseline: predicts member iff the oracle is correct.
    Label,
    /// Black-box reconstruction of the input features from confidences.
    Inversion,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::Mlleaks,
        AttackKind::MlleaksA,
        AttackKind::Nsh,
        AttackKind::Label,
        AttackKind::Inversion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Mlleaks => "mlleaks",
            AttackKind::MlleaksA => "mlleaks-a",
            AttackKind::Nsh => "nsh",
            AttackKind::Label => "label",
            AttackKind::Inversion => "inversion",
        }
    }

    /// True for the attacks scored by membership-inference accuracy.
    pub fn is_membership(self) -> bool {
        !matches!(self, AttackKind::Inversion)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = PurifyError;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            PurifyError::Config(format!(
                "unknown attack kind {s:?}; expected one of mlleaks, mlleaks-a, nsh, label, inversion"
            ))
        })
    }
}

/// One deployed defense to train (if needed) and evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseSpec {
    /// The bare oracle.
    None,
    /// Replace each confidence vector by the one-hot of its argmax.
    OneHot,
    /// Add argmax-preserving uniform noise of the given magnitude.
    RandomNoise { magnitude: f64 },
    /// Train a purifier in the given mode; loss weights default to the
    /// mode's standard values unless overridden here.
    Purifier {
        mode: PurifierMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lambda: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        beta: Option<f64>,
    },
}

impl DefenseSpec {
    /// Stable name used for report rows and artifact directories.
    pub fn name(&self) -> String {
        match self {
            DefenseSpec::None => "none".into(),
            DefenseSpec::OneHot => "one_hot".into(),
            DefenseSpec::RandomNoise { magnitude } => format!("random_noise_{magnitude}"),
            DefenseSpec::Purifier { mode, .. } => format!("purifier_{}", mode.as_str()),
        }
    }
}

/// The purifier training schedule, shared by every purifier defense in the
/// run and by the adaptive attacker's surrogate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PurifierSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_h: f64,
    pub lr_i: f64,
    /// Override for the autoencoder widths; `None` derives them from the
    /// class count.
    pub g_dims: Option<Vec<usize>>,
}

impl Default for PurifierSettings {
    fn default() -> Self {
        PurifierSettings {
            epochs: 60,
            batch_size: 32,
            lr_g: 1e-3,
            lr_h: ADVERSARY_LR,
            lr_i: ADVERSARY_LR,
            g_dims: None,
        }
    }
}

impl PurifierSettings {
    /// The full hyperparameter block for one purifier mode, with optional
    /// per-defense loss-weight overrides.
    pub fn hyper(
        &self,
        mode: PurifierMode,
        lambda: Option<f64>,
        alpha: Option<f64>,
        beta: Option<f64>,
    ) -> PurifierHyper {
        let mut hyper = PurifierHyper::for_mode(mode);
        hyper.epochs = self.epochs;
        hyper.batch_size = self.batch_size;
        hyper.lr_g = self.lr_g;
        hyper.lr_h = self.lr_h;
        hyper.lr_i = self.lr_i;
        hyper.g_dims = self.g_dims.clone();
        if let Some(v) = lambda {
            hyper.lambda = v;
        }
        if let Some(v) = alpha {
            hyper.alpha = v;
        }
        if let Some(v) = beta {
            hyper.beta = v;
        }
        hyper
    }
}

fn default_attacks() -> Vec<AttackKind> {
    AttackKind::ALL.to_vec()
}

fn default_defenses() -> Vec<DefenseSpec> {
    let mut defenses = vec![
        DefenseSpec::None,
        DefenseSpec::OneHot,
        DefenseSpec::RandomNoise { magnitude: 0.3 },
    ];
    defenses.extend(PurifierMode::ALL.into_iter().map(|mode| DefenseSpec::Purifier {
        mode,
        lambda: None,
        alpha: None,
        beta: None,
    }));
    defenses
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything one experiment runs on. Only `seeds` has no default: seeds are
/// always explicit, never derived from the clock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSource,
    #[serde(default)]
    pub allocation: AllocationConfig,
    /// Target classifier schedule; its `seed` field is replaced by each
    /// experiment seed at run time.
    #[serde(default)]
    pub target: TargetConfig,
    #[serde(default)]
    pub purifier: PurifierSettings,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<AttackKind>,
    #[serde(default = "default_defenses")]
    pub defenses: Vec<DefenseSpec>,
    /// Keep only the highest `top_k` sorted confidences as shadow-attack
    /// input; `None` keeps the full vector.
    #[serde(default)]
    pub mlleaks_top_k: Option<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn at(field: &str, err: PurifyError) -> PurifyError {
    let reason = match &err {
        PurifyError::Config(m)
        | PurifyError::Shape(m)
        | PurifyError::Data(m)
        | PurifyError::Numeric(m) => m.clone(),
        other => other.to_string(),
    };
    PurifyError::Config(format!("{field}: {reason}"))
}

impl ExperimentConfig {
    /// Checks every invariant, reporting violations with their field path.
    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSource::Synthetic { spec } => {
                spec.validate().map_err(|e| at("dataset.spec", e))?;
            }
            DatasetSource::Csv { path, num_classes } => {
                if !path.exists() {
                    return Err(PurifyError::Config(format!(
                        "dataset.path: file {} does not exist",
                        path.display()
                    )));
                }
                if *num_classes < 2 {
                    return Err(PurifyError::Config(format!(
                        "dataset.num_classes: need at least 2 classes, got {num_classes}"
                    )));
                }
            }
        }
        self.allocation.validate().map_err(|e| at("allocation", e))?;
        self.target.validate().map_err(|e| at("target", e))?;

        if self.seeds.is_empty() {
            return Err(PurifyError::Config("seeds: at least one explicit seed is required".into()));
        }
        let mut seen = HashSet::new();
        for &seed in &self.seeds {
            if !seen.insert(seed) {
                return Err(PurifyError::Config(format!("seeds: duplicate seed {seed}")));
            }
        }

        let mut seen = HashSet::new();
        for kind in &self.attacks {
            if !seen.insert(*kind) {
                return Err(PurifyError::Config(format!("attacks: duplicate entry {kind}")));
            }
        }

        if self.defenses.is_empty() {
            return Err(PurifyError::Config(
                "defenses: at least one defense is required (use kind \"none\" for the bare oracle)"
                    .into(),
            ));
        }
        let mut seen = HashSet::new();
        for (i, defense) in self.defenses.iter().enumerate() {
            let name = defense.name();
            if !seen.insert(name.clone()) {
                return Err(PurifyError::Config(format!("defenses[{i}]: duplicate entry {name}")));
            }
            match defense {
                DefenseSpec::RandomNoise { magnitude } => {
                    if !(0.0..=1.0).contains(magnitude) {
                        return Err(PurifyError::Config(format!(
                            "defenses[{i}].magnitude: must lie in [0, 1], got {magnitude}"
                        )));
                    }
                }
                DefenseSpec::Purifier { mode, lambda, alpha, beta } => {
                    self.purifier
                        .hyper(*mode, *lambda, *alpha, *beta)
                        .validate()
                        .map_err(|e| at(&format!("defenses[{i}]"), e))?;
                }
                DefenseSpec::None | DefenseSpec::OneHot => {}
            }
        }

        if let Some(k) = self.mlleaks_top_k {
            let classes = self.dataset.num_classes();
            if !(1..=classes).contains(&k) {
                return Err(PurifyError::Config(format!(
                    "mlleaks_top_k: must lie in 1..={classes}, got {k}"
                )));
            }
        }
        Ok(())
    }

    /// The hyperparameters for one purifier defense entry; `None` when the
    /// entry is not a purifier.
    pub fn hyper_for(&self, defense: &DefenseSpec) -> Option<PurifierHyper> {
        match defense {
            DefenseSpec::Purifier { mode, lambda, alpha, beta } => {
                Some(self.purifier.hyper(*mode, *lambda, *alpha, *beta))
            }
            _ => None,
        }
    }

    /// What the adaptive attacker trains for itself: a base-mode purifier on
    /// the configured schedule.
    pub fn surrogate_hyper(&self) -> PurifierHyper {
        self.purifier.hyper(PurifierMode::Base, None, None, None)
    }

    /// Stable pretty-printed serialization; the normalized echo spells out
    /// every default explicitly.
    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Parses a config file, filling defaults; does not validate.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| error::parse(path, e.to_string()))
    }

    /// Hash over everything that affects results (the output directory does
    /// not); hex-encoded SHA-256.
    pub fn semantic_hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.output_dir = PathBuf::new();
        let text = serde_json::to_string(&semantic).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Directory name of this experiment under `output_dir`.
    pub fn experiment_dirname(&self) -> String {
        self.semantic_hash()[..12].to_string()
    }
}

/// Writes the normalized form (defaults spelled out) next to the outputs,
/// returning the echo's path.
pub fn write_normalized_echo(cfg: &ExperimentConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| error::io(&cfg.output_dir, e))?;
    let echo = cfg.output_dir.join("config.normalized.json");
    fs::write(&echo, cfg.to_text()).map_err(|e| error::io(&echo, e))?;
    Ok(echo)
}

/// Parses and validates a config file, writes the normalized echo into the
/// output directory, and returns the normalized form.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    write_normalized_echo(&cfg)?;
    Ok(cfg)
}
