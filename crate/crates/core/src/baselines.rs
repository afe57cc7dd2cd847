//! Training-free baseline defenses — one-hot encoding and label-preserving
//! random noise — plus the wrapper that deploys any defense behind the
//! black-box oracle interface.

use crate::nn::{argmax, one_hot_rows, Matrix};
use crate::purifier::{purify, PurifierBundle};
use crate::target::Oracle;
use crate::{PurifyError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Resampling budget for the label-preserving noise before falling back to
/// the unmodified vector.
pub const MAX_NOISE_RETRIES: usize = 16;

/// Collapses every confidence row to an exact one-hot vector at its argmax;
/// ties go to the lowest index.
pub fn one_hot(conf: &Matrix) -> Matrix {
    let labels: Vec<usize> = conf.rows_iter().map(argmax).collect();
    one_hot_rows(&labels, conf.cols())
}

/// Adds uniform noise in [0, magnitude] to every entry and renormalizes,
/// resampling until the argmax is unchanged; after [`MAX_NOISE_RETRIES`]
/// rejected draws the input is returned unmodified. Deterministic given the
/// generator state.
pub fn random_noise_row(row: &[f64], magnitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if magnitude == 0.0 {
        return row.to_vec();
    }
    let keep = argmax(row);
    for _ in 0..MAX_NOISE_RETRIES {
        let mut noisy: Vec<f64> =
            row.iter().map(|&v| v + rng.gen_range(0.0..magnitude)).collect();
        let total: f64 = noisy.iter().sum();
        noisy.iter_mut().for_each(|v| *v /= total);
        if argmax(&noisy) == keep {
            return noisy;
        }
    }
    row.to_vec()
}

/// Noise generator for one confidence row: seeded from the experiment seed
/// and the row's bits, so a row's defended output does not depend on batch
/// composition or query order.
fn noise_rng(seed: u64, row: &[f64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(b"defense/random-noise");
    for &v in row {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// A confidence-vector defense, applied to oracle outputs row by row.
#[derive(Clone, Debug)]
pub enum DefenseTransform {
    /// Pass-through: the undefended oracle.
    None,
    /// Exact one-hot of the predicted class.
    OneHot,
    /// Label-preserving additive uniform noise.
    RandomNoise { magnitude: f64, seed: u64 },
    /// A trained purifier bundle.
    Purifier(Box<PurifierBundle>),
}

impl DefenseTransform {
    pub fn kind(&self) -> &'static str {
        match self {
            DefenseTransform::None => "none",
            DefenseTransform::OneHot => "one_hot",
            DefenseTransform::RandomNoise { .. } => "random_noise",
            DefenseTransform::Purifier(_) => "purifier",
        }
    }

    /// Checks the defense can legally transform `num_classes`-wide rows.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self {
            DefenseTransform::RandomNoise { magnitude, .. } => {
                if !(0.0..=1.0).contains(magnitude) {
                    return Err(PurifyError::Config(format!(
                        "noise magnitude must lie in [0, 1], got {magnitude}"
                    )));
                }
            }
            DefenseTransform::Purifier(bundle) => {
                let expected = bundle.g.input_dim();
                if expected != num_classes {
                    return Err(PurifyError::Config(format!(
                        "purifier expects {expected}-class confidences, oracle emits {num_classes}"
                    )));
                }
            }
            DefenseTransform::None | DefenseTransform::OneHot => {}
        }
        Ok(())
    }

    /// Transforms a batch of confidence rows.
    pub fn apply(&self, conf: &Matrix) -> Result<Matrix> {
        self.validate(conf.cols())?;
        match self {
            DefenseTransform::None => Ok(conf.clone()),
            DefenseTransform::OneHot => Ok(one_hot(conf)),
            DefenseTransform::RandomNoise { magnitude, seed } => {
                let mut out = conf.clone();
                let cols = out.cols();
                for row in out.data_mut().chunks_exact_mut(cols) {
                    let mut rng = noise_rng(*seed, row);
                    let noisy = random_noise_row(row, *magnitude, &mut rng);
                    row.copy_from_slice(&noisy);
                }
                Ok(out)
            }
            DefenseTransform::Purifier(bundle) => purify(bundle, conf),
        }
    }
}

/// An oracle with a defense bolted onto its output. Attacks and metrics see
/// exactly the interface the bare model exposes.
pub struct DefendedOracle<'a> {
    oracle: &'a dyn Oracle,
    defense: &'a DefenseTransform,
}

impl<'a> DefendedOracle<'a> {
    /// Validates the defense against the oracle's class count up front, so
    /// queries cannot fail later.
    pub fn new(oracle: &'a dyn Oracle, defense: &'a DefenseTransform) -> Result<Self> {
        defense.validate(oracle.num_classes())?;
        Ok(DefendedOracle { oracle, defense })
    }
}

impl Oracle for DefendedOracle<'_> {
    fn num_classes(&self) -> usize {
        self.oracle.num_classes()
    }

    fn predict(&self, features: &Matrix) -> Matrix {
        self.defense
            .apply(&self.oracle.predict(features))
            .expect("defense validated at construction")
    }
}
