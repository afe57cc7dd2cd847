//! The target classifier F and the black-box oracle interface every attack
//! and defense works through.

use crate::data::LabeledDataset;
use crate::nn::loss::{cross_entropy, cross_entropy_grad};
use crate::nn::optim::{Optimizer, OptimizerKind};
use crate::nn::{argmax, rng_for, Activation, BnStats, Matrix, Network, NetworkSpec};
use crate::{PurifyError, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Training recipe for the target classifier (and for attacker shadow
/// models, which reuse the same architecture).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2_weight_decay: f64,
    pub seed: u64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            hidden_dims: vec![1024, 512, 256],
            activation: Activation::Tanh,
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            l2_weight_decay: 0.0,
            seed: 1,
        }
    }
}

impl TargetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(PurifyError::Config("hidden_dims must be non-empty".into()));
        }
        if self.batch_size == 0 {
            return Err(PurifyError::Config("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(PurifyError::Config("learning_rate must be positive".into()));
        }
        if self.l2_weight_decay < 0.0 {
            return Err(PurifyError::Config("l2_weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Anything that maps feature rows to confidence rows. Attacks only ever see
/// this interface, which is what makes them black-box.
pub trait Oracle {
    fn num_classes(&self) -> usize;
    /// One confidence row (a simplex of length `num_classes`) per input row.
    fn predict(&self, features: &Matrix) -> Matrix;
}

/// The bare target classifier as an oracle.
pub struct ModelOracle<'a> {
    net: &'a Network,
}

impl<'a> ModelOracle<'a> {
    pub fn new(net: &'a Network) -> Self {
        ModelOracle { net }
    }
}

impl Oracle for ModelOracle<'_> {
    fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    fn predict(&self, features: &Matrix) -> Matrix {
        self.net.predict(features)
    }
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(conf: &Matrix, labels: &[usize]) -> f64 {
    assert_eq!(conf.rows(), labels.len(), "accuracy batch mismatch");
    let correct = conf
        .rows_iter()
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    correct as f64 / labels.len() as f64
}

/// Trains F on D1 for the full schedule.
pub fn train_target(d1: &LabeledDataset, cfg: &TargetConfig) -> Result<Network> {
    train_target_with_eval(d1, None, cfg)
}

/// As [`train_target`], additionally logging accuracy on `eval` per epoch.
pub fn train_target_with_eval(
    d1: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    cfg: &TargetConfig,
) -> Result<Network> {
    cfg.validate()?;
    if d1.is_empty() {
        return Err(PurifyError::Data("target training set is empty".into()));
    }
    let k = d1.num_classes();
    let mut dims = vec![d1.feature_dim()];
    dims.extend(&cfg.hidden_dims);
    dims.push(k);
    let spec = NetworkSpec::mlp(&dims, cfg.activation, Activation::Softmax);
    let mut net = Network::init(spec, &mut rng_for(cfg.seed, "target/init"))?;
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.learning_rate, &net);
    let mut shuffle_rng = rng_for(cfg.seed, "target/shuffle");
    let mut order: Vec<usize> = (0..d1.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = d1.features().select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| d1.labels()[i]).collect();
            let cache = net.forward_cached(&x, BnStats::Batch);
            let loss = cross_entropy(cache.output(), &y);
            if !loss.is_finite() {
                return Err(PurifyError::Numeric(format!(
                    "target training diverged at epoch {epoch}: loss {loss}"
                )));
            }
            let d_out = cross_entropy_grad(cache.output(), &y);
            let (mut grads, _) = net.backward(&cache, &d_out);
            if cfg.l2_weight_decay > 0.0 {
                for (lg, layer) in grads.layers.iter_mut().zip(net.layers()) {
                    for (g, &w) in lg.dw.data_mut().iter_mut().zip(layer.w.data()) {
                        *g += cfg.l2_weight_decay * w;
                    }
                }
            }
            opt.step(&mut net, &grads);
            net.commit_bn_updates(&cache);
            epoch_loss += loss;
            batches += 1;
        }
        let train_acc = accuracy(&net.predict(d1.features()), d1.labels());
        match eval {
            Some(ds) => {
                let eval_acc = accuracy(&net.predict(ds.features()), ds.labels());
                log::info!(
                    "target epoch {epoch}: loss {:.4} train_acc {train_acc:.4} eval_acc {eval_acc:.4}",
                    epoch_loss / batches as f64
                );
            }
            None => log::info!(
                "target epoch {epoch}: loss {:.4} train_acc {train_acc:.4}",
                epoch_loss / batches as f64
            ),
        }
    }
    Ok(net)
}
