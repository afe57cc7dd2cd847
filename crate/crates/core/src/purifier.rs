//! The purification defense: an autoencoder G is trained to reproduce the
//! target classifier's confidence vectors while collapsing the per-class
//! spread that membership and inversion attacks feed on. Two optional
//! adversaries are co-trained against it — an inversion network H that tries
//! to reconstruct inputs from purified confidences, and a discriminator I
//! that tries to tell purified confidences from raw ones. G descends on a
//! composite objective that rewards fooling both.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::{error, PurifyError, Result};
use crate::nn::loss::{
    binary_cross_entropy, binary_cross_entropy_grad, cross_entropy, cross_entropy_grad,
    mean_log_one_minus, mean_log_one_minus_grad, mse, mse_grad,
};
use crate::nn::optim::{DualOptimizer, Optimizer, OptimizerKind};
use crate::nn::persist::{load_dual, load_network, save_dual, save_network};
use crate::nn::{
    argmax, one_hot_rows, rng_for, Activation, BnStats, DualBranchNet, ForwardCache, LayerSpec,
    Matrix, Network, NetworkGrads, NetworkSpec,
};
use crate::target::Oracle;

/// Which loss terms the purifier trains against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PurifierMode {
    /// Reconstruction + label loss only.
    Base,
    /// Adds the inversion adversary (weight `alpha`).
    Inv,
    /// Adds the membership discriminator (weight `beta`).
    Mem,
    /// Both adversaries.
    Both,
}

impl PurifierMode {
    pub const ALL: [PurifierMode; 4] =
        [PurifierMode::Base, PurifierMode::Inv, PurifierMode::Mem, PurifierMode::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            PurifierMode::Base => "base",
            PurifierMode::Inv => "inv",
            PurifierMode::Mem => "mem",
            PurifierMode::Both => "both",
        }
    }

    /// Default `(lambda, alpha, beta)` weights for this mode.
    pub fn default_weights(self) -> (f64, f64, f64) {
        match self {
            PurifierMode::Base => (1.0, 0.0, 0.0),
            PurifierMode::Inv => (1.0, 0.1, 0.0),
            PurifierMode::Mem => (1.0, 0.0, 1.0),
            PurifierMode::Both => (1.0, 0.1, 1.0),
        }
    }
}

impl std::fmt::Display for PurifierMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PurifierMode {
    type Err = PurifyError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(PurifierMode::Base),
            "inv" => Ok(PurifierMode::Inv),
            "mem" => Ok(PurifierMode::Mem),
            "both" => Ok(PurifierMode::Both),
            other => Err(PurifyError::Config(format!(
                "unknown purifier mode '{other}' (expected base, inv, mem, or both)"
            ))),
        }
    }
}

/// Smallest hidden width the autoencoder shape is allowed to narrow to.
/// Narrower bottlenecks lose too much of the confidence geometry to train.
pub const PURIFIER_MIN_WIDTH: usize = 6;

/// Learning rate for the co-trained adversaries H and I.
pub const ADVERSARY_LR: f64 = 2e-4;

/// Autoencoder widths for `k` classes: a symmetric funnel
/// `[k, k/2, k/5, k/10, k/5, k/2, k]` floored at [`PURIFIER_MIN_WIDTH`].
pub fn purifier_dims(k: usize) -> Vec<usize> {
    let down = [
        k,
        (k / 2).max(PURIFIER_MIN_WIDTH),
        (k / 5).max(PURIFIER_MIN_WIDTH),
        (k / 10).max(PURIFIER_MIN_WIDTH),
    ];
    let mut dims = down.to_vec();
    dims.extend(down[..3].iter().rev());
    dims
}

/// All hyperparameters of one purifier training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurifierHyper {
    pub mode: PurifierMode,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_h: f64,
    pub lr_i: f64,
    /// Override for the autoencoder widths; `None` uses [`purifier_dims`].
    #[serde(default)]
    pub g_dims: Option<Vec<usize>>,
}

impl PurifierHyper {
    /// Desk-scale defaults with the mode's standard loss weights.
    pub fn for_mode(mode: PurifierMode) -> Self {
        let (lambda, alpha, beta) = mode.default_weights();
        PurifierHyper {
            mode,
            lambda,
            alpha,
            beta,
            epochs: 60,
            batch_size: 32,
            lr_g: 1e-3,
            lr_h: ADVERSARY_LR,
            lr_i: ADVERSARY_LR,
            g_dims: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(PurifyError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        match self.mode {
            PurifierMode::Base if self.alpha != 0.0 || self.beta != 0.0 => {
                return Err(PurifyError::Config(
                    "mode base requires alpha = 0 and beta = 0".into(),
                ));
            }
            PurifierMode::Inv if self.beta != 0.0 => {
                return Err(PurifyError::Config("mode inv requires beta = 0".into()));
            }
            PurifierMode::Mem if self.alpha != 0.0 => {
                return Err(PurifyError::Config("mode mem requires alpha = 0".into()));
            }
            _ => {}
        }
        if self.batch_size == 0 {
            return Err(PurifyError::Config("batch_size must be positive".into()));
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_h", self.lr_h), ("lr_i", self.lr_i)] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(PurifyError::Config(format!("{name} must be finite and positive, got {lr}")));
            }
        }
        if let Some(dims) = &self.g_dims {
            if dims.len() < 2 || dims.iter().any(|&w| w == 0) {
                return Err(PurifyError::Config(
                    "g_dims needs at least input and output widths, all positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-epoch mean training losses; adversary traces are empty when the mode
/// does not train them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub i: Vec<f64>,
}

/// A trained purifier plus everything needed to reproduce or inspect it.
#[derive(Clone, Debug, PartialEq)]
pub struct PurifierBundle {
    pub g: Network,
    pub h: Option<Network>,
    pub i: Option<DualBranchNet>,
    pub hyper: PurifierHyper,
    pub trace: LossTrace,
}

fn g_spec(k: usize, dims: &[usize]) -> Result<NetworkSpec> {
    if dims.first() != Some(&k) || dims.last() != Some(&k) {
        return Err(PurifyError::Config(format!(
            "purifier widths must start and end at the class count {k}, got {dims:?}"
        )));
    }
    let last = dims.len() - 1;
    let layers = dims[1..]
        .iter()
        .enumerate()
        .map(|(idx, &units)| {
            if idx + 1 == last {
                LayerSpec::new(units, Activation::Softmax)
            } else {
                LayerSpec::with_batch_norm(units, Activation::Relu)
            }
        })
        .collect();
    Ok(NetworkSpec { input_dim: k, layers })
}

fn h_spec(k: usize, d: usize) -> NetworkSpec {
    NetworkSpec::mlp(&[k, 512, 1024, d], Activation::Relu, Activation::Sigmoid)
}

fn i_specs(k: usize) -> (NetworkSpec, NetworkSpec, NetworkSpec) {
    (
        NetworkSpec::mlp(&[k, 1024, 512, 64], Activation::Relu, Activation::Relu),
        NetworkSpec::mlp(&[k, 512, 64], Activation::Relu, Activation::Relu),
        NetworkSpec::mlp(&[128, 64, 1], Activation::Relu, Activation::Sigmoid),
    )
}

/// Builds the discriminator used both here and as the confidence-and-label
/// membership attack model: one branch reads the confidence vector, the
/// other a one-hot label, and a sigmoid head scores the pair.
pub fn confidence_label_net(k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<DualBranchNet> {
    let (a, b, head) = i_specs(k);
    DualBranchNet::init(a, b, head, rng)
}

fn argmax_labels(conf: &Matrix) -> Vec<usize> {
    conf.rows_iter().map(argmax).collect()
}

fn axpy(dst: &mut Matrix, scale: f64, src: &Matrix) {
    debug_assert_eq!((dst.rows(), dst.cols()), (src.rows(), src.cols()));
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += scale * s;
    }
}

/// Reconstruction-plus-label objective of the purifier alone:
/// `MSE(G(c), c) + lambda * CE(G(c), argmax c)`, evaluated in inference mode.
pub fn purifier_loss_base(g: &Network, conf: &Matrix, lambda: f64) -> f64 {
    let labels = argmax_labels(conf);
    let purified = g.predict(conf);
    mse(&purified, conf) + lambda * cross_entropy(&purified, &labels)
}

/// One gradient step of the inversion adversary: H learns to reconstruct the
/// raw features `x` from G's purified confidences. G is read-only here.
pub fn train_step_h(
    h: &mut Network,
    opt: &mut Optimizer,
    g: &Network,
    conf: &Matrix,
    x: &Matrix,
) -> f64 {
    let g_cache = g.forward_cached(conf, BnStats::Batch);
    let cache = h.forward_cached(g_cache.output(), BnStats::Batch);
    let loss = mse(cache.output(), x);
    let d_out = mse_grad(cache.output(), x);
    let (grads, _) = h.backward(&cache, &d_out);
    opt.step(h, &grads);
    h.commit_bn_updates(&cache);
    loss
}

/// One gradient step of the discriminator: I learns to score raw
/// (confidence, one-hot argmax) pairs as real and purified pairs as fake.
/// G is read-only here; the one-hot inputs carry no gradient.
pub fn train_step_i(
    i: &mut DualBranchNet,
    opt: &mut DualOptimizer,
    g: &Network,
    conf: &Matrix,
) -> f64 {
    let k = conf.cols();
    let real_one_hot = one_hot_rows(&argmax_labels(conf), k);
    let g_cache = g.forward_cached(conf, BnStats::Batch);
    let purified = g_cache.output();
    let fake_one_hot = one_hot_rows(&argmax_labels(purified), k);

    let ones = vec![1.0; conf.rows()];
    let zeros = vec![0.0; conf.rows()];

    let real_cache = i.forward_cached(conf, &real_one_hot, BnStats::Batch);
    let loss_real = binary_cross_entropy(real_cache.output(), &ones);
    let d_real = binary_cross_entropy_grad(real_cache.output(), &ones);
    let (mut grads, _, _) = i.backward(&real_cache, &d_real);

    let fake_cache = i.forward_cached(purified, &fake_one_hot, BnStats::Batch);
    let loss_fake = binary_cross_entropy(fake_cache.output(), &zeros);
    let d_fake = binary_cross_entropy_grad(fake_cache.output(), &zeros);
    let (grads_fake, _, _) = i.backward(&fake_cache, &d_fake);

    grads.add(&grads_fake);
    opt.step(i, &grads);
    loss_real + loss_fake
}

fn composite_parts(
    g: &Network,
    h: Option<&Network>,
    i: Option<&DualBranchNet>,
    conf: &Matrix,
    x: &Matrix,
    hyper: &PurifierHyper,
) -> Result<(f64, NetworkGrads, ForwardCache)> {
    let labels = argmax_labels(conf);
    let cache = g.forward_cached(conf, BnStats::Batch);
    let purified = cache.output();
    let mut loss = mse(purified, conf) + hyper.lambda * cross_entropy(purified, &labels);
    let mut d_purified = mse_grad(purified, conf);
    if hyper.lambda != 0.0 {
        axpy(&mut d_purified, hyper.lambda, &cross_entropy_grad(purified, &labels));
    }
    if hyper.alpha > 0.0 {
        let h = h.ok_or_else(|| {
            PurifyError::Config("alpha > 0 requires the inversion adversary".into())
        })?;
        let h_cache = h.forward_cached(purified, BnStats::Batch);
        loss -= hyper.alpha * mse(h_cache.output(), x);
        let d_recon = mse_grad(h_cache.output(), x);
        let (_, d_input) = h.backward(&h_cache, &d_recon);
        axpy(&mut d_purified, -hyper.alpha, &d_input);
    }
    if hyper.beta > 0.0 {
        let i = i.ok_or_else(|| {
            PurifyError::Config("beta > 0 requires the discriminator".into())
        })?;
        let fake_one_hot = one_hot_rows(&argmax_labels(purified), purified.cols());
        let i_cache = i.forward_cached(purified, &fake_one_hot, BnStats::Batch);
        loss += hyper.beta * mean_log_one_minus(i_cache.output());
        let d_score = mean_log_one_minus_grad(i_cache.output());
        let (_, d_conf_branch, _) = i.backward(&i_cache, &d_score);
        axpy(&mut d_purified, hyper.beta, &d_conf_branch);
    }
    let (grads, _) = g.backward(&cache, &d_purified);
    Ok((loss, grads, cache))
}

/// Value and G-parameter gradient of the composite purifier objective on one
/// batch, without applying any update. Gradients flow through H and I (when
/// weighted) but their own parameter gradients are discarded.
pub fn purifier_composite_grads(
    g: &Network,
    h: Option<&Network>,
    i: Option<&DualBranchNet>,
    conf: &Matrix,
    x: &Matrix,
    hyper: &PurifierHyper,
) -> Result<(f64, NetworkGrads)> {
    composite_parts(g, h, i, conf, x, hyper).map(|(loss, grads, _)| (loss, grads))
}

/// One gradient step of the purifier on the composite objective. Only G's
/// parameters (and its batch-norm running statistics) change.
pub fn train_step_g(
    g: &mut Network,
    opt: &mut Optimizer,
    h: Option<&Network>,
    i: Option<&DualBranchNet>,
    conf: &Matrix,
    x: &Matrix,
    hyper: &PurifierHyper,
) -> Result<f64> {
    let (loss, grads, cache) = composite_parts(g, h, i, conf, x, hyper)?;
    opt.step(g, &grads);
    g.commit_bn_updates(&cache);
    Ok(loss)
}

/// Trains a purifier on the oracle's confidence vectors over the reference
/// set. Per mini-batch the adversaries move first (H, then I), then G takes
/// one composite step; every epoch reshuffles the reference set.
pub fn train_purifier(
    oracle: &dyn Oracle,
    refset: &LabeledDataset,
    hyper: &PurifierHyper,
    seed: u64,
) -> Result<PurifierBundle> {
    hyper.validate()?;
    if refset.is_empty() {
        return Err(PurifyError::Data("purifier reference set is empty".into()));
    }
    let k = oracle.num_classes();
    let d = refset.feature_dim();
    let conf = oracle.predict(refset.features());
    if conf.cols() != k {
        return Err(PurifyError::Shape(format!(
            "oracle produced {} columns for {k} classes",
            conf.cols()
        )));
    }

    let dims = hyper.g_dims.clone().unwrap_or_else(|| purifier_dims(k));
    let mut g = Network::init(g_spec(k, &dims)?, &mut rng_for(seed, "purifier/init/g"))?;
    let mut opt_g = Optimizer::new(OptimizerKind::Adam, hyper.lr_g, &g);
    let mut h_state = if hyper.alpha > 0.0 {
        let h = Network::init(h_spec(k, d), &mut rng_for(seed, "purifier/init/h"))?;
        let opt = Optimizer::new(OptimizerKind::Adam, hyper.lr_h, &h);
        Some((h, opt))
    } else {
        None
    };
    let mut i_state = if hyper.beta > 0.0 {
        let i = confidence_label_net(k, &mut rng_for(seed, "purifier/init/i"))?;
        let opt = DualOptimizer::new(OptimizerKind::Adam, hyper.lr_i, &i);
        Some((i, opt))
    } else {
        None
    };

    let mut shuffle_rng = rng_for(seed, "purifier/shuffle");
    let mut order: Vec<usize> = (0..refset.len()).collect();
    let mut trace = LossTrace::default();

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut sum_g, mut sum_h, mut sum_i) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            let c = conf.select_rows(chunk);
            let x = refset.features().select_rows(chunk);
            if let Some((h, opt)) = h_state.as_mut() {
                let loss = train_step_h(h, opt, &g, &c, &x);
                if !loss.is_finite() {
                    return Err(PurifyError::Numeric(format!(
                        "inversion adversary diverged at epoch {epoch}: loss {loss}"
                    )));
                }
                sum_h += loss;
            }
            if let Some((i, opt)) = i_state.as_mut() {
                let loss = train_step_i(i, opt, &g, &c);
                if !loss.is_finite() {
                    return Err(PurifyError::Numeric(format!(
                        "discriminator diverged at epoch {epoch}: loss {loss}"
                    )));
                }
                sum_i += loss;
            }
            let loss = train_step_g(
                &mut g,
                &mut opt_g,
                h_state.as_ref().map(|(h, _)| h),
                i_state.as_ref().map(|(i, _)| i),
                &c,
                &x,
                hyper,
            )?;
            if !loss.is_finite() {
                return Err(PurifyError::Numeric(format!(
                    "purifier training diverged at epoch {epoch}: loss {loss}"
                )));
            }
            sum_g += loss;
            batches += 1;
        }
        let denom = batches.max(1) as f64;
        trace.g.push(sum_g / denom);
        let mut line = format!("purifier epoch {epoch}: g_loss {:.6}", sum_g / denom);
        if h_state.is_some() {
            trace.h.push(sum_h / denom);
            line.push_str(&format!(" h_loss {:.6}", sum_h / denom));
        }
        if i_state.is_some() {
            trace.i.push(sum_i / denom);
            line.push_str(&format!(" i_loss {:.6}", sum_i / denom));
        }
        log::info!("{line}");
    }

    Ok(PurifierBundle {
        g,
        h: h_state.map(|(h, _)| h),
        i: i_state.map(|(i, _)| i),
        hyper: hyper.clone(),
        trace,
    })
}

/// Applies the trained purifier in inference mode; rows in, rows out, each a
/// simplex.
pub fn purify(bundle: &PurifierBundle, conf: &Matrix) -> Result<Matrix> {
    if conf.cols() != bundle.g.input_dim() {
        return Err(PurifyError::Shape(format!(
            "purifier expects {} columns, got {}",
            bundle.g.input_dim(),
            conf.cols()
        )));
    }
    Ok(bundle.g.predict(conf))
}

/// Mean over label groups of the trace of the within-group covariance of the
/// confidence vectors. Groups with fewer than two members carry no spread
/// and are skipped; an empty or fully-singleton input scores 0.
pub fn dispersion(conf: &Matrix, labels: &[usize]) -> f64 {
    assert_eq!(conf.rows(), labels.len(), "dispersion batch mismatch");
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, &label) in labels.iter().enumerate() {
        groups.entry(label).or_default().push(row);
    }
    let mut traces = Vec::new();
    for rows in groups.values().filter(|rows| rows.len() >= 2) {
        let n = rows.len() as f64;
        let mut trace = 0.0;
        for col in 0..conf.cols() {
            let mean = rows.iter().map(|&r| conf.get(r, col)).sum::<f64>() / n;
            trace += rows.iter().map(|&r| (conf.get(r, col) - mean).powi(2)).sum::<f64>() / n;
        }
        traces.push(trace);
    }
    if traces.is_empty() {
        0.0
    } else {
        traces.iter().sum::<f64>() / traces.len() as f64
    }
}

/// [`dispersion`] grouped by each vector's own argmax class.
pub fn predicted_dispersion(conf: &Matrix) -> f64 {
    dispersion(conf, &argmax_labels(conf))
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    format: String,
    hyper: PurifierHyper,
    trace: LossTrace,
    has_h: bool,
    has_i: bool,
}

const BUNDLE_FORMAT: &str = "purifier-bundle/v1";

/// Writes the bundle into `dir`: one model file per network plus a
/// hyperparameter manifest.
pub fn save_bundle(bundle: &PurifierBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| error::io(dir, e))?;
    save_network(&bundle.g, &dir.join("purifier-g.net"))?;
    if let Some(h) = &bundle.h {
        save_network(h, &dir.join("purifier-h.net"))?;
    }
    if let Some(i) = &bundle.i {
        save_dual(i, &dir.join("purifier-i.net"))?;
    }
    let manifest = BundleManifest {
        format: BUNDLE_FORMAT.to_string(),
        hyper: bundle.hyper.clone(),
        trace: bundle.trace.clone(),
        has_h: bundle.h.is_some(),
        has_i: bundle.i.is_some(),
    };
    let path = dir.join("purifier.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| PurifyError::Config(format!("manifest serialization failed: {e}")))?;
    std::fs::write(&path, text).map_err(|e| error::io(&path, e))
}

/// Reads a bundle previously written by [`save_bundle`].
pub fn load_bundle(dir: &Path) -> Result<PurifierBundle> {
    let path = dir.join("purifier.json");
    let text = std::fs::read_to_string(&path).map_err(|e| error::io(&path, e))?;
    let manifest: BundleManifest =
        serde_json::from_str(&text).map_err(|e| error::parse(&path, e.to_string()))?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(error::parse(
            &path,
            format!("expected format {BUNDLE_FORMAT}, got {}", manifest.format),
        ));
    }
    let g = load_network(&dir.join("purifier-g.net"))?;
    let h = if manifest.has_h { Some(load_network(&dir.join("purifier-h.net"))?) } else { None };
    let i = if manifest.has_i { Some(load_dual(&dir.join("purifier-i.net"))?) } else { None };
    Ok(PurifierBundle { g, h, i, hyper: manifest.hyper, trace: manifest.trace })
}
