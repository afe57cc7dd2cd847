//! A small dense-network engine: fully-connected layers with optional batch
//! normalization, a fixed activation set, explicit forward caches, and exact
//! backpropagation.
//!
//! Design constraints the rest of the crate leans on:
//! - `predict` is pure (running batch-norm statistics, no mutation), so a
//!   trained network is safe to share read-only.
//! - `forward_cached` with [`BnStats::Batch`] gives training-time semantics
//!   *without* mutating running statistics; the owner of a training step
//!   decides when to commit them via `commit_bn_updates`. This is what lets
//!   one network be trained while another is evaluated with training
//!   semantics inside the same step, with each step mutating exactly one
//!   network.
//! - All randomness comes from a caller-provided seeded RNG; given the same
//!   seed and inputs every operation is bit-for-bit reproducible.

pub mod dual;
pub mod loss;
pub mod matrix;
pub mod optim;
pub mod persist;

pub use dual::{DualBranchNet, DualCache, DualGrads};
pub use matrix::{argmax, one_hot_rows, Matrix};

use crate::{PurifyError, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Activation functions the engine supports. `Softmax` is only valid on the
/// final layer (it is the one activation that couples units).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
}

/// One layer of a [`NetworkSpec`]: linear map to `units`, optional batch
/// normalization, then `activation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub units: usize,
    pub activation: Activation,
    #[serde(default)]
    pub batch_norm: bool,
}

impl LayerSpec {
    pub fn new(units: usize, activation: Activation) -> Self {
        LayerSpec { units, activation, batch_norm: false }
    }

    pub fn with_batch_norm(units: usize, activation: Activation) -> Self {
        LayerSpec { units, activation, batch_norm: true }
    }
}

/// Architecture description: input width plus the layer stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Convenience constructor for plain MLPs: `dims` are layer widths
    /// starting with the input; hidden layers get `hidden` activation and the
    /// final layer gets `output`.
    pub fn mlp(dims: &[usize], hidden: Activation, output: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims[1..]
            .iter()
            .enumerate()
            .map(|(i, &units)| {
                let act = if i + 2 == dims.len() { output } else { hidden };
                LayerSpec::new(units, act)
            })
            .collect();
        NetworkSpec { input_dim: dims[0], layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(PurifyError::Config("network input_dim must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(PurifyError::Config("network needs at least one layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.units == 0 {
                return Err(PurifyError::Config(format!("layer {i} has zero units")));
            }
            if l.activation == Activation::Softmax && i + 1 != self.layers.len() {
                return Err(PurifyError::Config(format!(
                    "softmax is only valid on the final layer, found on layer {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.units)
    }
}

/// Batch-normalization parameters and running statistics for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Momentum for the running-statistics update:
/// `running = MOMENTUM * running + (1 - MOMENTUM) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;
/// Variance floor inside the normalization denominator.
pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    fn new(units: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; units],
            beta: vec![0.0; units],
            running_mean: vec![0.0; units],
            running_var: vec![1.0; units],
        }
    }
}

/// One trained layer: weights are `units x input`, biases length `units`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub bn: Option<BatchNorm>,
    pub activation: Activation,
}

/// Which statistics batch normalization uses in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnStats {
    /// Running statistics: inference semantics, input-wise pure.
    Running,
    /// Current-batch statistics: training semantics.
    Batch,
}

/// Everything backward needs from one layer's forward pass.
#[derive(Clone, Debug)]
struct LayerCache {
    /// Layer input (the previous layer's output).
    x: Matrix,
    /// Normalized pre-activation `xhat` when batch norm is present.
    bn_xhat: Option<Matrix>,
    /// Batch mean/var actually used for normalization (batch-stats mode).
    bn_mean: Vec<f64>,
    bn_var: Vec<f64>,
    /// Post-activation output.
    y: Matrix,
}

/// Forward-pass record: per-layer caches plus the batch statistics that a
/// training step may later fold into the running statistics.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    stats: BnStats,
}

impl ForwardCache {
    /// The network output (the last layer's activation).
    pub fn output(&self) -> &Matrix {
        &self.layers.last().expect("cache always has layers").y
    }
}

/// Per-layer parameter gradients, same shapes as the parameters.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub dw: Matrix,
    pub db: Vec<f64>,
    pub dgamma: Option<Vec<f64>>,
    pub dbeta: Option<Vec<f64>>,
}

/// Gradients for every layer of a network.
#[derive(Clone, Debug)]
pub struct NetworkGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetworkGrads {
    /// Elementwise sum; shapes must match (same architecture).
    pub fn add(&mut self, other: &NetworkGrads) {
        assert_eq!(self.layers.len(), other.layers.len(), "gradient layer count mismatch");
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.dw.data_mut().iter_mut().zip(b.dw.data()) {
                *x += y;
            }
            for (x, y) in a.db.iter_mut().zip(&b.db) {
                *x += y;
            }
            if let (Some(ga), Some(gb)) = (a.dgamma.as_mut(), b.dgamma.as_ref()) {
                for (x, y) in ga.iter_mut().zip(gb) {
                    *x += y;
                }
            }
            if let (Some(ba), Some(bb)) = (a.dbeta.as_mut(), b.dbeta.as_ref()) {
                for (x, y) in ba.iter_mut().zip(bb) {
                    *x += y;
                }
            }
        }
    }

    /// Multiplies every gradient entry by `s`.
    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.dw.scale(s);
            l.db.iter_mut().for_each(|v| *v *= s);
            if let Some(g) = l.dgamma.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
            if let Some(b) = l.dbeta.as_mut() {
                b.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

/// A dense feed-forward network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
}

impl Network {
    /// Initializes weights He-uniform for ReLU layers and Xavier-uniform
    /// otherwise; biases start at zero, batch-norm at identity.
    pub fn init(spec: NetworkSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut fan_in = spec.input_dim;
        for ls in &spec.layers {
            let bound = match ls.activation {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                _ => (6.0 / (fan_in + ls.units) as f64).sqrt(),
            };
            let mut w = Matrix::zeros(ls.units, fan_in);
            for v in w.data_mut() {
                *v = (2.0 * rng.gen::<f64>() - 1.0) * bound;
            }
            layers.push(Layer {
                w,
                b: vec![0.0; ls.units],
                bn: ls.batch_norm.then(|| BatchNorm::new(ls.units)),
                activation: ls.activation,
            });
            fan_in = ls.units;
        }
        Ok(Network { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// Inference forward pass: batch norm uses running statistics; `self` is
    /// untouched. Rows of `x` are independent samples.
    pub fn predict(&self, x: &Matrix) -> Matrix {
        self.forward_cached(x, BnStats::Running).layers.pop().expect("nonempty").y
    }

    /// Forward pass that records everything backward needs. With
    /// [`BnStats::Batch`] the pass uses training semantics but still does not
    /// mutate running statistics; call [`Network::commit_bn_updates`] with the
    /// returned cache to fold them in.
    pub fn forward_cached(&self, x: &Matrix, stats: BnStats) -> ForwardCache {
        assert_eq!(x.cols(), self.spec.input_dim, "input width mismatch");
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let mut z = cur.matmul_nt(&layer.w);
            z.add_row_broadcast(&layer.b);
            let (bn_xhat, bn_mean, bn_var, z_act) = match &layer.bn {
                None => (None, Vec::new(), Vec::new(), z),
                Some(bn) => {
                    let (mean, var) = match stats {
                        BnStats::Running => (bn.running_mean.clone(), bn.running_var.clone()),
                        BnStats::Batch => batch_moments(&z),
                    };
                    let mut xhat = z;
                    normalize_columns(&mut xhat, &mean, &var);
                    let mut out = xhat.clone();
                    let width = bn.gamma.len();
                    for row_start in (0..out.rows()).map(|r| r * width) {
                        let slice = &mut out.data_mut()[row_start..row_start + width];
                        for ((v, &g), &b) in slice.iter_mut().zip(&bn.gamma).zip(&bn.beta) {
                            *v = *v * g + b;
                        }
                    }
                    (Some(xhat), mean, var, out)
                }
            };
            let mut y = z_act;
            apply_activation(&mut y, layer.activation);
            caches.push(LayerCache { x: cur, bn_xhat, bn_mean, bn_var, y: y.clone() });
            cur = y;
        }
        ForwardCache { layers: caches, stats }
    }

    /// Folds the batch statistics recorded in `cache` into the running
    /// statistics. Only meaningful for caches built with [`BnStats::Batch`].
    pub fn commit_bn_updates(&mut self, cache: &ForwardCache) {
        if cache.stats != BnStats::Batch {
            return;
        }
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            if let Some(bn) = layer.bn.as_mut() {
                for (r, &m) in bn.running_mean.iter_mut().zip(&lc.bn_mean) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                }
                for (r, &v) in bn.running_var.iter_mut().zip(&lc.bn_var) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
                }
            }
        }
    }

    /// Backpropagates `d_out` (gradient of the loss w.r.t. the network
    /// output) through the forward pass recorded in `cache`. Returns the
    /// parameter gradients and the gradient w.r.t. the network input.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Matrix) -> (NetworkGrads, Matrix) {
        assert_eq!(cache.layers.len(), self.layers.len(), "cache does not match network");
        let mut grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        let mut d_y = d_out.clone();
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            let mut d_z = d_y;
            activation_backward(&mut d_z, &lc.y, layer.activation);
            let (dgamma, dbeta) = match (&layer.bn, &lc.bn_xhat) {
                (Some(bn), Some(xhat)) => {
                    let (dg, db, dz_lin) = batchnorm_backward(&d_z, xhat, &lc.bn_var, bn, cache.stats);
                    d_z = dz_lin;
                    (Some(dg), Some(db))
                }
                _ => (None, None),
            };
            let dw = d_z.matmul_tn(&lc.x);
            let db = d_z.column_sums();
            d_y = d_z.matmul(&layer.w);
            grads.push(LayerGrads { dw, db, dgamma, dbeta });
        }
        grads.reverse();
        (NetworkGrads { layers: grads }, d_y)
    }

    /// Zero-shaped gradients for this architecture.
    pub fn grads_like(&self) -> NetworkGrads {
        NetworkGrads {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrads {
                    dw: Matrix::zeros(l.w.rows(), l.w.cols()),
                    db: vec![0.0; l.b.len()],
                    dgamma: l.bn.as_ref().map(|bn| vec![0.0; bn.gamma.len()]),
                    dbeta: l.bn.as_ref().map(|bn| vec![0.0; bn.beta.len()]),
                })
                .collect(),
        }
    }
}

/// Per-column mean and (population) variance of `z`.
fn batch_moments(z: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = z.rows() as f64;
    let mut mean = z.column_sums();
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; z.cols()];
    for row in z.rows_iter() {
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = x - m;
            *v += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

fn normalize_columns(z: &mut Matrix, mean: &[f64], var: &[f64]) {
    let cols = z.cols();
    for row in z.data_mut().chunks_exact_mut(cols) {
        for ((v, &m), &s2) in row.iter_mut().zip(mean).zip(var) {
            *v = (*v - m) / (s2 + BN_EPS).sqrt();
        }
    }
}

fn apply_activation(y: &mut Matrix, act: Activation) {
    match act {
        Activation::Identity => {}
        Activation::Relu => y.map_inplace(|v| if v > 0.0 { v } else { 0.0 }),
        Activation::Sigmoid => y.map_inplace(|v| 1.0 / (1.0 + (-v).exp())),
        Activation::Tanh => y.map_inplace(f64::tanh),
        Activation::Softmax => {
            let cols = y.cols();
            for row in y.data_mut().chunks_exact_mut(cols) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
    }
}

/// Turns `d_y` (gradient w.r.t. activation output) into the gradient w.r.t.
/// the pre-activation, in place, given the recorded output `y`.
fn activation_backward(d_y: &mut Matrix, y: &Matrix, act: Activation) {
    match act {
        Activation::Identity => {}
        Activation::Relu => {
            for (g, &v) in d_y.data_mut().iter_mut().zip(y.data()) {
                if v <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        Activation::Sigmoid => {
            for (g, &v) in d_y.data_mut().iter_mut().zip(y.data()) {
                *g *= v * (1.0 - v);
            }
        }
        Activation::Tanh => {
            for (g, &v) in d_y.data_mut().iter_mut().zip(y.data()) {
                *g *= 1.0 - v * v;
            }
        }
        Activation::Softmax => {
            let cols = d_y.cols();
            for (grow, yrow) in d_y.data_mut().chunks_exact_mut(cols).zip(y.rows_iter()) {
                let dot: f64 = grow.iter().zip(yrow).map(|(&g, &p)| g * p).sum();
                for (g, &p) in grow.iter_mut().zip(yrow) {
                    *g = p * (*g - dot);
                }
            }
        }
    }
}

/// Batch-norm backward. With [`BnStats::Batch`] the batch mean/var depend on
/// the inputs, so their gradient terms are included; with running statistics
/// the normalization is an affine map and those terms vanish.
fn batchnorm_backward(
    d_y: &Matrix,
    xhat: &Matrix,
    var: &[f64],
    bn: &BatchNorm,
    stats: BnStats,
) -> (Vec<f64>, Vec<f64>, Matrix) {
    let n = d_y.rows();
    let cols = d_y.cols();
    let nf = n as f64;
    let mut dgamma = vec![0.0; cols];
    let mut dbeta = vec![0.0; cols];
    for (grow, xrow) in d_y.rows_iter().zip(xhat.rows_iter()) {
        for ((dg, dbta), (&g, &xh)) in dgamma.iter_mut().zip(dbeta.iter_mut()).zip(grow.iter().zip(xrow)) {
            *dg += g * xh;
            *dbta += g;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut d_x = Matrix::zeros(n, cols);
    match stats {
        BnStats::Running => {
            for r in 0..n {
                let grow = d_y.row(r);
                let orow = d_x.row_mut(r);
                for ((o, &g), (&gam, &istd)) in
                    orow.iter_mut().zip(grow).zip(bn.gamma.iter().zip(&inv_std))
                {
                    *o = g * gam * istd;
                }
            }
        }
        BnStats::Batch => {
            // dx = gamma * istd / n * (n * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
            let mut sum_dxhat = vec![0.0; cols];
            let mut sum_dxhat_xhat = vec![0.0; cols];
            for (grow, xrow) in d_y.rows_iter().zip(xhat.rows_iter()) {
                for (j, (&g, &xh)) in grow.iter().zip(xrow).enumerate() {
                    let dxh = g * bn.gamma[j];
                    sum_dxhat[j] += dxh;
                    sum_dxhat_xhat[j] += dxh * xh;
                }
            }
            for r in 0..n {
                let grow = d_y.row(r);
                let xrow = xhat.row(r);
                let orow = d_x.row_mut(r);
                for j in 0..cols {
                    let dxh = grow[j] * bn.gamma[j];
                    orow[j] = inv_std[j] / nf
                        * (nf * dxh - sum_dxhat[j] - xrow[j] * sum_dxhat_xhat[j]);
                }
            }
        }
    }
    (dgamma, dbeta, d_x)
}

/// Derives an independent RNG for a named role from a base seed, so separate
/// stages draw from non-overlapping streams no matter the call order.
pub fn rng_for(seed: u64, role: &str) -> ChaCha8Rng {
    use rand::SeedableRng;
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(role.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
