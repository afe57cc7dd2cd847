//! Gradient-descent optimizers over [`Network`] parameters.

use super::{DualBranchNet, DualGrads, Network, NetworkGrads};
use serde::{Deserialize, Serialize};

/// Which optimizer a training config asks for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Adam moment estimates for one parameter tensor, stored flat.
#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Moments { m: vec![0.0; len], v: vec![0.0; len] }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: f64) {
        debug_assert_eq!(params.len(), grads.len());
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-layer Adam state for one network (weights, biases, batch-norm scale
/// and shift).
#[derive(Clone, Debug)]
struct AdamLayer {
    w: Moments,
    b: Moments,
    gamma: Option<Moments>,
    beta: Option<Moments>,
}

/// An optimizer bound to one network architecture.
#[derive(Clone, Debug)]
pub struct Optimizer {
    inner: Inner,
}

#[derive(Clone, Debug)]
enum Inner {
    Sgd { lr: f64 },
    Adam { lr: f64, t: u64, layers: Vec<AdamLayer> },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, net: &Network) -> Self {
        let inner = match kind {
            OptimizerKind::Sgd => Inner::Sgd { lr },
            OptimizerKind::Adam => Inner::Adam {
                lr,
                t: 0,
                layers: net
                    .layers()
                    .iter()
                    .map(|l| AdamLayer {
                        w: Moments::new(l.w.rows() * l.w.cols()),
                        b: Moments::new(l.b.len()),
                        gamma: l.bn.as_ref().map(|bn| Moments::new(bn.gamma.len())),
                        beta: l.bn.as_ref().map(|bn| Moments::new(bn.beta.len())),
                    })
                    .collect(),
            },
        };
        Optimizer { inner }
    }

    /// Applies one update from `grads` to `net`'s parameters.
    pub fn step(&mut self, net: &mut Network, grads: &NetworkGrads) {
        match &mut self.inner {
            Inner::Sgd { lr } => {
                let lr = *lr;
                for (layer, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
                    for (p, &d) in layer.w.data_mut().iter_mut().zip(g.dw.data()) {
                        *p -= lr * d;
                    }
                    for (p, &d) in layer.b.iter_mut().zip(&g.db) {
                        *p -= lr * d;
                    }
                    if let Some(bn) = layer.bn.as_mut() {
                        if let Some(dg) = &g.dgamma {
                            for (p, &d) in bn.gamma.iter_mut().zip(dg) {
                                *p -= lr * d;
                            }
                        }
                        if let Some(db) = &g.dbeta {
                            for (p, &d) in bn.beta.iter_mut().zip(db) {
                                *p -= lr * d;
                            }
                        }
                    }
                }
            }
            Inner::Adam { lr, t, layers } => {
                *t += 1;
                let tf = *t as f64;
                let lr = *lr;
                for ((layer, g), state) in
                    net.layers_mut().iter_mut().zip(&grads.layers).zip(layers.iter_mut())
                {
                    state.w.step(layer.w.data_mut(), g.dw.data(), lr, tf);
                    state.b.step(&mut layer.b, &g.db, lr, tf);
                    if let (Some(bn), Some(gs), Some(dg)) =
                        (layer.bn.as_mut(), state.gamma.as_mut(), g.dgamma.as_ref())
                    {
                        gs.step(&mut bn.gamma, dg, lr, tf);
                    }
                    if let (Some(bn), Some(bs), Some(db)) =
                        (layer.bn.as_mut(), state.beta.as_mut(), g.dbeta.as_ref())
                    {
                        bs.step(&mut bn.beta, db, lr, tf);
                    }
                }
            }
        }
    }
}

/// Optimizer state covering all three sub-networks of a [`DualBranchNet`].
///
/// One [`DualOptimizer::step`] advances every sub-network together, so the
/// shared step count behaves as if a single optimizer owned all parameters.
#[derive(Clone, Debug)]
pub struct DualOptimizer {
    branch_a: Optimizer,
    branch_b: Optimizer,
    head: Optimizer,
}

impl DualOptimizer {
    pub fn new(kind: OptimizerKind, lr: f64, net: &DualBranchNet) -> Self {
        DualOptimizer {
            branch_a: Optimizer::new(kind, lr, &net.branch_a),
            branch_b: Optimizer::new(kind, lr, &net.branch_b),
            head: Optimizer::new(kind, lr, &net.head),
        }
    }

    /// Applies one update from `grads` to all of `net`'s parameters.
    pub fn step(&mut self, net: &mut DualBranchNet, grads: &DualGrads) {
        self.branch_a.step(&mut net.branch_a, &grads.branch_a);
        self.branch_b.step(&mut net.branch_b, &grads.branch_b);
        self.head.step(&mut net.head, &grads.head);
    }
}
