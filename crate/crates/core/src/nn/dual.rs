//! A two-input network: two independent branches whose outputs are
//! concatenated and fed through a head that ends in a single sigmoid score.
//!
//! Both the training-time discriminator and the strongest membership attack
//! share this shape: one branch reads a confidence vector, the other reads a
//! one-hot label.

use super::{BnStats, ForwardCache, Matrix, Network, NetworkGrads, NetworkSpec};
use crate::Result;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Branch-plus-head composite network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualBranchNet {
    pub branch_a: Network,
    pub branch_b: Network,
    pub head: Network,
}

/// Forward record for a [`DualBranchNet`].
pub struct DualCache {
    a: ForwardCache,
    b: ForwardCache,
    head: ForwardCache,
}

impl DualCache {
    pub fn output(&self) -> &Matrix {
        self.head.output()
    }
}

/// Gradients for all three sub-networks.
pub struct DualGrads {
    pub branch_a: NetworkGrads,
    pub branch_b: NetworkGrads,
    pub head: NetworkGrads,
}

impl DualGrads {
    /// Elementwise sum across all three sub-networks.
    pub fn add(&mut self, other: &DualGrads) {
        self.branch_a.add(&other.branch_a);
        self.branch_b.add(&other.branch_b);
        self.head.add(&other.head);
    }
}

impl DualBranchNet {
    /// Initializes the three sub-networks in order (branch a, branch b, head)
    /// from one RNG stream. The head's input width must equal the sum of the
    /// branch output widths.
    pub fn init(
        branch_a: NetworkSpec,
        branch_b: NetworkSpec,
        head: NetworkSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if head.input_dim != branch_a.output_dim() + branch_b.output_dim() {
            return Err(crate::PurifyError::Config(format!(
                "head input {} does not match branch outputs {} + {}",
                head.input_dim,
                branch_a.output_dim(),
                branch_b.output_dim()
            )));
        }
        Ok(DualBranchNet {
            branch_a: Network::init(branch_a, rng)?,
            branch_b: Network::init(branch_b, rng)?,
            head: Network::init(head, rng)?,
        })
    }

    /// Inference forward pass over paired inputs (same row count).
    pub fn predict(&self, xa: &Matrix, xb: &Matrix) -> Matrix {
        let a = self.branch_a.predict(xa);
        let b = self.branch_b.predict(xb);
        self.head.predict(&a.hstack(&b))
    }

    /// Forward pass recording caches for backpropagation.
    pub fn forward_cached(&self, xa: &Matrix, xb: &Matrix, stats: BnStats) -> DualCache {
        let a = self.branch_a.forward_cached(xa, stats);
        let b = self.branch_b.forward_cached(xb, stats);
        let joined = a.output().hstack(b.output());
        let head = self.head.forward_cached(&joined, stats);
        DualCache { a, b, head }
    }

    /// Backpropagates the loss gradient w.r.t. the head output; returns
    /// parameter gradients and the gradients w.r.t. both inputs.
    pub fn backward(&self, cache: &DualCache, d_out: &Matrix) -> (DualGrads, Matrix, Matrix) {
        let (head_grads, d_joined) = self.head.backward(&cache.head, d_out);
        let a_width = self.branch_a.output_dim();
        let n = d_joined.rows();
        let mut d_a = Matrix::zeros(n, a_width);
        let mut d_b = Matrix::zeros(n, d_joined.cols() - a_width);
        for r in 0..n {
            let row = d_joined.row(r);
            d_a.row_mut(r).copy_from_slice(&row[..a_width]);
            d_b.row_mut(r).copy_from_slice(&row[a_width..]);
        }
        let (a_grads, d_xa) = self.branch_a.backward(&cache.a, &d_a);
        let (b_grads, d_xb) = self.branch_b.backward(&cache.b, &d_b);
        (DualGrads { branch_a: a_grads, branch_b: b_grads, head: head_grads }, d_xa, d_xb)
    }
}
