//! The attacker suite: membership-inference attacks (shadow-model,
//! confidence-and-label, label-only) and the black-box inversion attack.
//!
//! Every attacker interacts with the classifier under attack exclusively
//! through the [`Oracle`] interface — it submits feature rows and reads
//! confidence rows, nothing else — so any defense wrapped around the model
//! is transparent to the attack code.

use crate::data::{LabeledDataset, Splits};
use crate::nn::loss::{binary_cross_entropy, binary_cross_entropy_grad, mse, mse_grad};
use crate::nn::optim::{DualOptimizer, Optimizer, OptimizerKind};
use crate::nn::{
    argmax, one_hot_rows, rng_for, Activation, BnStats, DualBranchNet, Matrix, Network,
    NetworkSpec,
};
use crate::purifier::{confidence_label_net, purify, train_purifier, PurifierBundle, PurifierHyper};
use crate::target::{train_target, ModelOracle, Oracle, TargetConfig};
use crate::{PurifyError, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// The data an attacker controls: the labeled member and non-member subsets
/// it trains on, plus the held-out evaluation sets the defender measures
/// every attack on.
#[derive(Debug)]
pub struct AttackDataView<'a> {
    dataset: &'a LabeledDataset,
    attacker_members: &'a [usize],
    attacker_nonmembers: &'a [usize],
    eval_members: &'a [usize],
    eval_nonmembers: &'a [usize],
}

impl<'a> AttackDataView<'a> {
    /// Builds the view from split indices, rejecting any overlap between the
    /// attacker's training rows and the evaluation rows.
    pub fn new(dataset: &'a LabeledDataset, splits: &'a Splits) -> Result<Self> {
        let view = AttackDataView {
            dataset,
            attacker_members: &splits.d_a,
            attacker_nonmembers: &splits.d_a_prime,
            eval_members: splits.eval_members(),
            eval_nonmembers: splits.eval_nonmembers(),
        };
        let max = view
            .attacker_members
            .iter()
            .chain(view.attacker_nonmembers)
            .chain(view.eval_members)
            .chain(view.eval_nonmembers)
            .max();
        if let Some(&max) = max {
            if max >= dataset.len() {
                return Err(PurifyError::Config(format!(
                    "split index {max} outside the dataset of {} rows",
                    dataset.len()
                )));
            }
        }
        let attacker: HashSet<usize> =
            view.attacker_members.iter().chain(view.attacker_nonmembers).copied().collect();
        if view.eval_members.iter().chain(view.eval_nonmembers).any(|i| attacker.contains(i)) {
            return Err(PurifyError::Config(
                "evaluation rows overlap the attacker's training rows".into(),
            ));
        }
        Ok(view)
    }

    /// All attacker rows pooled without the member/non-member distinction —
    /// the only access the shadow-model attack gets.
    fn pooled_attacker_indices(&self) -> Vec<usize> {
        self.attacker_members.iter().chain(self.attacker_nonmembers).copied().collect()
    }

    /// The attacker's known members (used by attacks that train on real
    /// membership labels).
    pub fn attacker_members(&self) -> LabeledDataset {
        self.dataset.select(self.attacker_members)
    }

    /// The attacker's known non-members.
    pub fn attacker_nonmembers(&self) -> LabeledDataset {
        self.dataset.select(self.attacker_nonmembers)
    }

    /// Members the attacks are evaluated on (never shown during training).
    pub fn eval_members(&self) -> LabeledDataset {
        self.dataset.select(self.eval_members)
    }

    /// Non-members the attacks are evaluated on.
    pub fn eval_nonmembers(&self) -> LabeledDataset {
        self.dataset.select(self.eval_nonmembers)
    }

    fn num_classes(&self) -> usize {
        self.dataset.num_classes()
    }
}

/// A trained membership-inference attack. Scoring takes the oracle's
/// confidence rows (already passed through whatever defense is deployed) and
/// the true class labels; only the variants that legitimately know the label
/// read it.
#[derive(Clone, Debug, PartialEq)]
pub enum MembershipAttack {
    /// Shadow-model attack: a binary net over sorted (optionally truncated)
    /// confidence vectors. The adaptive variant carries the attacker's own
    /// surrogate purifier and pipes every query through it first.
    SortedConfidence {
        net: Network,
        top_k: Option<usize>,
        surrogate: Option<Box<PurifierBundle>>,
    },
    /// Confidence-and-label attack: a two-branch net over the confidence
    /// vector and the one-hot true label.
    ConfidenceAndLabel { net: DualBranchNet },
    /// Label-only attack: predicts member exactly when the oracle classifies
    /// the sample correctly. No trained parameters.
    LabelOnly,
}

impl MembershipAttack {
    pub fn kind(&self) -> &'static str {
        match self {
            MembershipAttack::SortedConfidence { surrogate: None, .. } => "mlleaks",
            MembershipAttack::SortedConfidence { surrogate: Some(_), .. } => "mlleaks-a",
            MembershipAttack::ConfidenceAndLabel { .. } => "nsh",
            MembershipAttack::LabelOnly => "label",
        }
    }

    /// Membership score in [0, 1] per row; above 0.5 means "member".
    pub fn score(&self, conf: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
        match self {
            MembershipAttack::SortedConfidence { net, top_k, surrogate } => {
                let defended;
                let seen = match surrogate {
                    Some(bundle) => {
                        defended = purify(bundle, conf)?;
                        &defended
                    }
                    None => conf,
                };
                let input = mlleaks_input(seen, *top_k)?;
                if input.cols() != net.input_dim() {
                    return Err(PurifyError::Shape(format!(
                        "attack net expects {} columns, got {}",
                        net.input_dim(),
                        input.cols()
                    )));
                }
                Ok(net.predict(&input).data().to_vec())
            }
            MembershipAttack::ConfidenceAndLabel { net } => {
                check_labels(labels, conf)?;
                let onehot = one_hot_rows(labels, conf.cols());
                Ok(net.predict(conf, &onehot).data().to_vec())
            }
            MembershipAttack::LabelOnly => {
                check_labels(labels, conf)?;
                Ok(conf
                    .rows_iter()
                    .zip(labels)
                    .map(|(row, &y)| if argmax(row) == y { 1.0 } else { 0.0 })
                    .collect())
            }
        }
    }
}

fn check_labels(labels: &[usize], conf: &Matrix) -> Result<()> {
    if labels.len() != conf.rows() {
        return Err(PurifyError::Shape(format!(
            "{} labels for {} confidence rows",
            labels.len(),
            conf.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= conf.cols()) {
        return Err(PurifyError::Data(format!(
            "label {bad} outside the {} classes the oracle reports",
            conf.cols()
        )));
    }
    Ok(())
}

/// Shadow-model attack hyperparameters. The shadow classifier mirrors the
/// target's architecture; its seed field is ignored (the attack derives its
/// own).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlleaksConfig {
    pub shadow: TargetConfig,
    pub attack_epochs: usize,
    pub attack_batch_size: usize,
    pub attack_learning_rate: f64,
    /// Keep only the highest `top_k` sorted confidences; `None` keeps all.
    pub top_k: Option<usize>,
}

impl Default for MlleaksConfig {
    fn default() -> Self {
        MlleaksConfig {
            shadow: TargetConfig { epochs: 25, ..TargetConfig::default() },
            attack_epochs: 50,
            attack_batch_size: 128,
            attack_learning_rate: 1e-3,
            top_k: None,
        }
    }
}

/// Confidence-and-label attack hyperparameters. Every training batch holds
/// `batch_half` members and `batch_half` non-members.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NshConfig {
    pub epochs: usize,
    pub batch_half: usize,
    pub learning_rate: f64,
}

impl Default for NshConfig {
    fn default() -> Self {
        NshConfig { epochs: 50, batch_half: 64, learning_rate: 3e-4 }
    }
}

/// Inversion attack hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InversionConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig { epochs: 15, batch_size: 128, learning_rate: 2e-4 }
    }
}

/// Maps a confidence vector back to a feature-vector estimate; outputs lie
/// in [0, 1] via the sigmoid output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionModel {
    pub net: Network,
}

impl InversionModel {
    pub fn reconstruct(&self, conf: &Matrix) -> Result<Matrix> {
        if conf.cols() != self.net.input_dim() {
            return Err(PurifyError::Shape(format!(
                "inversion model expects {} confidence columns, got {}",
                self.net.input_dim(),
                conf.cols()
            )));
        }
        Ok(self.net.predict(conf))
    }
}

/// Deterministic sub-seed so each stage draws from an independent stream.
fn derived_seed(seed: u64, role: &str) -> u64 {
    rng_for(seed, role).gen()
}

/// Sorts every confidence row descending: the attack input becomes invariant
/// under any relabeling of the oracle's classes.
pub fn sort_rows_descending(conf: &Matrix) -> Matrix {
    let mut out = conf.clone();
    let cols = out.cols();
    for row in out.data_mut().chunks_exact_mut(cols) {
        row.sort_unstable_by(|a, b| b.total_cmp(a));
    }
    out
}

fn keep_left_columns(m: &Matrix, k: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), k);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[..k]);
    }
    out
}

fn mlleaks_input(conf: &Matrix, top_k: Option<usize>) -> Result<Matrix> {
    let sorted = sort_rows_descending(conf);
    match top_k {
        None => Ok(sorted),
        Some(k) if (1..=conf.cols()).contains(&k) => Ok(keep_left_columns(&sorted, k)),
        Some(k) => Err(PurifyError::Config(format!(
            "top_k must lie in 1..={}, got {k}",
            conf.cols()
        ))),
    }
}

struct ShadowConfidences {
    shadow: Network,
    member_conf: Matrix,
    nonmember_conf: Matrix,
}

/// Trains the attacker's own shadow classifier on half of the pooled
/// attacker rows and queries it for member (shadow-training) and non-member
/// confidences. Membership labels of the pool are never consulted.
fn shadow_confidences(
    view: &AttackDataView,
    shadow_cfg: &TargetConfig,
    seed: u64,
    role: &str,
) -> Result<ShadowConfidences> {
    let mut pool = view.pooled_attacker_indices();
    if pool.len() < 2 {
        return Err(PurifyError::Data(format!(
            "shadow training needs at least 2 attacker rows, got {}",
            pool.len()
        )));
    }
    pool.shuffle(&mut rng_for(seed, &format!("{role}/split")));
    let half = pool.len() / 2;
    let shadow_in = view.dataset.select(&pool[..half]);
    let shadow_out = view.dataset.select(&pool[half..]);

    let mut cfg = shadow_cfg.clone();
    cfg.seed = derived_seed(seed, &format!("{role}/shadow-seed"));
    let shadow = train_target(&shadow_in, &cfg)?;
    let oracle = ModelOracle::new(&shadow);
    let member_conf = oracle.predict(shadow_in.features());
    let nonmember_conf = oracle.predict(shadow_out.features());
    Ok(ShadowConfidences { shadow, member_conf, nonmember_conf })
}

/// Trains a binary classifier on member-labeled vs non-member-labeled input
/// rows with binary cross-entropy.
fn train_binary_net(
    member_rows: &Matrix,
    nonmember_rows: &Matrix,
    spec: NetworkSpec,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
    role: &str,
) -> Result<Network> {
    if batch_size == 0 {
        return Err(PurifyError::Config("batch size must be positive".into()));
    }
    let x = member_rows.vstack(nonmember_rows);
    let mut targets = vec![1.0; member_rows.rows()];
    targets.extend(std::iter::repeat(0.0).take(nonmember_rows.rows()));

    let mut net = Network::init(spec, &mut rng_for(seed, &format!("{role}/init")))?;
    let mut opt = Optimizer::new(OptimizerKind::Adam, learning_rate, &net);
    let mut shuffle_rng = rng_for(seed, &format!("{role}/shuffle"));
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let xb = x.select_rows(chunk);
            let tb: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let cache = net.forward_cached(&xb, BnStats::Batch);
            let loss = binary_cross_entropy(cache.output(), &tb);
            if !loss.is_finite() {
                return Err(PurifyError::Numeric(format!(
                    "attack training diverged at epoch {epoch}: loss {loss}"
                )));
            }
            let d_out = binary_cross_entropy_grad(cache.output(), &tb);
            let (grads, _) = net.backward(&cache, &d_out);
            opt.step(&mut net, &grads);
            epoch_loss += loss;
            batches += 1;
        }
        log::info!(
            "{role} epoch {}/{epochs}: loss {:.6}",
            epoch + 1,
            epoch_loss / batches.max(1) as f64
        );
    }
    Ok(net)
}

fn binary_attack_spec(input_dim: usize) -> NetworkSpec {
    NetworkSpec::mlp(&[input_dim, 128, 1], Activation::Relu, Activation::Sigmoid)
}

fn check_oracle_classes(oracle: &dyn Oracle, view: &AttackDataView) -> Result<()> {
    if oracle.num_classes() != view.num_classes() {
        return Err(PurifyError::Config(format!(
            "oracle reports {} classes but the dataset has {}",
            oracle.num_classes(),
            view.num_classes()
        )));
    }
    Ok(())
}

/// Shadow-model membership attack: trains a shadow classifier on half of the
/// pooled attacker rows, labels its own training rows as members, and fits a
/// binary net on the shadow's sorted confidence vectors. The target oracle
/// itself is never queried during training.
pub fn mlleaks_attack(
    oracle: &dyn Oracle,
    view: &AttackDataView,
    cfg: &MlleaksConfig,
    seed: u64,
) -> Result<MembershipAttack> {
    check_oracle_classes(oracle, view)?;
    let shadow = shadow_confidences(view, &cfg.shadow, seed, "attack/mlleaks")?;
    let member_in = mlleaks_input(&shadow.member_conf, cfg.top_k)?;
    let nonmember_in = mlleaks_input(&shadow.nonmember_conf, cfg.top_k)?;
    let net = train_binary_net(
        &member_in,
        &nonmember_in,
        binary_attack_spec(member_in.cols()),
        cfg.attack_epochs,
        cfg.attack_batch_size,
        cfg.attack_learning_rate,
        seed,
        "attack/mlleaks",
    )?;
    Ok(MembershipAttack::SortedConfidence { net, top_k: cfg.top_k, surrogate: None })
}

/// Defense-aware shadow-model attack: the attacker additionally trains a
/// surrogate purifier on its shadow's confidences over the reference set and
/// pipes every confidence vector through it, at training and at query time.
pub fn mlleaks_adaptive(
    oracle: &dyn Oracle,
    view: &AttackDataView,
    reference: &LabeledDataset,
    surrogate_hyper: &PurifierHyper,
    cfg: &MlleaksConfig,
    seed: u64,
) -> Result<MembershipAttack> {
    check_oracle_classes(oracle, view)?;
    let shadow = shadow_confidences(view, &cfg.shadow, seed, "attack/mlleaks-a")?;
    let shadow_oracle = ModelOracle::new(&shadow.shadow);
    let surrogate = train_purifier(
        &shadow_oracle,
        reference,
        surrogate_hyper,
        derived_seed(seed, "attack/mlleaks-a/surrogate"),
    )?;
    let member_in = mlleaks_input(&purify(&surrogate, &shadow.member_conf)?, cfg.top_k)?;
    let nonmember_in = mlleaks_input(&purify(&surrogate, &shadow.nonmember_conf)?, cfg.top_k)?;
    let net = train_binary_net(
        &member_in,
        &nonmember_in,
        binary_attack_spec(member_in.cols()),
        cfg.attack_epochs,
        cfg.attack_batch_size,
        cfg.attack_learning_rate,
        seed,
        "attack/mlleaks-a",
    )?;
    Ok(MembershipAttack::SortedConfidence {
        net,
        top_k: cfg.top_k,
        surrogate: Some(Box::new(surrogate)),
    })
}

/// Confidence-and-label membership attack: queries the deployed oracle for
/// the attacker's known members and non-members and trains the two-branch
/// net on balanced batches.
pub fn nsh_attack(
    oracle: &dyn Oracle,
    view: &AttackDataView,
    cfg: &NshConfig,
    seed: u64,
) -> Result<MembershipAttack> {
    check_oracle_classes(oracle, view)?;
    if cfg.batch_half == 0 {
        return Err(PurifyError::Config("batch_half must be positive".into()));
    }
    let members = view.attacker_members();
    let nonmembers = view.attacker_nonmembers();
    if members.is_empty() || nonmembers.is_empty() {
        return Err(PurifyError::Data(
            "the confidence-and-label attack needs both known members and known non-members"
                .into(),
        ));
    }
    let k = oracle.num_classes();
    let conf_m = oracle.predict(members.features());
    let conf_n = oracle.predict(nonmembers.features());
    let onehot_m = one_hot_rows(members.labels(), k);
    let onehot_n = one_hot_rows(nonmembers.labels(), k);

    let mut net = confidence_label_net(k, &mut rng_for(seed, "attack/nsh/init"))?;
    let mut opt = DualOptimizer::new(OptimizerKind::Adam, cfg.learning_rate, &net);
    let mut shuffle_rng = rng_for(seed, "attack/nsh/shuffle");
    let per_side = members.len().min(nonmembers.len());
    let mut member_order: Vec<usize> = (0..members.len()).collect();
    let mut nonmember_order: Vec<usize> = (0..nonmembers.len()).collect();
    for epoch in 0..cfg.epochs {
        member_order.shuffle(&mut shuffle_rng);
        nonmember_order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (mc, nc) in member_order[..per_side]
            .chunks(cfg.batch_half)
            .zip(nonmember_order[..per_side].chunks(cfg.batch_half))
        {
            let conf = conf_m.select_rows(mc).vstack(&conf_n.select_rows(nc));
            let onehot = onehot_m.select_rows(mc).vstack(&onehot_n.select_rows(nc));
            let mut targets = vec![1.0; mc.len()];
            targets.extend(std::iter::repeat(0.0).take(nc.len()));
            let cache = net.forward_cached(&conf, &onehot, BnStats::Batch);
            let loss = binary_cross_entropy(cache.output(), &targets);
            if !loss.is_finite() {
                return Err(PurifyError::Numeric(format!(
                    "attack training diverged at epoch {epoch}: loss {loss}"
                )));
            }
            let d_out = binary_cross_entropy_grad(cache.output(), &targets);
            let (grads, _, _) = net.backward(&cache, &d_out);
            opt.step(&mut net, &grads);
            epoch_loss += loss;
            batches += 1;
        }
        log::info!(
            "attack/nsh epoch {}/{}: loss {:.6}",
            epoch + 1,
            cfg.epochs,
            epoch_loss / batches.max(1) as f64
        );
    }
    Ok(MembershipAttack::ConfidenceAndLabel { net })
}

/// Label-only membership attack: member exactly when the oracle's top class
/// matches the true label. Nothing to train.
pub fn label_attack() -> MembershipAttack {
    MembershipAttack::LabelOnly
}

/// Trains the inversion model to reconstruct feature vectors from the
/// deployed oracle's confidences over the auxiliary set.
pub fn train_inversion_attack(
    oracle: &dyn Oracle,
    auxiliary: &LabeledDataset,
    cfg: &InversionConfig,
    seed: u64,
) -> Result<InversionModel> {
    if auxiliary.is_empty() {
        return Err(PurifyError::Data("inversion training needs a non-empty auxiliary set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(PurifyError::Config("batch size must be positive".into()));
    }
    let conf = oracle.predict(auxiliary.features());
    let spec = NetworkSpec::mlp(
        &[oracle.num_classes(), 512, 1024, auxiliary.feature_dim()],
        Activation::Relu,
        Activation::Sigmoid,
    );
    let mut net = Network::init(spec, &mut rng_for(seed, "attack/inversion/init"))?;
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.learning_rate, &net);
    let mut shuffle_rng = rng_for(seed, "attack/inversion/shuffle");
    let mut order: Vec<usize> = (0..auxiliary.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = conf.select_rows(chunk);
            let tb = auxiliary.features().select_rows(chunk);
            let cache = net.forward_cached(&xb, BnStats::Batch);
            let loss = mse(cache.output(), &tb);
            if !loss.is_finite() {
                return Err(PurifyError::Numeric(format!(
                    "inversion training diverged at epoch {epoch}: loss {loss}"
                )));
            }
            let d_out = mse_grad(cache.output(), &tb);
            let (grads, _) = net.backward(&cache, &d_out);
            opt.step(&mut net, &grads);
            epoch_loss += loss;
            batches += 1;
        }
        log::info!(
            "attack/inversion epoch {}/{}: loss {:.6}",
            epoch + 1,
            cfg.epochs,
            epoch_loss / batches.max(1) as f64
        );
    }
    Ok(InversionModel { net })
}

/// Membership-inference accuracy at threshold 0.5 over a balanced union of
/// members and non-members (each side truncated to the smaller count).
pub fn evaluate_membership(
    attack: &MembershipAttack,
    oracle: &dyn Oracle,
    members: &LabeledDataset,
    nonmembers: &LabeledDataset,
) -> Result<f64> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(PurifyError::Data(
            "membership evaluation needs non-empty member and non-member sets".into(),
        ));
    }
    let n = members.len().min(nonmembers.len());
    let keep: Vec<usize> = (0..n).collect();
    let members = members.select(&keep);
    let nonmembers = nonmembers.select(&keep);

    let scores_m = attack.score(&oracle.predict(members.features()), members.labels())?;
    let scores_n = attack.score(&oracle.predict(nonmembers.features()), nonmembers.labels())?;
    for &s in scores_m.iter().chain(&scores_n) {
        if !(0.0..=1.0).contains(&s) {
            return Err(PurifyError::Numeric(format!("membership score {s} outside [0, 1]")));
        }
    }
    let correct = scores_m.iter().filter(|&&s| s > 0.5).count()
        + scores_n.iter().filter(|&&s| s <= 0.5).count();
    Ok(correct as f64 / (2 * n) as f64)
}
