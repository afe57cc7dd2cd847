//! Property-level contracts of the purification defense: finite-difference
//! verification of the composite generator gradient, parameter isolation of
//! the three training steps, simplex preservation under purification, and
//! cluster tightening from reconstruction-only training.

use proptest::prelude::*;
use purify_core::data::{allocate, generate_synthetic, AllocationConfig, SyntheticSpec};
use purify_core::nn::optim::{DualOptimizer, Optimizer, OptimizerKind};
use purify_core::nn::{
    rng_for, Activation, BnStats, DualBranchNet, LayerSpec, Matrix, Network, NetworkGrads,
    NetworkSpec,
};
use purify_core::purifier::{
    predicted_dispersion, purifier_composite_grads, purify, train_purifier, train_step_g,
    train_step_h, train_step_i, LossTrace, PurifierBundle, PurifierHyper, PurifierMode,
};
use purify_core::target::{train_target, ModelOracle, Oracle, TargetConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const FD_H: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-8;

fn close(analytic: f64, fd: f64) -> bool {
    if analytic.abs() <= ABS_FLOOR && fd.abs() <= ABS_FLOOR {
        return true;
    }
    (analytic - fd).abs() / analytic.abs().max(fd.abs()) <= REL_TOL
}

#[derive(Clone, Copy, Debug)]
enum Field {
    W,
    B,
    Gamma,
    Beta,
}

fn params_of(net: &Network) -> Vec<(usize, Field, usize)> {
    let mut out = Vec::new();
    for (li, layer) in net.layers().iter().enumerate() {
        for i in 0..layer.w.data().len() {
            out.push((li, Field::W, i));
        }
        for i in 0..layer.b.len() {
            out.push((li, Field::B, i));
        }
        if let Some(bn) = &layer.bn {
            for i in 0..bn.gamma.len() {
                out.push((li, Field::Gamma, i));
            }
            for i in 0..bn.beta.len() {
                out.push((li, Field::Beta, i));
            }
        }
    }
    out
}

fn param_get(net: &Network, p: (usize, Field, usize)) -> f64 {
    let layer = &net.layers()[p.0];
    match p.1 {
        Field::W => layer.w.data()[p.2],
        Field::B => layer.b[p.2],
        Field::Gamma => layer.bn.as_ref().unwrap().gamma[p.2],
        Field::Beta => layer.bn.as_ref().unwrap().beta[p.2],
    }
}

fn param_set(net: &mut Network, p: (usize, Field, usize), v: f64) {
    let layer = &mut net.layers_mut()[p.0];
    match p.1 {
        Field::W => layer.w.data_mut()[p.2] = v,
        Field::B => layer.b[p.2] = v,
        Field::Gamma => layer.bn.as_mut().unwrap().gamma[p.2] = v,
        Field::Beta => layer.bn.as_mut().unwrap().beta[p.2] = v,
    }
}

fn grad_get(grads: &NetworkGrads, p: (usize, Field, usize)) -> f64 {
    let lg = &grads.layers[p.0];
    match p.1 {
        Field::W => lg.dw.data()[p.2],
        Field::B => lg.db[p.2],
        Field::Gamma => lg.dgamma.as_ref().unwrap()[p.2],
        Field::Beta => lg.dbeta.as_ref().unwrap()[p.2],
    }
}

fn random_simplex(rows: usize, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, k);
    for r in 0..rows {
        let mut weights: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0f64).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        m.row_mut(r).copy_from_slice(&weights);
    }
    m
}

fn random_unit_features(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, d);
    m.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
    m
}

/// Smooth stand-ins for the production shapes: tanh hidden layers keep the
/// composite loss differentiable at the sample point, so the central
/// difference measures the same function the backward pass differentiates.
fn smooth_models(k: usize, d: usize, rng: &mut ChaCha8Rng) -> (Network, Network, DualBranchNet) {
    let g = Network::init(
        NetworkSpec {
            input_dim: k,
            layers: vec![
                LayerSpec::with_batch_norm(6, Activation::Tanh),
                LayerSpec::with_batch_norm(4, Activation::Tanh),
                LayerSpec::new(k, Activation::Softmax),
            ],
        },
        rng,
    )
    .unwrap();
    let h = Network::init(
        NetworkSpec::mlp(&[k, 8, d], Activation::Tanh, Activation::Sigmoid),
        rng,
    )
    .unwrap();
    let i = DualBranchNet::init(
        NetworkSpec::mlp(&[k, 8, 4], Activation::Tanh, Activation::Tanh),
        NetworkSpec::mlp(&[k, 6, 4], Activation::Tanh, Activation::Tanh),
        NetworkSpec::mlp(&[8, 6, 1], Activation::Tanh, Activation::Sigmoid),
        rng,
    )
    .unwrap();
    (g, h, i)
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let (k, d, n) = (5, 4, 8);
    let mut rng = rng_for(21, "props/fd");
    let (g, h, i) = smooth_models(k, d, &mut rng);
    let conf = random_simplex(n, k, &mut rng);
    let x = random_unit_features(n, d, &mut rng);

    let mut hyper = PurifierHyper::for_mode(PurifierMode::Both);
    hyper.lambda = 0.7;
    hyper.alpha = 0.3;
    hyper.beta = 0.4;
    hyper.validate().unwrap();

    // The loss is only piecewise smooth: the fake one-hot fed to the
    // discriminator switches at argmax ties of the purified rows, and the
    // logarithm clamps kick in near 0/1. Verify the sample point sits away
    // from every switch before trusting the finite differences.
    let purified = g.forward_cached(&conf, BnStats::Batch).output().clone();
    for row in purified.rows_iter() {
        let mut sorted = row.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(sorted[0] - sorted[1] > 1e-3, "argmax margin too small: {sorted:?}");
        assert!(sorted[sorted.len() - 1] > 1e-9, "probability too close to the clamp");
    }
    let fake_labels: Vec<usize> =
        purified.rows_iter().map(purify_core::nn::argmax).collect();
    let scores = i.predict(&purified, &purify_core::nn::one_hot_rows(&fake_labels, k));
    for &s in scores.data() {
        assert!((1e-4..1.0 - 1e-4).contains(&s), "discriminator output {s} too close to clamp");
    }

    let (_, analytic) =
        purifier_composite_grads(&g, Some(&h), Some(&i), &conf, &x, &hyper).unwrap();

    let mut probe = g.clone();
    for p in params_of(&g) {
        let theta = param_get(&g, p);
        param_set(&mut probe, p, theta + FD_H);
        let (loss_plus, _) =
            purifier_composite_grads(&probe, Some(&h), Some(&i), &conf, &x, &hyper).unwrap();
        param_set(&mut probe, p, theta - FD_H);
        let (loss_minus, _) =
            purifier_composite_grads(&probe, Some(&h), Some(&i), &conf, &x, &hyper).unwrap();
        param_set(&mut probe, p, theta);
        let fd = (loss_plus - loss_minus) / (2.0 * FD_H);
        let an = grad_get(&analytic, p);
        assert!(close(an, fd), "param {p:?}: analytic {an} vs finite difference {fd}");
    }
}

#[test]
fn single_adversary_gradients_also_match_finite_differences() {
    let (k, d, n) = (5, 4, 8);
    let mut rng = rng_for(29, "props/fd-partial");
    let (g, h, i) = smooth_models(k, d, &mut rng);
    let conf = random_simplex(n, k, &mut rng);
    let x = random_unit_features(n, d, &mut rng);

    let mut inv = PurifierHyper::for_mode(PurifierMode::Inv);
    inv.alpha = 0.5;
    let mut mem = PurifierHyper::for_mode(PurifierMode::Mem);
    mem.beta = 0.6;

    for (hyper, h_opt, i_opt) in [
        (inv, Some(&h), None),
        (mem, None, Some(&i)),
    ] {
        let (_, analytic) =
            purifier_composite_grads(&g, h_opt, i_opt, &conf, &x, &hyper).unwrap();
        let mut probe = g.clone();
        for p in params_of(&g) {
            let theta = param_get(&g, p);
            param_set(&mut probe, p, theta + FD_H);
            let (lp, _) = purifier_composite_grads(&probe, h_opt, i_opt, &conf, &x, &hyper).unwrap();
            param_set(&mut probe, p, theta - FD_H);
            let (lm, _) = purifier_composite_grads(&probe, h_opt, i_opt, &conf, &x, &hyper).unwrap();
            param_set(&mut probe, p, theta);
            let fd = (lp - lm) / (2.0 * FD_H);
            let an = grad_get(&analytic, p);
            assert!(
                close(an, fd),
                "mode {:?}, param {p:?}: analytic {an} vs finite difference {fd}",
                hyper.mode
            );
        }
    }
}

#[test]
fn each_training_step_updates_exactly_one_model() {
    let (k, d, n) = (5, 4, 12);
    let mut rng = rng_for(22, "props/isolation");
    let mut g = Network::init(
        NetworkSpec {
            input_dim: k,
            layers: vec![
                LayerSpec::with_batch_norm(6, Activation::Relu),
                LayerSpec::new(k, Activation::Softmax),
            ],
        },
        &mut rng,
    )
    .unwrap();
    let mut h = Network::init(
        NetworkSpec::mlp(&[k, 8, d], Activation::Relu, Activation::Sigmoid),
        &mut rng,
    )
    .unwrap();
    let mut i = DualBranchNet::init(
        NetworkSpec::mlp(&[k, 8, 4], Activation::Relu, Activation::Relu),
        NetworkSpec::mlp(&[k, 6, 4], Activation::Relu, Activation::Relu),
        NetworkSpec::mlp(&[8, 6, 1], Activation::Relu, Activation::Sigmoid),
        &mut rng,
    )
    .unwrap();
    let conf = random_simplex(n, k, &mut rng);
    let x = random_unit_features(n, d, &mut rng);
    let hyper = PurifierHyper::for_mode(PurifierMode::Both);

    let mut opt_g = Optimizer::new(OptimizerKind::Adam, 1e-3, &g);
    let mut opt_h = Optimizer::new(OptimizerKind::Adam, 1e-3, &h);
    let mut opt_i = DualOptimizer::new(OptimizerKind::Adam, 1e-3, &i);

    let (g0, h0, i0) = (g.clone(), h.clone(), i.clone());
    train_step_h(&mut h, &mut opt_h, &g, &conf, &x);
    assert_eq!(g, g0, "inversion step must not touch the purifier");
    assert_eq!(i, i0, "inversion step must not touch the discriminator");
    assert_ne!(h, h0, "inversion step left its own model unchanged");

    let h1 = h.clone();
    train_step_i(&mut i, &mut opt_i, &g, &conf);
    assert_eq!(g, g0, "discriminator step must not touch the purifier");
    assert_eq!(h, h1, "discriminator step must not touch the inversion model");
    assert_ne!(i, i0, "discriminator step left its own model unchanged");

    let i1 = i.clone();
    train_step_g(&mut g, &mut opt_g, Some(&h), Some(&i), &conf, &x, &hyper).unwrap();
    assert_eq!(h, h1, "purifier step must not touch the inversion model");
    assert_eq!(i, i1, "purifier step must not touch the discriminator");
    assert_ne!(g, g0, "purifier step left its own model unchanged");
}

#[test]
fn base_mode_training_tightens_predicted_class_clusters() {
    let spec = SyntheticSpec {
        num_classes: 5,
        feature_dim: 30,
        samples_per_class: 60,
        prototype_density: 0.5,
        flip_noise: 0.15,
        seed: 31,
    };
    let data = generate_synthetic(&spec).unwrap();
    let alloc = AllocationConfig { d1: 100, d2: 100, d3: 100, attacker_fraction: 0.5 };
    let splits = allocate(&data, &alloc, 31).unwrap();
    let d1 = data.select(&splits.d1);
    let d2 = data.select(&splits.d2);
    let d3 = data.select(&splits.d3);

    let target_cfg = TargetConfig {
        hidden_dims: vec![64],
        epochs: 15,
        batch_size: 32,
        ..TargetConfig::default()
    };
    let net = train_target(&d1, &target_cfg).unwrap();
    let oracle = ModelOracle::new(&net);

    let mut hyper = PurifierHyper::for_mode(PurifierMode::Base);
    hyper.epochs = 30;
    let bundle = train_purifier(&oracle, &d2, &hyper, 31).unwrap();

    let raw = oracle.predict(d3.features());
    let cleaned = purify(&bundle, &raw).unwrap();
    let before = predicted_dispersion(&raw);
    let after = predicted_dispersion(&cleaned);
    assert!(
        after < before,
        "purification should tighten clusters: raw {before}, purified {after}"
    );
}

fn simplex_rows(k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec(
            prop_oneof![
                3 => Just(0.0f64),
                5 => 1e-9..1.0f64,
                2 => 1.0..1e6f64,
            ],
            k,
        )
        .prop_filter("needs positive mass", |w| w.iter().sum::<f64>() > 1e-9)
        .prop_map(|w| {
            let total: f64 = w.iter().sum();
            w.into_iter().map(|v| v / total).collect()
        }),
        1..8,
    )
}

proptest! {
    #[test]
    fn purification_maps_the_simplex_into_itself(rows in simplex_rows(6)) {
        let k = 6;
        let mut rng = rng_for(23, "props/simplex");
        let mut g = Network::init(
            NetworkSpec {
                input_dim: k,
                layers: vec![
                    LayerSpec::with_batch_norm(6, Activation::Relu),
                    LayerSpec::with_batch_norm(6, Activation::Relu),
                    LayerSpec::new(k, Activation::Softmax),
                ],
            },
            &mut rng,
        ).unwrap();
        // push the running statistics off their initial values so the
        // inference path does real normalization
        let warmup = random_simplex(16, k, &mut rng);
        let cache = g.forward_cached(&warmup, BnStats::Batch);
        g.commit_bn_updates(&cache);

        let bundle = PurifierBundle {
            g,
            h: None,
            i: None,
            hyper: PurifierHyper::for_mode(PurifierMode::Base),
            trace: LossTrace { g: vec![], h: vec![], i: vec![] },
        };
        let conf = Matrix::from_rows(&rows);
        let out = purify(&bundle, &conf).unwrap();
        prop_assert_eq!(out.rows(), conf.rows());
        prop_assert_eq!(out.cols(), k);
        for row in out.rows_iter() {
            prop_assert!(row.iter().all(|&p| p.is_finite() && (0.0..=1.0).contains(&p)));
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6, "row sums to {}", total);
        }
    }
}
