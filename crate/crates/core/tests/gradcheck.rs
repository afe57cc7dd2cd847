//! Finite-difference verification of every gradient path the training code
//! uses: each activation, plain and batch-normalized layers in both
//! statistics modes, every loss, input gradients, and the two-branch
//! discriminator.

mod common;

use common::{dual_trials, mse_loss_against, random_matrix, run_trials, spec};
use purify_core::nn::loss;
use purify_core::nn::{rng_for, Activation, BnStats, Matrix};

const TRIALS: usize = 16;

#[test]
fn dense_layers_with_each_activation_match_finite_differences() {
    let mut rng = rng_for(7, "gradcheck/targets");
    for (name, act) in [
        ("relu", Activation::Relu),
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
        ("identity", Activation::Identity),
    ] {
        let target = random_matrix(6, 3, &mut rng);
        let lossfn = mse_loss_against(target);
        run_trials(
            spec(&[4, 7, 3], act, Activation::Identity, false),
            6,
            BnStats::Running,
            &format!("dense/{name}/mse"),
            &lossfn,
            &|_| true,
            TRIALS,
        )
        .unwrap();
    }
}

#[test]
fn batchnorm_layers_match_finite_differences_in_both_statistics_modes() {
    let mut rng = rng_for(11, "gradcheck/targets");
    for (name, stats) in [("batch", BnStats::Batch), ("running", BnStats::Running)] {
        let target = random_matrix(8, 3, &mut rng);
        let lossfn = mse_loss_against(target);
        run_trials(
            spec(&[4, 7, 3], Activation::Relu, Activation::Identity, true),
            8,
            stats,
            &format!("batchnorm/{name}/mse"),
            &lossfn,
            &|_| true,
            TRIALS,
        )
        .unwrap();
    }
}

#[test]
fn softmax_head_matches_finite_differences_under_both_losses() {
    let labels = vec![0usize, 3, 1, 4, 2, 0, 1, 3];
    let ce =
        |out: &Matrix| (loss::cross_entropy(out, &labels), loss::cross_entropy_grad(out, &labels));
    run_trials(
        spec(&[4, 7, 5], Activation::Relu, Activation::Softmax, true),
        8,
        BnStats::Batch,
        "softmax/cross_entropy",
        &ce,
        &|out| out.data().iter().all(|&p| p >= 1e-10),
        TRIALS,
    )
    .unwrap();

    let mut rng = rng_for(13, "gradcheck/targets");
    let mut target = random_matrix(8, 5, &mut rng);
    target.map_inplace(|v| (v + 1.0) / 10.0);
    let lossfn = mse_loss_against(target);
    run_trials(
        spec(&[4, 7, 5], Activation::Relu, Activation::Softmax, true),
        8,
        BnStats::Batch,
        "softmax/mse",
        &lossfn,
        &|_| true,
        TRIALS,
    )
    .unwrap();
}

#[test]
fn sigmoid_head_matches_finite_differences_under_binary_losses() {
    let targets = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let bce = |out: &Matrix| {
        (
            loss::binary_cross_entropy(out, &targets),
            loss::binary_cross_entropy_grad(out, &targets),
        )
    };
    let in_clamp_interior =
        |out: &Matrix| out.data().iter().all(|&p| p > 2e-7 && p < 1.0 - 2e-7);
    run_trials(
        spec(&[4, 6, 1], Activation::Tanh, Activation::Sigmoid, false),
        6,
        BnStats::Running,
        "sigmoid/bce",
        &bce,
        &in_clamp_interior,
        TRIALS,
    )
    .unwrap();

    let fool = |out: &Matrix| (loss::mean_log_one_minus(out), loss::mean_log_one_minus_grad(out));
    run_trials(
        spec(&[4, 6, 1], Activation::Tanh, Activation::Sigmoid, false),
        6,
        BnStats::Running,
        "sigmoid/log_one_minus",
        &fool,
        &in_clamp_interior,
        TRIALS,
    )
    .unwrap();
}

#[test]
fn dual_branch_discriminator_matches_finite_differences() {
    dual_trials(TRIALS).unwrap();
}
