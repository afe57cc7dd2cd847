//! Finite-difference gradient verification machinery shared by the
//! dedicated gradient tests and the acceptance suite. Sample points are
//! resampled away from activation kinks and loss clamps so the central
//! difference measures the same smooth function the analytic backward pass
//! differentiates.

#![allow(dead_code)]

use purify_core::nn::loss;
use purify_core::nn::{
    rng_for, Activation, BnStats, DualBranchNet, Matrix, Network, NetworkGrads, NetworkSpec,
    BN_EPS,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-8;
const KINK_MARGIN: f64 = 5e-3;

pub type Loss<'a> = &'a dyn Fn(&Matrix) -> (f64, Matrix);

fn close(analytic: f64, fd: f64) -> bool {
    if analytic.abs() <= ABS_FLOOR && fd.abs() <= ABS_FLOOR {
        return true;
    }
    (analytic - fd).abs() / analytic.abs().max(fd.abs()) <= REL_TOL
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    m
}

#[derive(Clone, Copy)]
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

/// Recomputes the forward pass step by step and returns each layer's
/// activation input, so checks can verify sample points sit away from the
/// ReLU kink before trusting a finite difference across it.
fn activation_inputs(net: &Network, x: &Matrix, stats: BnStats) -> Vec<Matrix> {
    let mut out = Vec::new();
    let mut cur = x.clone();
    for layer in net.layers() {
        let mut z = cur.matmul_nt(&layer.w);
        z.add_row_broadcast(&layer.b);
        if let Some(bn) = &layer.bn {
            let (mean, var) = match stats {
                BnStats::Running => (bn.running_mean.clone(), bn.running_var.clone()),
                BnStats::Batch => {
                    let n = z.rows() as f64;
                    let mut mean = z.column_sums();
                    mean.iter_mut().for_each(|m| *m /= n);
                    let mut var = vec![0.0; z.cols()];
                    for row in z.rows_iter() {
                        for ((v, &val), &m) in var.iter_mut().zip(row).zip(&mean) {
                            *v += (val - m) * (val - m);
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= n);
                    (mean, var)
                }
            };
            for r in 0..z.rows() {
                let row = z.row_mut(r);
                for (j, v) in row.iter_mut().enumerate() {
                    let xhat = (*v - mean[j]) / (var[j] + BN_EPS).sqrt();
                    *v = xhat * bn.gamma[j] + bn.beta[j];
                }
            }
        }
        out.push(z.clone());
        match layer.activation {
            Activation::Identity => {}
            Activation::Relu => z.map_inplace(|v| v.max(0.0)),
            Activation::Sigmoid => z.map_inplace(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::Tanh => z.map_inplace(f64::tanh),
            Activation::Softmax => {
                let cols = z.cols();
                for row in z.data_mut().chunks_exact_mut(cols) {
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
        cur = z;
    }
    out
}

/// A sample point is usable when every ReLU input clears the kink by a
/// margin much larger than the finite-difference step.
fn clears_kinks(net: &Network, x: &Matrix, stats: BnStats) -> bool {
    for (layer, z) in net.layers().iter().zip(activation_inputs(net, x, stats)) {
        if layer.activation == Activation::Relu && z.data().iter().any(|v| v.abs() < KINK_MARGIN)
        {
            return false;
        }
    }
    true
}

fn check_network(
    net: &mut Network,
    x: &Matrix,
    stats: BnStats,
    lossfn: Loss,
    what: &str,
) -> Result<(), String> {
    let cache = net.forward_cached(x, stats);
    let (_, d_out) = lossfn(cache.output());
    let (grads, d_x) = net.backward(&cache, &d_out);

    for p in params_of(net) {
        let orig = param_get(net, p);
        param_set(net, p, orig + H);
        let up = lossfn(net.forward_cached(x, stats).output()).0;
        param_set(net, p, orig - H);
        let down = lossfn(net.forward_cached(x, stats).output()).0;
        param_set(net, p, orig);
        let fd = (up - down) / (2.0 * H);
        let analytic = grad_get(&grads, p);
        if !close(analytic, fd) {
            return Err(format!(
                "{what}: parameter gradient mismatch (analytic {analytic:.3e}, fd {fd:.3e})"
            ));
        }
    }

    let mut xp = x.clone();
    for i in 0..xp.data().len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + H;
        let up = lossfn(net.forward_cached(&xp, stats).output()).0;
        xp.data_mut()[i] = orig - H;
        let down = lossfn(net.forward_cached(&xp, stats).output()).0;
        xp.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * H);
        let analytic = d_x.data()[i];
        if !close(analytic, fd) {
            return Err(format!(
                "{what}: input gradient mismatch (analytic {analytic:.3e}, fd {fd:.3e})"
            ));
        }
    }
    Ok(())
}

/// Draws networks and inputs until the sample point clears every kink and
/// the outputs satisfy `output_ok`, then runs the check — once per trial.
/// Resampling keeps the check honest: it never compares across a
/// non-differentiable point.
pub fn run_trials(
    spec: NetworkSpec,
    batch: usize,
    stats: BnStats,
    what: &str,
    lossfn: Loss,
    output_ok: &dyn Fn(&Matrix) -> bool,
    trials: usize,
) -> Result<(), String> {
    for trial in 0..trials {
        let mut rng = rng_for(0xC0FFEE + trial as u64, &format!("gradcheck/{what}"));
        loop {
            let mut net = Network::init(spec.clone(), &mut rng).expect("valid spec");
            if stats == BnStats::Running {
                for layer in net.layers_mut() {
                    if let Some(bn) = layer.bn.as_mut() {
                        for m in bn.running_mean.iter_mut() {
                            *m = rng.gen_range(-0.5..0.5);
                        }
                        for v in bn.running_var.iter_mut() {
                            *v = rng.gen_range(0.25..1.5);
                        }
                    }
                }
            }
            let x = random_matrix(batch, spec.input_dim, &mut rng);
            if !clears_kinks(&net, &x, stats) {
                continue;
            }
            let out = net.forward_cached(&x, stats);
            if !output_ok(out.output()) {
                continue;
            }
            check_network(&mut net, &x, stats, lossfn, what)?;
            break;
        }
    }
    Ok(())
}

pub fn spec(dims: &[usize], hidden: Activation, output: Activation, bn: bool) -> NetworkSpec {
    let mut s = NetworkSpec::mlp(dims, hidden, output);
    if bn {
        let last = s.layers.len() - 1;
        for l in &mut s.layers[..last] {
            l.batch_norm = true;
        }
    }
    s
}

pub fn mse_loss_against(target: Matrix) -> impl Fn(&Matrix) -> (f64, Matrix) {
    move |out: &Matrix| (loss::mse(out, &target), loss::mse_grad(out, &target))
}

/// One finite-difference trial of the two-branch discriminator: every
/// parameter of both branches and the head, plus both input gradients.
fn check_dual_once(trial: u64) -> Result<(), String> {
    let targets = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
    let batch = targets.len();
    let branch_a = spec(&[5, 6, 4], Activation::Relu, Activation::Identity, true);
    let branch_b = spec(&[3, 5, 2], Activation::Relu, Activation::Identity, false);
    let head = spec(&[6, 6, 1], Activation::Relu, Activation::Sigmoid, false);

    let mut rng = rng_for(0xD1A1 + trial, "gradcheck/dual");
    loop {
        let mut net =
            DualBranchNet::init(branch_a.clone(), branch_b.clone(), head.clone(), &mut rng)
                .expect("valid dual spec");
        let xa = random_matrix(batch, 5, &mut rng);
        let xb = random_matrix(batch, 3, &mut rng);

        let joined = {
            let a = net.branch_a.forward_cached(&xa, BnStats::Batch);
            let b = net.branch_b.forward_cached(&xb, BnStats::Batch);
            a.output().hstack(b.output())
        };
        if !clears_kinks(&net.branch_a, &xa, BnStats::Batch)
            || !clears_kinks(&net.branch_b, &xb, BnStats::Batch)
            || !clears_kinks(&net.head, &joined, BnStats::Batch)
        {
            continue;
        }
        let cache = net.forward_cached(&xa, &xb, BnStats::Batch);
        let out = cache.output();
        if !out.data().iter().all(|&p| p > 2e-7 && p < 1.0 - 2e-7) {
            continue;
        }

        let d_out = loss::binary_cross_entropy_grad(out, &targets);
        let (grads, d_xa, d_xb) = net.backward(&cache, &d_out);

        let eval = |net: &DualBranchNet, xa: &Matrix, xb: &Matrix| {
            let cache = net.forward_cached(xa, xb, BnStats::Batch);
            loss::binary_cross_entropy(cache.output(), &targets)
        };

        let parts: [(&str, fn(&mut DualBranchNet) -> &mut Network); 3] = [
            ("branch_a", |n| &mut n.branch_a),
            ("branch_b", |n| &mut n.branch_b),
            ("head", |n| &mut n.head),
        ];
        for (name, part) in parts {
            let plist = params_of(part(&mut net));
            for p in plist {
                let orig = param_get(part(&mut net), p);
                param_set(part(&mut net), p, orig + H);
                let up = eval(&net, &xa, &xb);
                param_set(part(&mut net), p, orig - H);
                let down = eval(&net, &xa, &xb);
                param_set(part(&mut net), p, orig);
                let fd = (up - down) / (2.0 * H);
                let sub_grads = match name {
                    "branch_a" => &grads.branch_a,
                    "branch_b" => &grads.branch_b,
                    _ => &grads.head,
                };
                let analytic = grad_get(sub_grads, p);
                if !close(analytic, fd) {
                    return Err(format!(
                        "dual/{name}: gradient mismatch (analytic {analytic:.3e}, fd {fd:.3e})"
                    ));
                }
            }
        }

        for (name, x, d_x) in [("xa", &xa, &d_xa), ("xb", &xb, &d_xb)] {
            let mut xp = x.clone();
            for i in 0..xp.data().len() {
                let orig = xp.data()[i];
                xp.data_mut()[i] = orig + H;
                let up = if name == "xa" { eval(&net, &xp, &xb) } else { eval(&net, &xa, &xp) };
                xp.data_mut()[i] = orig - H;
                let down =
                    if name == "xa" { eval(&net, &xp, &xb) } else { eval(&net, &xa, &xp) };
                xp.data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * H);
                let analytic = d_x.data()[i];
                if !close(analytic, fd) {
                    return Err(format!(
                        "dual/input {name}: gradient mismatch (analytic {analytic:.3e}, fd {fd:.3e})"
                    ));
                }
            }
        }
        return Ok(());
    }
}

pub fn dual_trials(trials: usize) -> Result<(), String> {
    for trial in 0..trials {
        check_dual_once(trial as u64)?;
    }
    Ok(())
}

/// Runs `trials_each` finite-difference trials for every layer/loss
/// combination the training code uses and returns the total trial count.
pub fn all_gradient_combinations(trials_each: usize) -> Result<usize, String> {
    let mut total = 0;

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
            trials_each,
        )?;
        total += trials_each;
    }

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
            trials_each,
        )?;
        total += trials_each;
    }

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
        trials_each,
    )?;
    total += trials_each;

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
        trials_each,
    )?;
    total += trials_each;

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
        trials_each,
    )?;
    total += trials_each;

    let fool = |out: &Matrix| (loss::mean_log_one_minus(out), loss::mean_log_one_minus_grad(out));
    run_trials(
        spec(&[4, 6, 1], Activation::Tanh, Activation::Sigmoid, false),
        6,
        BnStats::Running,
        "sigmoid/log_one_minus",
        &fool,
        &in_clamp_interior,
        trials_each,
    )?;
    total += trials_each;

    dual_trials(trials_each)?;
    total += trials_each;

    Ok(total)
}
