//! Built-in property checks behind the `selftest` CLI subcommand: quick
//! versions of the numeric, gradient, and environment invariants.

use crate::actor::{Mlp, OutputSquash};
use crate::bls::BlsNet;
use crate::envs::{Environment, InvertedPendulum, Reacher};
use crate::numerics::{frobenius_norm, pinv_append_columns, pinv_ridge, AppendBranch};
use crate::replay::{TrainingBuffer, Transition};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LAMBDA: f64 = 9.313225746154785e-10; // 2^-30

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

/// Runs every check, printing one line per property. Returns true when all
/// pass.
pub fn run() -> bool {
    let checks = vec![
        incremental_pinv_agrees(),
        both_append_branches(),
        bls_growth_matches_refit(),
        bls_gradient_matches_differences(),
        actor_gradient_matches_differences(),
        envs_hold_invariants(),
        buffer_sampling_uniform(),
    ];
    let mut all = true;
    for c in &checks {
        println!(
            "[{}] {} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        all &= c.passed;
    }
    all
}

fn rel_frob(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = a - b;
    frobenius_norm(&diff.view()) / frobenius_norm(&b.view()).max(1e-300)
}

fn incremental_pinv_agrees() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let n = rng.random_range(20..50);
        let p = rng.random_range(3..15);
        let q = if i % 2 == 0 { 1 } else { 5 };
        let a = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0));
        let h = Array2::from_shape_fn((n, q), |_| rng.random_range(-1.0..1.0));
        let ap = pinv_ridge(&a.view(), LAMBDA).unwrap();
        let out = pinv_append_columns(&a.view(), &ap.view(), &h.view(), LAMBDA).unwrap();
        let aug = ndarray::concatenate![Axis(1), a.view(), h.view()];
        let reference = pinv_ridge(&aug.view(), LAMBDA).unwrap();
        worst = worst.max(rel_frob(&out.a_pinv_new, &reference));
    }
    Check {
        name: "incremental pseudoinverse equals recompute",
        passed: worst < 1e-6,
        detail: format!("(worst rel err {worst:.2e})"),
    }
}

fn both_append_branches() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let a = Array2::from_shape_fn((30, 6), |_| 3.0 * rng.random_range(-1.0..1.0));
    let ap = pinv_ridge(&a.view(), LAMBDA).unwrap();
    let fresh = Array2::from_shape_fn((30, 1), |_| rng.random_range(-1.0..1.0));
    let nz = pinv_append_columns(&a.view(), &ap.view(), &fresh.view(), LAMBDA).unwrap();
    let dup = a.slice(ndarray::s![.., 0..1]).to_owned();
    let z = pinv_append_columns(&a.view(), &ap.view(), &dup.view(), LAMBDA).unwrap();
    let passed = nz.branch == AppendBranch::ResidualNonZero && z.branch == AppendBranch::ResidualZero;
    Check {
        name: "residual branch selection covers both cases",
        passed,
        detail: format!("({:?} / {:?})", nz.branch, z.branch),
    }
}

fn bls_growth_matches_refit() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut net = BlsNet::init(10, 1, 6, 30, 0.8, LAMBDA, &mut rng).unwrap();
    let x = Array2::from_shape_fn((200, 10), |_| rng.random_range(-1.0..1.0));
    let y = Array2::from_shape_fn((200, 1), |(i, _)| (x.row(i).sum() * 2.0_f64).sin());
    let before = net.fit_output_weights(&x.view(), &y.view()).unwrap().rmse;
    net.add_feature_nodes_with(1, 0, &x.view(), &y.view(), &mut rng).unwrap();
    let after = net
        .add_enhancement_nodes(20, &x.view(), &y.view(), &mut rng)
        .unwrap()
        .rmse;
    let grown = net.forward(&x.view()).unwrap();
    let mut fresh = BlsNet::from_parts(
        net.feature_weights().0.clone(),
        net.feature_weights().1.clone(),
        net.enhancement_weights().0.clone(),
        net.enhancement_weights().1.clone(),
        Array2::zeros(net.output_weights().dim()),
        net.shrinkage(),
        net.lambda(),
    )
    .unwrap();
    fresh.fit_output_weights(&x.view(), &y.view()).unwrap();
    let scratch = fresh.forward(&x.view()).unwrap();
    let err = {
        let diff = &grown - &scratch;
        frobenius_norm(&diff.view()) / (1.0 + frobenius_norm(&scratch.view()))
    };
    Check {
        name: "grown network equals from-scratch refit",
        passed: err < 1e-5 && after <= before + 1e-9,
        detail: format!("(pred rel err {err:.2e}, rmse {before:.3} -> {after:.3})"),
    }
}

fn bls_gradient_matches_differences() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let mut net = BlsNet::init(5, 1, 5, 12, 0.8, LAMBDA, &mut rng).unwrap();
        let x = Array2::from_shape_fn((60, 5), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((60, 1), |(i, _)| (x.row(i).sum() as f64).cos());
        net.fit_output_weights(&x.view(), &y.view()).unwrap();
        let point = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
        let jac = net.input_gradient(&point.view()).unwrap();
        let h = 1e-5;
        for c in 0..5 {
            let mut plus = point.clone();
            plus[c] += h;
            let mut minus = point.clone();
            minus[c] -= h;
            let fp = net.forward(&plus.view().insert_axis(Axis(0))).unwrap()[[0, 0]];
            let fm = net.forward(&minus.view().insert_axis(Axis(0))).unwrap()[[0, 0]];
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max((jac[[0, c]] - fd).abs() / fd.abs().max(1.0));
        }
    }
    Check {
        name: "broad critic input gradient matches finite differences",
        passed: worst < 1e-4,
        detail: format!("(worst rel err {worst:.2e})"),
    }
}

fn actor_gradient_matches_differences() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let mut net = Mlp::with_layers(
            &[4, 10, 8, 2],
            OutputSquash::BoundedTanh(Array1::from_vec(vec![2.0, 1.0])),
            &mut rng,
        )
        .unwrap();
        let x = Array2::from_shape_fn((8, 4), |_| rng.random_range(-1.0..1.0));
        let u = Array2::from_shape_fn((8, 2), |_| rng.random_range(-1.0..1.0));
        let grads = net.backward_chain(&x.view(), &u.view()).unwrap();
        let objective = |net: &Mlp| {
            let out = net.forward(&x.view()).unwrap();
            -(out.iter().zip(u.iter()).map(|(o, w)| o * w).sum::<f64>()) / 8.0
        };
        let h = 1e-5;
        for l in 0..3 {
            for _ in 0..4 {
                let (weights, _) = net.parameters_mut();
                let i = rng.random_range(0..weights[l].nrows());
                let j = rng.random_range(0..weights[l].ncols());
                let orig = weights[l][[i, j]];
                net.parameters_mut().0[l][[i, j]] = orig + h;
                let fp = objective(&net);
                net.parameters_mut().0[l][[i, j]] = orig - h;
                let fm = objective(&net);
                net.parameters_mut().0[l][[i, j]] = orig;
                let fd = (fp - fm) / (2.0 * h);
                worst = worst.max((grads.d_weights[l][[i, j]] - fd).abs() / fd.abs().max(1.0));
            }
        }
    }
    Check {
        name: "policy backpropagation matches finite differences",
        passed: worst < 1e-4,
        detail: format!("(worst rel err {worst:.2e})"),
    }
}

fn envs_hold_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut ok = true;
    let mut detail = String::new();

    let mut pen = InvertedPendulum::new();
    pen.set_state([0.0; 4]);
    for _ in 0..20 {
        pen.step(&[0.0]);
    }
    if pen.state().iter().any(|v| v.abs() > 1e-12) {
        ok = false;
        detail.push_str("upright fixed point violated; ");
    }

    let mut reacher = Reacher::new();
    reacher.reset(&mut rng);
    let mut steps = 0;
    loop {
        let r = reacher.step(&[0.4, -0.7]);
        steps += 1;
        if r.reward > 0.0 {
            ok = false;
            detail.push_str("positive reacher reward; ");
        }
        if r.truncated {
            break;
        }
    }
    if steps != 50 {
        ok = false;
        detail.push_str(&format!("reacher episode length {steps}; "));
    }
    Check {
        name: "environment invariants hold",
        passed: ok,
        detail,
    }
}

fn buffer_sampling_uniform() -> Check {
    let mut buf = TrainingBuffer::new(16, 1, 1, ChaCha8Rng::seed_from_u64(107)).unwrap();
    for i in 0..10 {
        buf.push(Transition {
            state: vec![i as f64],
            action: vec![0.0],
            reward: 0.0,
            next_state: vec![0.0],
            done: false,
            target: None,
        })
        .unwrap();
    }
    let mut counts = [0usize; 10];
    let draws = 100_000;
    for _ in 0..draws / 10 {
        for idx in buf.sample(10).unwrap().indices {
            counts[idx] += 1;
        }
    }
    let expected = draws as f64 / 10.0;
    let chi2: f64 = counts
        .iter()
        .map(|c| {
            let d = *c as f64 - expected;
            d * d / expected
        })
        .sum();
    Check {
        name: "buffer sampling is uniform",
        passed: chi2 < 27.877,
        detail: format!("(chi2 {chi2:.2} < 27.88)"),
    }
}
