//! Reverse-mode gradients against central finite differences.

#[path = "common/mod.rs"]
mod common;

use clickadapt::losses::{adapt_loss_var, ce_loss_var, gce_loss_var, mas_penalty_var};
use clickadapt::{adapt_loss, ce_loss, gce_loss, mas_penalty, AdaptLossConfig};
use common::{analytic, fd_worst, fixture, net_with};

use common::{FD_FLOOR as FLOOR, FD_STEP as H, FD_TOL as TOL};

fn check(label: &str, worst: (f64, String)) {
    assert!(worst.0 < TOL, "{label}: relative error {} at {}", worst.0, worst.1);
}

#[test]
fn ce_gradient_matches_finite_differences() {
    let fx = fixture(1);
    let grads = analytic(&fx, |g, p, _| ce_loss_var(g, p, &fx.y).unwrap());
    check(
        "ce",
        fd_worst(&fx.net.params, &grads, H, FLOOR, |p| {
            ce_loss(&net_with(p).predict(&fx.x).unwrap().probabilities, &fx.y).unwrap()
        }),
    );
}

#[test]
fn gce_gradient_matches_finite_differences() {
    let fx = fixture(2);
    let grads = analytic(&fx, |g, p, _| gce_loss_var(g, p, &fx.corrections).unwrap());
    check(
        "gce",
        fd_worst(&fx.net.params, &grads, H, FLOOR, |p| {
            gce_loss(&net_with(p).predict(&fx.x).unwrap().probabilities, &fx.corrections).unwrap()
        }),
    );
}

#[test]
fn mas_gradient_matches_finite_differences() {
    let fx = fixture(3);
    let grads = analytic(&fx, |g, _, vars| mas_penalty_var(g, vars, &fx.theta_star, &fx.omega).unwrap());
    check(
        "mas",
        fd_worst(&fx.net.params, &grads, H, FLOOR, |p| {
            mas_penalty(p, &fx.theta_star, &fx.omega).unwrap()
        }),
    );
}

#[test]
fn mas_gradient_is_closed_form() {
    let fx = fixture(4);
    let grads = analytic(&fx, |g, _, vars| mas_penalty_var(g, vars, &fx.theta_star, &fx.omega).unwrap());
    for (name, theta) in fx.net.params.iter() {
        let (star, w, got) = (
            fx.theta_star.get(name).unwrap(),
            fx.omega.get(name).unwrap(),
            grads.get(name).unwrap(),
        );
        for i in 0..theta.len() {
            let expected = 2.0 * w.data()[i] * (theta.data()[i] - star.data()[i]);
            assert!((got.data()[i] - expected).abs() <= 1e-12, "{name}[{i}]");
        }
    }
}

#[test]
fn adapt_loss_gradient_matches_finite_differences() {
    let fx = fixture(5);
    for lambda in [0.0, 0.5, 1.0] {
        for gamma in [0.0, 1.0, 2.0] {
            let cfg = AdaptLossConfig::new(lambda, gamma).unwrap();
            let grads = analytic(&fx, |g, p, vars| {
                adapt_loss_var(g, p, &fx.p0, &fx.corrections, vars, &fx.theta_star, &fx.omega, &cfg)
                    .unwrap()
                    .total
            });
            check(
                &format!("adapt λ={lambda} γ={gamma}"),
                fd_worst(&fx.net.params, &grads, H, FLOOR, |p| {
                    adapt_loss(&net_with(p), &fx.x, &fx.p0, &fx.corrections, &fx.theta_star, &fx.omega, &cfg)
                        .unwrap()
                }),
            );
        }
    }
}

