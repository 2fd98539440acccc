//! Autodiff gradients of the two training objectives against central finite
//! differences, on micro-models in f64.

mod common;

use common::{client_loss_check, diffusion_loss_check, REL_TOL};

#[test]
fn client_loss_gradient_matches_finite_differences() {
    let (worst, probes) = client_loss_check();
    assert!(probes > 20, "only {probes} probes");
    assert!(worst < REL_TOL, "worst relative error {worst:e}");
}

#[test]
fn diffusion_loss_gradient_matches_finite_differences() {
    let (worst, probes) = diffusion_loss_check();
    assert!(probes > 20, "only {probes} probes");
    assert!(worst < REL_TOL, "worst relative error {worst:e}");
}
