//! Central finite-difference verification of analytic gradients.
//!
//! The checker re-evaluates the caller's forward function with perturbed
//! parameters; it never touches the reverse sweep it is validating.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamId, ParamSet};

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Worst observed deviation between analytic and finite-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: Option<String>,
    pub coords_checked: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// For every listed parameter, up to `coords_per_param` coordinates are
/// sampled (all coordinates when the tensor is small enough) and each is
/// perturbed by `±h` while `loss_fn` re-evaluates the objective.
pub fn check_gradients(
    params: &ParamSet,
    ids: &[ParamId],
    analytic: &Gradients,
    loss_fn: impl Fn(&ParamSet) -> f64,
    coords_per_param: usize,
    h: f64,
    seed: u64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: None,
        coords_checked: 0,
    };
    let mut scratch = params.clone();
    for &id in ids {
        let numel = params.get(id).numel();
        let coords: Vec<usize> = if numel <= coords_per_param {
            (0..numel).collect()
        } else {
            (0..coords_per_param)
                .map(|_| rng.random_range(0..numel))
                .collect()
        };
        for coord in coords {
            let original = params.get(id).data()[coord];
            scratch.get_mut(id).data_mut()[coord] = original + h;
            let plus = loss_fn(&scratch);
            scratch.get_mut(id).data_mut()[coord] = original - h;
            let minus = loss_fn(&scratch);
            scratch.get_mut(id).data_mut()[coord] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic
                .get(id)
                .map(|g| g.data()[coord])
                .unwrap_or(0.0);
            let err = relative_error(exact, numeric);
            report.coords_checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = Some(params.name(id).to_string());
            }
        }
    }
    report
}
