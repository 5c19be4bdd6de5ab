//! Central finite-difference check of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;

pub const STEP: f64 = 1e-5;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest relative error over `probes` random coordinates (all coordinates if
/// `probes` exceeds the parameter count). `f` returns the loss and its
/// analytic gradient at the given point.
pub fn gradient_check<F>(f: F, params: &[f64], probes: usize, seed: u64) -> Result<f64, TrainError>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (loss, grad) = f(params);
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss);
    }
    if grad.len() != params.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} gradient entries for {} parameters",
            grad.len(),
            params.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<usize> = if probes >= params.len() {
        (0..params.len()).collect()
    } else {
        sample(&mut rng, params.len(), probes).into_vec()
    };
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in coords {
        let orig = x[i];
        x[i] = orig + STEP;
        let (up, _) = f(&x);
        x[i] = orig - STEP;
        let (down, _) = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(TrainError::NonFiniteLoss);
        }
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(grad[i], numeric));
    }
    Ok(worst)
}
