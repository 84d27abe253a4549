//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, Result};

/// Denominator floor for the relative error, so entries whose true gradient
/// is (near) zero are judged on absolute error at this scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Above this many parameters a seeded random subset is checked.
pub const MAX_CHECKED_ENTRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the analytic gradient returned by `loss_fn` with central
/// differences `(f(p + ε) − f(p − ε)) / 2ε` on every entry of `params`.
///
/// `loss_fn` maps a flat parameter vector to `(loss, gradient)`.
pub fn check_gradients<F>(loss_fn: F, params: &[f64], epsilon: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    check_gradients_with(loss_fn, params, epsilon, MAX_CHECKED_ENTRIES, 0)
}

pub fn check_gradients_with<F>(
    mut loss_fn: F,
    params: &[f64],
    epsilon: f64,
    max_entries: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(NumericsError::NonFinite("loss".into()));
    }
    if analytic.len() != params.len() {
        return Err(NumericsError::Shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let indices: Vec<usize> = if params.len() > max_entries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, params.len(), max_entries).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..params.len()).collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: indices.len(),
    };
    let mut probe = params.to_vec();
    for &i in &indices {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let (plus, _) = loss_fn(&probe)?;
        probe[i] = orig - epsilon;
        let (minus, _) = loss_fn(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::NonFinite(format!("loss at perturbed entry {i}")));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
