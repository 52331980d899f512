//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{GradBuffer, ParamId, Params};

pub const FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter name, flat index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares `analytic` against `(f(θ+ε) − f(θ−ε)) / 2ε` on up to `samples`
/// coordinates drawn without replacement. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(
    f: F,
    params: &Params<f64>,
    analytic: &GradBuffer,
    samples: usize,
    seed: u64,
) -> FdReport
where
    F: Fn(&Params<f64>) -> f64,
{
    finite_difference_check_with_step(f, params, analytic, samples, seed, FD_STEP)
}

/// As [`finite_difference_check`] with a custom step, for functions whose
/// ReLU kinks lie closer than `FD_STEP` to the evaluation point.
pub fn finite_difference_check_with_step<F>(
    f: F,
    params: &Params<f64>,
    analytic: &GradBuffer,
    samples: usize,
    seed: u64,
    step: f64,
) -> FdReport
where
    F: Fn(&Params<f64>) -> f64,
{
    let sizes: Vec<usize> = params.iter().map(|(_, _, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, total, samples.min(total));
    let mut coords: Vec<usize> = picks.into_iter().collect();
    coords.sort_unstable();

    let mut work = params.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut offset = 0;
    let mut p = 0;
    for flat in coords {
        while flat >= offset + sizes[p] {
            offset += sizes[p];
            p += 1;
        }
        let id = ParamId(p);
        let i = flat - offset;
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + step;
        let plus = f(&work);
        work.get_mut(id).data_mut()[i] = orig - step;
        let minus = f(&work);
        work.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.get(id)[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let err = (a - numeric).abs() / denom;
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((params.name(id).to_string(), i, a, numeric));
        }
    }
    report
}
