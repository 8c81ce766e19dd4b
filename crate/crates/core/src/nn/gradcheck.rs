//! Central finite-difference gradient checks.

use rand::seq::index::sample;

use crate::rng::rng_from_seed;

/// Default perturbation for central differences in double precision.
pub const FD_STEP: f64 = 1e-5;

/// Gradients whose magnitude is below this are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_difference<F>(f: &mut F, x: &[f64], i: usize, step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    xp[i] = x[i] + step;
    let fp = f(&xp);
    xp[i] = x[i] - step;
    let fm = f(&xp);
    (fp - fm) / (2.0 * step)
}

/// Result of comparing an analytic gradient against finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub coords: Vec<usize>,
    pub max_rel_err: f64,
    pub worst_coord: usize,
}

/// Checks `analytic` against central differences on up to `n_coords`
/// coordinates drawn without replacement (all of them if fewer exist).
pub fn check_gradient<F>(mut f: F, x: &[f64], analytic: &[f64], n_coords: usize, seed: u64) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length must match parameters");
    let mut rng = rng_from_seed(seed);
    let mut coords = sample(&mut rng, x.len(), n_coords.min(x.len())).into_vec();
    coords.sort_unstable();
    let mut max_rel_err = 0.0;
    let mut worst_coord = coords.first().copied().unwrap_or(0);
    for &i in &coords {
        let fd = central_difference(&mut f, x, i, FD_STEP);
        let e = relative_error(analytic[i], fd);
        if e > max_rel_err {
            max_rel_err = e;
            worst_coord = i;
        }
    }
    GradCheck {
        coords,
        max_rel_err,
        worst_coord,
    }
}
