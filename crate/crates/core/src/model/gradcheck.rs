//! Central finite-difference check of analytic gradients.

use rand::Rng;

use crate::model::adam::Parameters;
use crate::rng::RngStream;

/// Denominator floor so that gradients of order 1e-12 (pure round-off) do not
/// inflate the relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradProbe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: Vec<GradProbe>,
    pub max_rel_error: f64,
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Probes `count` distinct random parameters with step `h`.
pub fn check_gradient<P, F>(
    params: &P,
    grad: &P,
    loss: F,
    count: usize,
    h: f64,
    rng: &mut RngStream,
) -> GradCheckReport
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    let total = params.num_parameters();
    let mut picked = Vec::with_capacity(count.min(total));
    while picked.len() < count.min(total) {
        let i = rng.gen_range(0..total);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    let mut work = params.clone();
    let probes: Vec<GradProbe> = picked
        .into_iter()
        .map(|index| {
            let x = params.get(index);
            work.set(index, x + h);
            let up = loss(&work);
            work.set(index, x - h);
            let down = loss(&work);
            work.set(index, x);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.get(index);
            GradProbe {
                index,
                analytic,
                numeric,
                rel_error: rel_error(analytic, numeric),
            }
        })
        .collect();
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    GradCheckReport { probes, max_rel_error }
}
