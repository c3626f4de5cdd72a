//! Finite-difference gradient checking. Uses forward evaluations only, so it
//! stays independent of the reverse sweep it is used to verify.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{GradBuffer, ParamId, ParamStore};

/// `|a − f| / max(|a|, |f|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_error(a, n, floor)).fold(0.0, f64::max)
}

/// Central difference of `loss` with respect to entry `idx` of parameter `id`.
pub fn central_difference(
    params: &mut ParamStore,
    id: ParamId,
    idx: usize,
    h: f64,
    loss: &mut impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = params.value(id).data[idx];
    params.value_mut(id).data[idx] = orig + h;
    let up = loss(params);
    params.value_mut(id).data[idx] = orig - h;
    let down = loss(params);
    params.value_mut(id).data[idx] = orig;
    (up - down) / (2.0 * h)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Entries probed per parameter tensor; `None` probes all of them.
    pub samples_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { h: 1e-5, floor: 1e-6, samples_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl GradCheck {
    pub fn run(
        &self,
        params: &ParamStore,
        analytic: &GradBuffer,
        mut loss: impl FnMut(&ParamStore) -> f64,
        mut select: impl FnMut(ParamId) -> bool,
    ) -> Vec<Probe> {
        let mut work = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let ids: Vec<ParamId> = params.iter().map(|(id, _)| id).filter(|&id| select(id)).collect();
        let mut probes = Vec::new();
        for id in ids {
            let n = params.value(id).len();
            let entries: Vec<usize> = match self.samples_per_param {
                Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
                _ => (0..n).collect(),
            };
            for idx in entries {
                let numeric = central_difference(&mut work, id, idx, self.h, &mut loss);
                let a = analytic.0[id.0][idx];
                probes.push(Probe {
                    param: params.get(id).name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: rel_error(a, numeric, self.floor),
                });
            }
        }
        probes
    }
}

pub fn worst(probes: &[Probe]) -> Option<&Probe> {
    probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
}
