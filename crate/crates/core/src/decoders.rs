//! Conditional intensity, temporal log-density and the anchor-wise Gaussian
//! mixture over locations.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::diffcore::{log_sum_exp, Bound, Group, ParamStore, Real, Tape, Var};
use crate::nn::{Activation, Mlp};

/// Lower bound on component variances.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Decoders {
    pub intensity: Mlp,
    pub weight: Mlp,
    pub mean: Mlp,
    pub log_var: Mlp,
}

/// Tape handles of a mixture: logits K×1, means K×2, log-variances K×2.
#[derive(Clone, Copy, Debug)]
pub struct MixtureVars {
    pub logits: Var,
    pub mean: Var,
    pub log_var: Var,
}

impl Decoders {
    pub fn register(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Self {
        Decoders {
            intensity: Mlp::new(store, Group::TemporalDec, "dec.intensity", d, d, 1, Activation::Tanh, rng),
            weight: Mlp::new(store, Group::SpatialDec, "dec.weight", d, d, 1, Activation::Tanh, rng),
            mean: Mlp::new(store, Group::SpatialDec, "dec.mean", d, d, 2, Activation::Tanh, rng),
            log_var: Mlp::new(store, Group::SpatialDec, "dec.log_var", d, d, 2, Activation::Tanh, rng),
        }
    }

    /// `λ = softplus(MLP(z_g))`, 1×1.
    pub fn intensity<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, z_g: Var) -> Var {
        let o = self.intensity.forward(tape, p, z_g);
        tape.softplus(o)
    }

    /// Weight logits, means `MLP(z_i) + c_i` and floored log-variances.
    pub fn mixture<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, z_l: Var, coords: Var) -> MixtureVars {
        let logits = self.weight.forward(tape, p, z_l);
        let off = self.mean.forward(tape, p, z_l);
        let mean = tape.add(off, coords);
        let lv = self.log_var.forward(tape, p, z_l);
        let log_var = tape.clamp_min(lv, T::of(VAR_FLOOR.ln()));
        MixtureVars { logits, mean, log_var }
    }
}

/// `log λ − ΔΛ`.
pub fn temporal_logpdf<T: Real>(tape: &mut Tape<T>, lambda: Var, delta_lambda: Var) -> Var {
    let l = tape.log(lambda);
    tape.sub(l, delta_lambda)
}

/// `log Σ_i γ_i N(s; μ_i, diag σ²_i)` for a 1×2 point.
pub fn spatial_logpdf<T: Real>(tape: &mut Tape<T>, mix: &MixtureVars, point: Var) -> Var {
    tape.gmm_log_density(mix.logits, mix.mean, mix.log_var, point)
}

/// Plain-value mixture for sampling and export.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpatialMixture {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub vars: Vec<[f64; 2]>,
}

impl SpatialMixture {
    pub fn from_tape<T: Real>(tape: &Tape<T>, mix: &MixtureVars) -> Self {
        let logits: Vec<f64> = tape.value(mix.logits).data.iter().map(|v| v.as_f64()).collect();
        let lse = log_sum_exp(logits.iter().copied());
        let mu = tape.value(mix.mean);
        let lv = tape.value(mix.log_var);
        let k = logits.len();
        SpatialMixture {
            weights: logits.iter().map(|l| (l - lse).exp()).collect(),
            means: (0..k).map(|i| [mu.at(i, 0).as_f64(), mu.at(i, 1).as_f64()]).collect(),
            vars: (0..k).map(|i| [lv.at(i, 0).as_f64().exp(), lv.at(i, 1).as_f64().exp()]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn log_pdf(&self, s: [f64; 2]) -> f64 {
        let terms = (0..self.len()).map(|i| {
            let mut acc = self.weights[i].ln();
            for a in 0..2 {
                let v = self.vars[i][a];
                let r = s[a] - self.means[i][a];
                acc -= 0.5 * ((2.0 * PI * v).ln() + r * r / v);
            }
            acc
        });
        log_sum_exp(terms)
    }

    pub fn sample_component(&self, rng: &mut impl Rng) -> usize {
        let mut u: f64 = rng.gen();
        for (i, w) in self.weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        self.len() - 1
    }

    /// Component `i ~ weights`, then `s ~ N(μ_i, diag σ²_i)`.
    pub fn sample(&self, rng: &mut impl Rng) -> [f64; 2] {
        let i = self.sample_component(rng);
        [0, 1].map(|a| {
            let z: f64 = StandardNormal.sample(rng);
            self.means[i][a] + self.vars[i][a].sqrt() * z
        })
    }
}
