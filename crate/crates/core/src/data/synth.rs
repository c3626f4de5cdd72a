use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Event, EventSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    HomogeneousPoisson,
    StHawkes,
}

/// Isotropic Gaussian component of the ground-truth spatial layout.
/// `alpha` overrides the spec-level excitation for events falling in this
/// cluster's region (nearest center).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cluster {
    pub center: [f64; 2],
    pub sigma: f64,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default)]
    pub alpha: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SynthKind,
    /// Base rate μ.
    pub mu: f64,
    /// Hawkes kernel `alpha * exp(-beta * dt)`; branching ratio `alpha / beta`.
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    /// Std of offspring locations around their parent.
    #[serde(default = "one")]
    pub bandwidth: f64,
    pub clusters: Vec<Cluster>,
    pub horizon: f64,
    pub sequences: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub sequences: Vec<EventSequence>,
    /// `(log p(t_i | history), log p(s_i | t_i, history))` under the generator.
    pub truth: Vec<Vec<(f64, f64)>>,
}

impl SyntheticData {
    /// Mean per-event negative log-likelihoods `(t, s)` of the generator.
    pub fn mean_true_nll(&self) -> (f64, f64) {
        let n: usize = self.truth.iter().map(Vec::len).sum();
        let (a, b) = self.truth.iter().flatten().fold((0.0, 0.0), |(a, b), &(pt, ps)| (a - pt, b - ps));
        (a / n.max(1) as f64, b / n.max(1) as f64)
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return bad("mu must be positive");
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon must be positive");
        }
        if self.sequences == 0 {
            return bad("sequences must be at least 1");
        }
        if self.clusters.is_empty() {
            return bad("at least one cluster is required");
        }
        for (i, c) in self.clusters.iter().enumerate() {
            if !(c.sigma > 0.0 && c.weight > 0.0) || !c.center.iter().all(|v| v.is_finite()) {
                return bad(&format!("cluster {i}: sigma and weight must be positive, center finite"));
            }
            if c.alpha.is_some_and(|a| !(a >= 0.0)) {
                return bad(&format!("cluster {i}: alpha must be non-negative"));
            }
        }
        if self.kind == SynthKind::StHawkes {
            if !(self.beta > 0.0 && self.bandwidth > 0.0 && self.alpha >= 0.0) {
                return bad("hawkes needs beta > 0, bandwidth > 0, alpha >= 0");
            }
            let ratio = self.max_alpha() / self.beta;
            if ratio >= 1.0 {
                return Err(DataError::InvalidSpec(format!(
                    "explosive process: alpha/beta = {ratio} must be < 1"
                )));
            }
        }
        Ok(())
    }

    fn max_alpha(&self) -> f64 {
        self.clusters.iter().map(|c| c.alpha.unwrap_or(self.alpha)).fold(self.alpha, f64::max)
    }

    fn total_weight(&self) -> f64 {
        self.clusters.iter().map(|c| c.weight).sum()
    }

    /// Excitation carried by an event at `s`: its nearest cluster's alpha.
    pub fn alpha_at(&self, s: [f64; 2]) -> f64 {
        let near = self
            .clusters
            .iter()
            .min_by(|a, b| sq_dist(a.center, s).total_cmp(&sq_dist(b.center, s)))
            .expect("validated non-empty");
        near.alpha.unwrap_or(self.alpha)
    }

    /// Log-density of the ground-truth spatial mixture.
    pub fn mixture_logpdf(&self, s: [f64; 2]) -> f64 {
        let w = self.total_weight();
        let terms: Vec<f64> =
            self.clusters.iter().map(|c| (c.weight / w).ln() + gauss_logpdf(s, c.center, c.sigma)).collect();
        lse(&terms)
    }

    pub fn sample_mixture(&self, rng: &mut impl Rng) -> [f64; 2] {
        let mut u = rng.gen::<f64>() * self.total_weight();
        let mut pick = &self.clusters[self.clusters.len() - 1];
        for c in &self.clusters {
            if u < c.weight {
                pick = c;
                break;
            }
            u -= c.weight;
        }
        gauss_sample(rng, pick.center, pick.sigma)
    }
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn gauss_logpdf(s: [f64; 2], m: [f64; 2], sigma: f64) -> f64 {
    -sq_dist(s, m) / (2.0 * sigma * sigma) - (2.0 * PI * sigma * sigma).ln()
}

fn gauss_sample(rng: &mut impl Rng, m: [f64; 2], sigma: f64) -> [f64; 2] {
    let a: f64 = StandardNormal.sample(rng);
    let b: f64 = StandardNormal.sample(rng);
    [m[0] + sigma * a, m[1] + sigma * b]
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn exp_gap(rng: &mut impl Rng, rate: f64) -> f64 {
    let e: f64 = Exp1.sample(rng);
    e / rate
}

/// Sequence `i` draws from its own ChaCha stream, so output does not depend
/// on how many sequences are generated or in what order. Sequences with no
/// event before the horizon are dropped.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData, DataError> {
    spec.validate()?;
    let mut sequences = Vec::new();
    let mut truth = Vec::new();
    for i in 0..spec.sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let (events, tr) = match spec.kind {
            SynthKind::HomogeneousPoisson => poisson(spec, &mut rng),
            SynthKind::StHawkes => hawkes(spec, &mut rng),
        };
        if !events.is_empty() {
            sequences.push(EventSequence::new(i.to_string(), events)?);
            truth.push(tr);
        }
    }
    Ok(SyntheticData { sequences, truth })
}

fn poisson(spec: &SyntheticSpec, rng: &mut impl Rng) -> (Vec<Event>, Vec<(f64, f64)>) {
    let mut t = 0.0;
    let mut t_prev = 0.0;
    let mut ev = Vec::new();
    let mut tr = Vec::new();
    loop {
        t += exp_gap(rng, spec.mu);
        if t > spec.horizon {
            break;
        }
        let s = spec.sample_mixture(rng);
        ev.push(Event { t, s });
        tr.push((spec.mu.ln() - spec.mu * (t - t_prev), spec.mixture_logpdf(s)));
        t_prev = t;
    }
    (ev, tr)
}

/// Ogata thinning. Between events the intensity only decays, so its value
/// just after the current time is a valid majorant.
fn hawkes(spec: &SyntheticSpec, rng: &mut impl Rng) -> (Vec<Event>, Vec<(f64, f64)>) {
    let beta = spec.beta;
    let mut ev: Vec<Event> = Vec::new();
    let mut alphas: Vec<f64> = Vec::new();
    let mut tr = Vec::new();
    // excitation sum at the current time: Σ_j α_j e^{-β(t - t_j)}
    let excitation = |ev: &[Event], alphas: &[f64], t: f64| -> f64 {
        ev.iter().zip(alphas).map(|(e, a)| a * (-beta * (t - e.t)).exp()).sum()
    };
    let mut t = 0.0;
    let mut t_prev = 0.0;
    loop {
        let bound = spec.mu + excitation(&ev, &alphas, t);
        t += exp_gap(rng, bound);
        if t > spec.horizon {
            break;
        }
        let exc = excitation(&ev, &alphas, t);
        let lam = spec.mu + exc;
        if lam < bound && rng.gen::<f64>() * bound > lam {
            continue;
        }
        // source: background mixture or one past event
        let parent = if exc > 0.0 {
            let mut u = rng.gen::<f64>() * lam - spec.mu;
            let mut chosen = None;
            if u >= 0.0 {
                for (e, a) in ev.iter().zip(&alphas) {
                    u -= a * (-beta * (t - e.t)).exp();
                    if u < 0.0 {
                        chosen = Some(e.s);
                        break;
                    }
                }
                chosen.or(ev.last().map(|e| e.s))
            } else {
                None
            }
        } else {
            None
        };
        let s = match parent {
            Some(p) => gauss_sample(rng, p, spec.bandwidth),
            None => spec.sample_mixture(rng),
        };

        // compensator over (t_prev, t]
        let comp = spec.mu * (t - t_prev)
            + ev.iter()
                .zip(&alphas)
                .map(|(e, a)| a / beta * ((-beta * (t_prev - e.t)).exp() - (-beta * (t - e.t)).exp()))
                .sum::<f64>();
        let logpt = lam.ln() - comp;
        let mut terms = vec![spec.mu.ln() + spec.mixture_logpdf(s)];
        for (e, a) in ev.iter().zip(&alphas) {
            let w = a * (-beta * (t - e.t)).exp();
            if w > 0.0 {
                terms.push(w.ln() + gauss_logpdf(s, e.s, spec.bandwidth));
            }
        }
        let logps = lse(&terms) - lam.ln();

        alphas.push(spec.alpha_at(s));
        ev.push(Event { t, s });
        tr.push((logpt, logps));
        t_prev = t;
    }
    (ev, tr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(kind: SynthKind) -> SyntheticSpec {
        SyntheticSpec {
            kind,
            mu: 1.0,
            alpha: 0.0,
            beta: 1.0,
            bandwidth: 0.3,
            clusters: vec![
                Cluster { center: [-3.0, 0.0], sigma: 0.5, weight: 1.0, alpha: None },
                Cluster { center: [3.0, 0.0], sigma: 0.5, weight: 1.0, alpha: None },
            ],
            horizon: 50.0,
            sequences: 20,
            seed: 11,
        }
    }

    #[test]
    fn poisson_count_matches_rate() {
        let mut spec = base(SynthKind::HomogeneousPoisson);
        spec.mu = 2.0;
        spec.horizon = 100.0;
        spec.sequences = 50;
        let d = generate(&spec).unwrap();
        for s in &d.sequences {
            assert!((s.len() as f64 - 200.0).abs() <= 3.0 * 200f64.sqrt() + 1e-9, "count {}", s.len());
        }
    }

    #[test]
    fn hawkes_without_excitation_equals_poisson() {
        let a = generate(&base(SynthKind::HomogeneousPoisson)).unwrap();
        let b = generate(&base(SynthKind::StHawkes)).unwrap();
        assert_eq!(a.sequences, b.sequences);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn poisson_true_t_nll_is_exp_entropy() {
        // long horizon keeps the bias from the censored final gap small
        let mut spec = base(SynthKind::HomogeneousPoisson);
        spec.horizon = 500.0;
        spec.sequences = 100;
        let (t_nll, _) = generate(&spec).unwrap().mean_true_nll();
        assert!((t_nll - 1.0).abs() < 0.02, "{t_nll}");
    }

    #[test]
    fn explosive_spec_rejected() {
        let mut spec = base(SynthKind::StHawkes);
        spec.alpha = 1.2;
        assert!(matches!(generate(&spec), Err(DataError::InvalidSpec(_))));
        spec.alpha = 0.5;
        spec.clusters[1].alpha = Some(1.0);
        assert!(generate(&spec).is_err());
        spec.clusters[1].alpha = Some(0.9);
        assert!(generate(&spec).is_ok());
    }

    #[test]
    fn seeded_generation_is_reproducible_and_valid() {
        let mut spec = base(SynthKind::StHawkes);
        spec.alpha = 0.6;
        spec.clusters[0].alpha = Some(0.1);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        for s in &a.sequences {
            s.validate().unwrap();
        }
        assert!(a.truth.iter().flatten().all(|&(p, q)| p.is_finite() && q.is_finite()));
    }

    #[test]
    fn hawkes_rate_exceeds_base() {
        let mut spec = base(SynthKind::StHawkes);
        spec.alpha = 0.5;
        spec.sequences = 40;
        let d = generate(&spec).unwrap();
        let n: usize = d.sequences.iter().map(|s| s.len()).sum();
        // stationary rate μ / (1 - α/β) = 2
        let rate = n as f64 / (40.0 * spec.horizon);
        assert!(rate > 1.6 && rate < 2.3, "{rate}");
    }

    #[test]
    fn spatial_mixture_integrates_to_one() {
        // importance sampling from a broad Gaussian proposal
        let spec = base(SynthKind::HomogeneousPoisson);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let s = gauss_sample(&mut rng, [0.0, 0.0], 3.0);
            acc += (spec.mixture_logpdf(s) - gauss_logpdf(s, [0.0, 0.0], 3.0)).exp();
        }
        let z = acc / n as f64;
        assert!((z - 1.0).abs() < 0.01, "{z}");
    }

    #[test]
    fn hawkes_conditional_spatial_density_integrates_to_one() {
        // log p(s | t) for a fixed history: integrate with the mixture as proposal
        let mut spec = base(SynthKind::StHawkes);
        spec.alpha = 0.5;
        let hist = [Event::new(1.0, 0.0, 1.0), Event::new(1.5, 2.0, -1.0)];
        let t = 2.0;
        let w: Vec<f64> = hist.iter().map(|e| spec.alpha * (-(t - e.t) as f64).exp()).collect();
        let lam = spec.mu + w.iter().sum::<f64>();
        let logp = |s: [f64; 2]| {
            let mut terms = vec![spec.mu.ln() + spec.mixture_logpdf(s)];
            for (e, wi) in hist.iter().zip(&w) {
                terms.push(wi.ln() + gauss_logpdf(s, e.s, spec.bandwidth));
            }
            lse(&terms) - lam.ln()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let s = gauss_sample(&mut rng, [0.0, 0.0], 3.0);
            acc += (logp(s) - gauss_logpdf(s, [0.0, 0.0], 3.0)).exp();
        }
        assert!((acc / n as f64 - 1.0).abs() < 0.01);
    }
}
