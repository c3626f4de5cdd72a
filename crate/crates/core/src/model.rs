//! Full model: configuration, parameter registration and the per-sequence
//! forward pass that produces likelihood terms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Event;
use crate::decoders::{spatial_logpdf, temporal_logpdf, Decoders, MixtureVars, SpatialMixture};
use crate::diffcore::{Bound, ParamStore, Real, Tape, Tensor, Var};
use crate::dynamics::{rk4_integrate, time_features, Dynamics};
use crate::saag::{Ablation, GraphCache, Saag, SaagDims};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid config: `{field}` {msg}")]
    InvalidConfig { field: &'static str, msg: String },
    #[error("checkpoint parameters do not match the model config: {0}")]
    LayoutMismatch(String),
    #[error("sequence `{0}` has no events")]
    EmptySequence(String),
}

fn invalid(field: &'static str, msg: impl Into<String>) -> ModelError {
    ModelError::InvalidConfig { field, msg: msg.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of anchors K.
    pub k: usize,
    pub d_model: usize,
    pub d_embed: usize,
    /// Width of the projected time features inside each T-GRU.
    pub d_time: usize,
    /// L-GCN layers M.
    pub layers: usize,
    /// L-GCN residual weight β.
    pub beta: f64,
    pub gamma_rbf_init: f64,
    pub ablation: Ablation,
    /// Largest RK4 step, in normalized time.
    pub h_max: f64,
    /// Divisor of absolute time in the T-GRU time features.
    pub time_ref: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 8,
            d_model: 16,
            d_embed: 16,
            d_time: 4,
            layers: 2,
            beta: 0.05,
            gamma_rbf_init: 1.0,
            ablation: Ablation::Full,
            h_max: 0.05,
            time_ref: 50.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.k < 1 {
            return Err(invalid("k", "must be at least 1"));
        }
        if self.d_model < 1 {
            return Err(invalid("d_model", "must be at least 1"));
        }
        if self.d_embed < 1 {
            return Err(invalid("d_embed", "must be at least 1"));
        }
        if self.d_time < 1 {
            return Err(invalid("d_time", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(invalid("beta", "must lie in [0, 1]"));
        }
        if !(self.gamma_rbf_init > 0.0 && self.gamma_rbf_init.is_finite()) {
            return Err(invalid("gamma_rbf_init", "must be positive"));
        }
        if !(self.h_max > 0.0 && self.h_max.is_finite()) {
            return Err(invalid("h_max", "must be positive"));
        }
        if !(self.time_ref > 0.0 && self.time_ref.is_finite()) {
            return Err(invalid("time_ref", "must be positive"));
        }
        Ok(())
    }
}

/// Parameter handles of every component. Registration order is fixed, so a
/// config always maps to the same parameter layout.
#[derive(Clone, Debug)]
pub struct Gstpp {
    pub cfg: ModelConfig,
    pub saag: Saag,
    pub dynamics: Dynamics,
    pub decoders: Decoders,
}

impl Gstpp {
    /// Fresh parameters with the given K×2 anchor coordinates.
    pub fn new(cfg: &ModelConfig, anchors: Tensor<f64>, seed: u64) -> Result<(Self, ParamStore), ModelError> {
        cfg.validate()?;
        if anchors.shape != [cfg.k, 2] {
            return Err(invalid("k", format!("anchors have shape {:?}, expected [{}, 2]", anchors.shape, cfg.k)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = SaagDims {
            k: cfg.k,
            d_model: cfg.d_model,
            d_embed: cfg.d_embed,
            layers: cfg.layers,
            beta: cfg.beta,
            gamma_init: cfg.gamma_rbf_init,
            ablation: cfg.ablation,
        };
        let saag = Saag::register(&mut store, &dims, anchors, &mut rng);
        let dynamics = Dynamics::register(&mut store, cfg.k, cfg.d_model, cfg.d_time, &mut rng);
        let decoders = Decoders::register(&mut store, cfg.d_model, &mut rng);
        Ok((Gstpp { cfg: cfg.clone(), saag, dynamics, decoders }, store))
    }

    /// Handles for an existing parameter store (e.g. from a checkpoint).
    pub fn attach(cfg: &ModelConfig, store: &ParamStore) -> Result<Self, ModelError> {
        let (model, fresh) = Gstpp::new(cfg, Tensor::zeros(&[cfg.k, 2]), 0)?;
        if !fresh.same_layout(store) {
            return Err(ModelError::LayoutMismatch(format!(
                "config expects {} tensors / {} scalars, checkpoint has {} / {}",
                fresh.len(),
                fresh.num_scalars(),
                store.len(),
                store.num_scalars()
            )));
        }
        Ok(model)
    }

    pub fn anchors(&self, store: &ParamStore) -> Vec<[f64; 2]> {
        let c = store.value(self.saag.coords);
        (0..self.cfg.k).map(|i| [c.at(i, 0), c.at(i, 1)]).collect()
    }
}

/// Global and local state at time `t`; `t_last` is the latest event time.
#[derive(Clone, Copy, Debug)]
pub struct State {
    pub z_g: Var,
    pub z_l: Var,
    pub t: f64,
    pub t_last: f64,
}

/// Per-event outputs of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EventRecord {
    pub pre: State,
    pub post: State,
    pub delta_lambda: Var,
    pub lambda: Var,
    pub log_pt: Var,
    pub log_ps: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NllVars {
    pub st: Var,
    pub t: Var,
    pub s: Var,
}

/// One forward pass: a tape with the parameters bound and the graph
/// quantities computed once.
pub struct Pass<'m, T: Real = f64> {
    pub model: &'m Gstpp,
    pub tape: Tape<T>,
    pub p: Bound,
    pub cache: GraphCache,
}

impl<'m, T: Real> Pass<'m, T> {
    /// `trainable` binds parameters as differentiable leaves; otherwise as
    /// constants so no gradient bookkeeping is kept.
    pub fn new(model: &'m Gstpp, store: &ParamStore, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let p = if trainable { store.bind(&mut tape) } else { store.bind_frozen(&mut tape) };
        let cache = model.saag.prepare(&mut tape, &p);
        Pass { model, tape, p, cache }
    }

    pub fn initial(&mut self) -> State {
        let (z_g, z_l) = self.model.dynamics.initial(&mut self.tape, &self.p);
        State { z_g, z_l, t: 0.0, t_last: 0.0 }
    }

    pub fn state_from_values(&mut self, z_g: &Tensor<f64>, z_l: &Tensor<f64>, t: f64, t_last: f64) -> State {
        let z_g = self.tape.constant(z_g.cast());
        let z_l = self.tape.constant(z_l.cast());
        State { z_g, z_l, t, t_last }
    }

    pub fn intensity(&mut self, z_g: Var) -> Var {
        self.model.decoders.intensity(&mut self.tape, &self.p, z_g)
    }

    pub fn mixture(&mut self, z_l: Var) -> MixtureVars {
        let coords = self.p[self.model.saag.coords];
        self.model.decoders.mixture(&mut self.tape, &self.p, z_l, coords)
    }

    pub fn mixture_value(&mut self, z_l: Var) -> SpatialMixture {
        let m = self.mixture(z_l);
        SpatialMixture::from_tape(&self.tape, &m)
    }

    /// Integrates `(z_g, Z_l, Λ)` to `t_end`; returns the new state and the
    /// compensator increment.
    pub fn advance(&mut self, s: State, t_end: f64) -> (State, Var) {
        let m = self.model;
        let zero = self.tape.constant(Tensor::scalar(T::zero()));
        let (p, cache, t_last) = (&self.p, &self.cache, s.t_last);
        let mut field = |tape: &mut Tape<T>, t: f64, y: &[Var]| {
            let tf = time_features(tape, t, t_last, m.cfg.time_ref);
            let fg = m.dynamics.global_drift(tape, p, y[0], tf);
            let fl = m.dynamics.local_drift(tape, p, &m.saag, cache, y[1], tf);
            let lam = m.decoders.intensity(tape, p, y[0]);
            vec![fg, fl, lam]
        };
        let y = rk4_integrate(&mut self.tape, vec![s.z_g, s.z_l, zero], s.t, t_end, m.cfg.h_max, &mut field);
        (State { z_g: y[0], z_l: y[1], t: t_end, t_last }, y[2])
    }

    /// Integrates only the global state and the compensator; the intensity
    /// does not depend on the local states.
    pub fn advance_global(&mut self, z_g: Var, t0: f64, t1: f64, t_last: f64) -> (Var, Var) {
        let m = self.model;
        let zero = self.tape.constant(Tensor::scalar(T::zero()));
        let p = &self.p;
        let mut field = |tape: &mut Tape<T>, t: f64, y: &[Var]| {
            let tf = time_features(tape, t, t_last, m.cfg.time_ref);
            let fg = m.dynamics.global_drift(tape, p, y[0], tf);
            let lam = m.decoders.intensity(tape, p, y[0]);
            vec![fg, lam]
        };
        let y = rk4_integrate(&mut self.tape, vec![z_g, zero], t0, t1, m.cfg.h_max, &mut field);
        (y[0], y[1])
    }

    /// Integrates only the local states.
    pub fn advance_local(&mut self, z_l: Var, t0: f64, t1: f64, t_last: f64) -> Var {
        let m = self.model;
        let (p, cache) = (&self.p, &self.cache);
        let mut field = |tape: &mut Tape<T>, t: f64, y: &[Var]| {
            let tf = time_features(tape, t, t_last, m.cfg.time_ref);
            vec![m.dynamics.local_drift(tape, p, &m.saag, cache, y[0], tf)]
        };
        rk4_integrate(&mut self.tape, vec![z_l], t0, t1, m.cfg.h_max, &mut field)[0]
    }

    /// Applies the jump maps for an event at the current state time.
    pub fn jump(&mut self, s: State, ev: &Event) -> State {
        let tf = time_features(&mut self.tape, ev.t, s.t_last, self.model.cfg.time_ref);
        let point = self.tape.constant(Tensor::row(vec![T::of(ev.s[0]), T::of(ev.s[1])]));
        let (z_g, z_l) = self.model.dynamics.jump(&mut self.tape, &self.p, &self.model.saag, s.z_g, s.z_l, point, tf);
        State { z_g, z_l, t: ev.t, t_last: ev.t }
    }

    /// Runs the whole sequence, scoring each event at its pre-jump state.
    pub fn run(&mut self, events: &[Event]) -> Vec<EventRecord> {
        let mut s = self.initial();
        let mut out = Vec::with_capacity(events.len());
        for ev in events {
            let (pre, dl) = self.advance(s, ev.t);
            let lambda = self.intensity(pre.z_g);
            let log_pt = temporal_logpdf(&mut self.tape, lambda, dl);
            let mix = self.mixture(pre.z_l);
            let point = self.tape.constant(Tensor::row(vec![T::of(ev.s[0]), T::of(ev.s[1])]));
            let log_ps = spatial_logpdf(&mut self.tape, &mix, point);
            let post = self.jump(pre, ev);
            out.push(EventRecord { pre, post, delta_lambda: dl, lambda, log_pt, log_ps });
            s = post;
        }
        out
    }

    /// Mean per-event NLLs; `st` is formed as `t + s`.
    pub fn nll(&mut self, events: &[Event]) -> Option<NllVars> {
        if events.is_empty() {
            return None;
        }
        let recs = self.run(events);
        let w = T::of(-1.0 / recs.len() as f64);
        let t_terms: Vec<(Var, T)> = recs.iter().map(|r| (r.log_pt, w)).collect();
        let s_terms: Vec<(Var, T)> = recs.iter().map(|r| (r.log_ps, w)).collect();
        let t = self.tape.lincomb(&t_terms);
        let s = self.tape.lincomb(&s_terms);
        let st = self.tape.add(t, s);
        Some(NllVars { st, t, s })
    }

    pub fn value(&self, v: Var) -> Tensor<f64> {
        self.tape.value(v).cast()
    }
}

/// Per-event debugging values of a trajectory, at the pre-jump state.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub i: usize,
    pub t: f64,
    pub delta_lambda: f64,
    pub z_g_norm: f64,
    pub z_l_max_norm: f64,
}

pub fn trajectory_rows(model: &Gstpp, store: &ParamStore, events: &[Event]) -> Vec<TrajectoryRow> {
    let mut pass = Pass::<f64>::new(model, store, false);
    let recs = pass.run(events);
    recs.iter()
        .enumerate()
        .map(|(i, r)| {
            let zg = pass.tape.value(r.pre.z_g);
            let zl = pass.tape.value(r.pre.z_l);
            let z_l_max_norm =
                (0..zl.rows()).map(|k| zl.row_slice(k).iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
            TrajectoryRow {
                i,
                t: events[i].t,
                delta_lambda: pass.tape.scalar(r.delta_lambda),
                z_g_norm: zg.sq_norm().sqrt(),
                z_l_max_norm,
            }
        })
        .collect()
}
