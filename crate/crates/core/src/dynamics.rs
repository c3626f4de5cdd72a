//! T-GRU cells, drift and jump encoders and the fixed-step RK4 integrator.

use rand::Rng;

use crate::diffcore::{Bound, Group, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::nn::Linear;
use crate::saag::{GraphCache, Saag};

/// Gated recurrent update whose input is augmented with projected time
/// features: `x̂ = [x, W_t·tf + b_t]`,
/// `r, u = σ(W_{r,u}[x̂, h] + b)`, `h̃ = tanh(W_h[x̂, r⊙h] + b_h)`,
/// `h' = u⊙h + (1−u)⊙h̃`. Rows of `h` are updated independently with shared
/// weights.
#[derive(Clone, Debug)]
pub struct TgruCell {
    pub d: usize,
    pub d_x: usize,
    pub time: Linear,
    /// Reset and update gates fused into one `(d_x + d_t + d) × 2d` map.
    pub gates: Linear,
    pub cand: Linear,
}

impl TgruCell {
    pub fn new(store: &mut ParamStore, group: Group, name: &str, d_x: usize, d: usize, d_t: usize, rng: &mut impl Rng) -> Self {
        let d_in = d_x + d_t + d;
        TgruCell {
            d,
            d_x,
            time: Linear::new(store, group, &format!("{name}.time"), 2, d_t, rng),
            gates: Linear::new(store, group, &format!("{name}.gates"), d_in, 2 * d, rng),
            cand: Linear::new(store, group, &format!("{name}.cand"), d_in, d, rng),
        }
    }

    /// `h` is n×d, `x` n×d_x (or `None` when `d_x == 0`), `tf` the 1×2 time
    /// features.
    pub fn step<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, h: Var, x: Option<Var>, tf: Var) -> Var {
        let n = tape.value(h).rows();
        let mut tp = self.time.forward(tape, p, tf);
        if n > 1 {
            tp = tape.repeat_rows(tp, n);
        }
        let mut parts: Vec<Var> = x.into_iter().collect();
        parts.push(tp);
        parts.push(h);
        let xh = tape.concat_cols(&parts);
        let g = self.gates.forward(tape, p, xh);
        let g = tape.sigmoid(g);
        let r = tape.slice_cols(g, 0, self.d);
        let u = tape.slice_cols(g, self.d, self.d);
        let rh = tape.mul(r, h);
        *parts.last_mut().expect("h pushed") = rh;
        let xc = tape.concat_cols(&parts);
        let c = self.cand.forward(tape, p, xc);
        let c = tape.tanh(c);
        let diff = tape.sub(h, c);
        let keep = tape.mul(u, diff);
        tape.add(c, keep)
    }
}

/// `[t / time_ref, t − t_last]`.
pub fn time_features<T: Real>(tape: &mut Tape<T>, t: f64, t_last: f64, time_ref: f64) -> Var {
    tape.constant(Tensor::row(vec![T::of(t / time_ref), T::of(t - t_last)]))
}

/// Number of equal RK4 steps covering `dt` with step at most `h_max`.
pub fn num_steps(dt: f64, h_max: f64) -> usize {
    if dt <= 0.0 {
        0
    } else {
        // tolerance keeps exact multiples like 1.0 / 0.05 from gaining a step
        ((dt / h_max - 1e-9).ceil() as usize).max(1)
    }
}

/// Classical RK4 on a tuple of tape variables from `t0` to `t1`.
/// `field(tape, t, y)` returns `dy/dt` with the same layout as `y`.
pub fn rk4_integrate<T: Real, F>(tape: &mut Tape<T>, y0: Vec<Var>, t0: f64, t1: f64, h_max: f64, field: &mut F) -> Vec<Var>
where
    F: FnMut(&mut Tape<T>, f64, &[Var]) -> Vec<Var>,
{
    assert!(t1 >= t0, "integration interval runs backwards: {t0} -> {t1}");
    let n = num_steps(t1 - t0, h_max);
    if n == 0 {
        return y0;
    }
    let h = (t1 - t0) / n as f64;
    let mut y = y0;
    for step in 0..n {
        let t = t0 + step as f64 * h;
        let k1 = field(tape, t, &y);
        let y2: Vec<Var> = y.iter().zip(&k1).map(|(&a, &k)| tape.lincomb(&[(a, T::one()), (k, T::of(h / 2.0))])).collect();
        let k2 = field(tape, t + h / 2.0, &y2);
        let y3: Vec<Var> = y.iter().zip(&k2).map(|(&a, &k)| tape.lincomb(&[(a, T::one()), (k, T::of(h / 2.0))])).collect();
        let k3 = field(tape, t + h / 2.0, &y3);
        let y4: Vec<Var> = y.iter().zip(&k3).map(|(&a, &k)| tape.lincomb(&[(a, T::one()), (k, T::of(h))])).collect();
        let k4 = field(tape, t + h, &y4);
        y = (0..y.len())
            .map(|i| {
                tape.lincomb(&[
                    (y[i], T::one()),
                    (k1[i], T::of(h / 6.0)),
                    (k2[i], T::of(h / 3.0)),
                    (k3[i], T::of(h / 3.0)),
                    (k4[i], T::of(h / 6.0)),
                ])
            })
            .collect();
    }
    y
}

/// Parameter handles of the state dynamics.
#[derive(Clone, Debug)]
pub struct Dynamics {
    pub d: usize,
    pub k: usize,
    pub z_g0: ParamId,
    /// Shared initial local state (1×d) plus per-anchor offsets (K×d).
    pub z_l0: ParamId,
    pub z_l_offset: ParamId,
    pub drift_global: TgruCell,
    pub drift_local: TgruCell,
    pub jump_global: TgruCell,
    pub jump_local: TgruCell,
}

impl Dynamics {
    pub fn register(store: &mut ParamStore, k: usize, d: usize, d_t: usize, rng: &mut impl Rng) -> Self {
        let z_g0 = store.add(Group::TgruGlobal, "dyn.z_g0", Tensor::zeros(&[1, d]));
        let z_l0 = store.add(Group::TgruLocal, "dyn.z_l0", Tensor::zeros(&[1, d]));
        let offs = (0..k * d).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let z_l_offset = store.add(Group::TgruLocal, "dyn.z_l_offset", Tensor::matrix(k, d, offs));
        Dynamics {
            d,
            k,
            z_g0,
            z_l0,
            z_l_offset,
            drift_global: TgruCell::new(store, Group::DriftGlobal, "dyn.drift_g", 0, d, d_t, rng),
            drift_local: TgruCell::new(store, Group::DriftLocal, "dyn.drift_l", d, d, d_t, rng),
            jump_global: TgruCell::new(store, Group::JumpGlobal, "dyn.jump_g", 2, d, d_t, rng),
            jump_local: TgruCell::new(store, Group::JumpLocal, "dyn.jump_l", d, d, d_t, rng),
        }
    }

    pub fn initial<T: Real>(&self, tape: &mut Tape<T>, p: &Bound) -> (Var, Var) {
        let base = tape.repeat_rows(p[self.z_l0], self.k);
        let z_l = tape.add(base, p[self.z_l_offset]);
        (p[self.z_g0], z_l)
    }

    /// `f^G = tgru(z_g, ∅, tf) − z_g`.
    pub fn global_drift<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, z_g: Var, tf: Var) -> Var {
        let h = self.drift_global.step(tape, p, z_g, None, tf);
        tape.sub(h, z_g)
    }

    /// `f^L = tgru(Z_l, L-GCN(Z_l), tf) − Z_l`, row-wise.
    pub fn local_drift<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, saag: &Saag, cache: &GraphCache, z_l: Var, tf: Var) -> Var {
        let msg = saag.lgcn(tape, p, cache, z_l);
        let h = self.drift_local.step(tape, p, z_l, Some(msg), tf);
        tape.sub(h, z_l)
    }

    /// Jump maps at an event located at `point` (1×2).
    pub fn jump<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        saag: &Saag,
        z_g: Var,
        z_l: Var,
        point: Var,
        tf: Var,
    ) -> (Var, Var) {
        let g = self.jump_global.step(tape, p, z_g, Some(point), tf);
        let enc = saag.rle(tape, p, point);
        let l = self.jump_local.step(tape, p, z_l, Some(enc), tf);
        (g, l)
    }
}
