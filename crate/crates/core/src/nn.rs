//! Small layer helpers shared by the model components.

use rand::Rng;

use crate::diffcore::{Bound, Group, ParamId, ParamStore, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Silu => tape.silu(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, group: Group, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: store.add_weight(group, &format!("{name}.w"), fan_in, fan_out, rng),
            b: store.add_bias(group, &format!("{name}.b"), fan_out),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.affine(x, p[self.w], p[self.b])
    }
}

/// One hidden layer: `Linear → act → Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
    pub act: Activation,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        group: Group,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            hidden: Linear::new(store, group, &format!("{name}.l1"), d_in, d_hidden, rng),
            out: Linear::new(store, group, &format!("{name}.l2"), d_hidden, d_out, rng),
            act,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let h = self.hidden.forward(tape, p, x);
        let h = self.act.apply(tape, h);
        self.out.forward(tape, p, h)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.hidden.w, self.hidden.b, self.out.w, self.out.b]
    }
}
