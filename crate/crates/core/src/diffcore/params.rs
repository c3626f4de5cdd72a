use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Grads, Tape, Var};
use super::tensor::{Real, Tensor};

/// Parameter groups. Each trainable quantity of the model belongs to exactly
/// one of these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    AnchorCoords,
    NodeEmbeds,
    Lgcn,
    Rle,
    TgruGlobal,
    TgruLocal,
    DriftGlobal,
    DriftLocal,
    JumpGlobal,
    JumpLocal,
    TemporalDec,
    SpatialDec,
}

impl Group {
    pub const ALL: [Group; 12] = [
        Group::AnchorCoords,
        Group::NodeEmbeds,
        Group::Lgcn,
        Group::Rle,
        Group::TgruGlobal,
        Group::TgruLocal,
        Group::DriftGlobal,
        Group::DriftLocal,
        Group::JumpGlobal,
        Group::JumpLocal,
        Group::TemporalDec,
        Group::SpatialDec,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::AnchorCoords => "anchor_coords",
            Group::NodeEmbeds => "node_embeds",
            Group::Lgcn => "lgcn",
            Group::Rle => "rle",
            Group::TgruGlobal => "tgru_global",
            Group::TgruLocal => "tgru_local",
            Group::DriftGlobal => "drift_global",
            Group::DriftLocal => "drift_local",
            Group::JumpGlobal => "jump_global",
            Group::JumpLocal => "jump_local",
            Group::TemporalDec => "temporal_dec",
            Group::SpatialDec => "spatial_dec",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
    /// First and second moment estimates of the optimizer.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Excluded from decoupled weight decay.
    pub no_decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "StoreRepr")]
pub struct ParamStore {
    params: Vec<Param>,
    #[serde(skip)]
    by_name: BTreeMap<String, usize>,
    /// Number of optimizer steps taken so far.
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: Group, name: &str, value: Tensor<f64>) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let n = value.len();
        self.params.push(Param {
            name: name.to_string(),
            group,
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            no_decay: false,
        });
        let id = self.params.len() - 1;
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    /// Weight matrix `fan_in × fan_out`, uniform in ±1/√fan_in.
    pub fn add_weight(&mut self, group: Group, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(group, name, Tensor::matrix(fan_in, fan_out, data))
    }

    pub fn add_bias(&mut self, group: Group, name: &str, width: usize) -> ParamId {
        self.add(group, name, Tensor::zeros(&[1, width]))
    }

    pub fn set_no_decay(&mut self, id: ParamId) {
        self.params[id.0].no_decay = true;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<f64> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.clear();
            p.grad.resize(p.value.len(), 0.0);
        }
    }

    /// Adds `scale · g` into the gradient buffers.
    pub fn accumulate(&mut self, grads: &GradBuffer, scale: f64) {
        assert_eq!(grads.0.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if p.grad.len() != p.value.len() {
                p.grad.resize(p.value.len(), 0.0);
            }
            for (a, &b) in p.grad.iter_mut().zip(g) {
                *a += scale * b;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().flat_map(|p| p.grad.iter()).map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in &mut self.params {
                p.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    /// Places every parameter on `tape` as a trainable leaf.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.params.iter().map(|p| tape.leaf(p.value.cast(), true)).collect())
    }

    /// Places every parameter on `tape` as a constant.
    pub fn bind_frozen<T: Real>(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.params.iter().map(|p| tape.constant(p.value.cast())).collect())
    }

    /// Collects the gradient of each bound parameter from a reverse sweep.
    pub fn collect_grads<T: Real>(&self, bound: &Bound, grads: &Grads<T>) -> GradBuffer {
        GradBuffer(
            self.params
                .iter()
                .zip(&bound.0)
                .map(|(p, &v)| match grads.get(v) {
                    Some(g) => g.iter().map(|x| x.as_f64()).collect(),
                    None => vec![0.0; p.value.len()],
                })
                .collect(),
        )
    }

    fn rebuild_index(&mut self) {
        self.by_name = self.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        for p in &mut self.params {
            p.grad = vec![0.0; p.value.len()];
        }
    }

    /// Shape-compatible check used when loading checkpoints.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.name == b.name && a.value.shape == b.value.shape)
    }
}

#[derive(Deserialize)]
struct StoreRepr {
    params: Vec<Param>,
    step: u64,
}

impl From<StoreRepr> for ParamStore {
    fn from(r: StoreRepr) -> Self {
        let mut store = ParamStore { params: r.params, by_name: BTreeMap::new(), step: r.step };
        store.rebuild_index();
        store
    }
}

/// Tape handles for every parameter, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Per-parameter gradients detached from a [`ParamStore`], so that several
/// sequences can be differentiated independently and reduced afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer(pub Vec<Vec<f64>>);

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradBuffer(store.params.iter().map(|p| vec![0.0; p.value.len()]).collect())
    }

    pub fn add_scaled(&mut self, other: &GradBuffer, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}
