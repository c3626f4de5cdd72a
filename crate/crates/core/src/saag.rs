//! Self-adaptive anchor graph: trainable anchors, the two adjacency heads,
//! the location-aware graph convolution and the relative location encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, Group, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::nn::{Activation, Linear, Mlp};

/// Column-normalization guard.
pub const ADJ_EPS: f64 = 1e-8;
/// Below this distance the relative direction of an event is the zero vector.
pub const RLE_EPS: f64 = 1e-12;

/// Which adjacency heads take part in message passing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoDist,
    NoLatent,
    NoGraph,
}

impl Ablation {
    pub fn use_dist(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoLatent)
    }

    pub fn use_latent(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoDist)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Ablation::Full),
            "no_dist" => Some(Ablation::NoDist),
            "no_latent" => Some(Ablation::NoLatent),
            "no_graph" => Some(Ablation::NoGraph),
            _ => None,
        }
    }
}

/// Parameter handles of the anchor graph.
#[derive(Clone, Debug)]
pub struct Saag {
    pub k: usize,
    pub d: usize,
    pub beta: f64,
    pub layers: usize,
    pub ablation: Ablation,
    /// K×2 anchor coordinates.
    pub coords: ParamId,
    /// log of the RBF decay rate.
    pub log_gamma: ParamId,
    pub e1: ParamId,
    pub e2: ParamId,
    pub filter_in: Linear,
    pub filter_out: Linear,
    /// Selection weights `W^(m)_head`, indexed `[m][head]`.
    pub select: Vec<[ParamId; 2]>,
    pub select_bias: ParamId,
    pub rle_mlp: Mlp,
    /// Unconstrained decay rates; the effective rate is `softplus(psi_raw)`.
    pub psi_raw: ParamId,
}

pub struct SaagDims {
    pub k: usize,
    pub d_model: usize,
    pub d_embed: usize,
    pub layers: usize,
    pub beta: f64,
    pub gamma_init: f64,
    pub ablation: Ablation,
}

impl Saag {
    pub fn register(store: &mut ParamStore, dims: &SaagDims, anchors: Tensor<f64>, rng: &mut impl Rng) -> Self {
        let SaagDims { k, d_model: d, d_embed, layers, beta, gamma_init, ablation } = *dims;
        assert_eq!(anchors.shape, vec![k, 2], "anchor coordinates must be K×2");
        assert!(gamma_init > 0.0);
        let coords = store.add(Group::AnchorCoords, "saag.coords", anchors);
        store.set_no_decay(coords);
        let log_gamma = store.add(Group::Lgcn, "saag.log_gamma", Tensor::scalar(gamma_init.ln()));
        store.set_no_decay(log_gamma);
        let e1 = store.add_weight(Group::NodeEmbeds, "saag.e1", d_embed, k, rng);
        let e2 = store.add_weight(Group::NodeEmbeds, "saag.e2", d_embed, k, rng);
        // stored d_E×K for the fan-in bound; reshaped to K×d_E below
        for id in [e1, e2] {
            let t = store.value(id).clone();
            let mut data = vec![0.0; t.len()];
            for r in 0..d_embed {
                for c in 0..k {
                    data[c * d_embed + r] = t.at(r, c);
                }
            }
            *store.value_mut(id) = Tensor::matrix(k, d_embed, data);
        }
        let filter_in = Linear::new(store, Group::Lgcn, "saag.filter.l1", 2, d, rng);
        let filter_out = Linear::new(store, Group::Lgcn, "saag.filter.l2", d, d, rng);
        let select = (0..=layers)
            .map(|m| {
                [0, 1].map(|h| store.add_weight(Group::Lgcn, &format!("saag.select.{m}.{h}"), d, d, rng))
            })
            .collect();
        let select_bias = store.add_bias(Group::Lgcn, "saag.select.b", d);
        let rle_mlp = Mlp::new(store, Group::Rle, "saag.rle", 2, d, d, Activation::Silu, rng);
        // softplus(0.5413) ≈ 1
        let psi_raw = store.add(Group::Rle, "saag.psi", Tensor::full(&[1, d], (1f64.exp() - 1.0).ln()));
        Saag { k, d, beta, layers, ablation, coords, log_gamma, e1, e2, filter_in, filter_out, select, select_bias, rle_mlp, psi_raw }
    }

    /// Adjacency heads and the edge filter for the current parameters. These
    /// only depend on anchors and embeddings, so one forward pass computes
    /// them once.
    pub fn prepare<T: Real>(&self, tape: &mut Tape<T>, p: &Bound) -> GraphCache {
        let c = p[self.coords];
        let dist = if self.ablation.use_dist() {
            let gamma = tape.exp(p[self.log_gamma]);
            let a = build_distance_adjacency(tape, c, gamma);
            Some(normalize_adjacency(tape, a))
        } else {
            None
        };
        let latent = if self.ablation.use_latent() {
            let a = build_latent_adjacency(tape, p[self.e1], p[self.e2]);
            Some(normalize_adjacency(tape, a))
        } else {
            None
        };
        let filter = edge_position_filter(tape, p, c, &self.filter_in, &self.filter_out);
        GraphCache { heads: [dist, latent], filter }
    }

    /// Location-aware graph convolution over local states `z` (K×d).
    pub fn lgcn<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, cache: &GraphCache, z: Var) -> Var {
        let weights: Vec<[Var; 2]> = self.select.iter().map(|w| [p[w[0]], p[w[1]]]).collect();
        lgcn_forward(tape, z, cache, self.beta, self.layers, &weights, p[self.select_bias])
    }

    /// Relative location encoding of `point` (1×2) for every anchor.
    pub fn rle<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, point: Var) -> Var {
        let psi = tape.softplus(p[self.psi_raw]);
        rle_encode(tape, p, point, p[self.coords], &self.rle_mlp, psi)
    }

    /// Plain-value adjacency matrices (raw, before normalization) for export.
    pub fn adjacency_values(&self, store: &ParamStore) -> [Tensor<f64>; 2] {
        let mut tape = Tape::<f64>::new();
        let p = store.bind_frozen(&mut tape);
        let gamma = tape.exp(p[self.log_gamma]);
        let dist = build_distance_adjacency(&mut tape, p[self.coords], gamma);
        let latent = build_latent_adjacency(&mut tape, p[self.e1], p[self.e2]);
        let zeros = Tensor::zeros(&[self.k, self.k]);
        [
            if self.ablation.use_dist() { tape.value(dist).clone() } else { zeros.clone() },
            if self.ablation.use_latent() { tape.value(latent).clone() } else { zeros },
        ]
    }
}

/// Normalized adjacency per head (`None` for a disabled head) and the edge
/// filter `P` laid out as (K·K)×d with row `i·K + j` holding `P[i,j]`.
#[derive(Clone, Debug)]
pub struct GraphCache {
    pub heads: [Option<Var>; 2],
    pub filter: Var,
}

/// `A^d[i,j] = exp(−γ‖c_i − c_j‖²)` off the diagonal, zero on it.
pub fn build_distance_adjacency<T: Real>(tape: &mut Tape<T>, coords: Var, gamma: Var) -> Var {
    let k = tape.value(coords).rows();
    let diff = tape.pairwise_diff(coords);
    let sq = tape.square(diff);
    let ones = tape.constant(Tensor::full(&[2, 1], T::one()));
    let d2 = tape.matmul(sq, ones);
    let scaled = tape.scale_by(d2, gamma);
    let neg = tape.scale(scaled, -T::one());
    let kernel = tape.exp(neg);
    let mut mask = Tensor::full(&[k * k, 1], T::one());
    for i in 0..k {
        mask.data[i * k + i] = T::zero();
    }
    let mask = tape.constant(mask);
    let masked = tape.mul(kernel, mask);
    tape.reshape(masked, &[k, k])
}

/// `A^l = softplus(E1·E2ᵀ − E2·E1ᵀ)`.
pub fn build_latent_adjacency<T: Real>(tape: &mut Tape<T>, e1: Var, e2: Var) -> Var {
    let a = tape.matmul_nt(e1, e2);
    let b = tape.matmul_nt(e2, e1);
    let m = tape.sub(a, b);
    tape.softplus(m)
}

/// Divides the incoming weights of every node by `ε + Σ_j A[j,i]`.
pub fn normalize_adjacency<T: Real>(tape: &mut Tape<T>, a: Var) -> Var {
    tape.col_normalize(a, T::of(ADJ_EPS))
}

/// `P[i,j] = tanh(W₂·SiLU(W₁(c_i − c_j) + b₁) + b₂)`.
pub fn edge_position_filter<T: Real>(tape: &mut Tape<T>, p: &Bound, coords: Var, l1: &Linear, l2: &Linear) -> Var {
    let diff = tape.pairwise_diff(coords);
    let h = l1.forward(tape, p, diff);
    let h = tape.silu(h);
    let o = l2.forward(tape, p, h);
    tape.tanh(o)
}

/// L-GCN: per head `H^(m)[i] = β H^(m−1)[i] + (1−β) Σ_j Ã[j,i] (P[j,i] ⊙ H^(m−1)[j])`
/// starting from `H^(0) = z`, followed by `Σ_head Σ_m H^(m)[head] W^(m)_head + b`.
/// A disabled head has zero adjacency, so its states only decay by `β`.
pub fn lgcn_forward<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    cache: &GraphCache,
    beta: f64,
    layers: usize,
    select: &[[Var; 2]],
    bias: Var,
) -> Var {
    assert_eq!(select.len(), layers + 1, "one selection weight pair per layer");
    // row j·K + i of the filter is P[j,i], the filter on the message j → i
    let filter = cache.filter;
    let mut terms = Vec::with_capacity(2 * (layers + 1));
    for head in 0..2 {
        let mut h = z;
        terms.push(tape.matmul(h, select[0][head]));
        for w in select.iter().skip(1) {
            h = match cache.heads[head] {
                Some(adj) => {
                    let msg = tape.edge_aggregate(adj, filter, h);
                    tape.lincomb(&[(h, T::of(beta)), (msg, T::of(1.0 - beta))])
                }
                None => tape.scale(h, T::of(beta)),
            };
            terms.push(tape.matmul(h, w[head]));
        }
    }
    let ones: Vec<(Var, T)> = terms.iter().map(|&t| (t, T::one())).collect();
    let sum = tape.lincomb(&ones);
    tape.add_row(sum, bias)
}

/// `x_i = MLP(α_i) · exp(−ψ l_i)` with `α_i` the unit direction from anchor
/// `i` to the event and `l_i` its distance.
pub fn rle_encode<T: Real>(tape: &mut Tape<T>, p: &Bound, point: Var, coords: Var, mlp: &Mlp, psi: Var) -> Var {
    let k = tape.value(coords).rows();
    let s = tape.repeat_rows(point, k);
    let diff = tape.sub(s, coords);
    let dist = tape.row_norm(diff, T::of(RLE_EPS));
    let dir = tape.row_normalize(diff, T::of(RLE_EPS));
    let feat = mlp.forward(tape, p, dir);
    let rate = tape.matmul(dist, psi);
    let neg = tape.scale(rate, -T::one());
    let decay = tape.exp(neg);
    tape.mul(feat, decay)
}
