//! Maximum-likelihood training, evaluation and anchor initialization.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::data::{EventSequence, Normalizer};
use crate::diffcore::{AdamW, GradBuffer, Group, LrSchedule, NonFinite, Param, ParamStore, Real, Tensor};
use crate::model::{Gstpp, ModelConfig, ModelError, Pass};
use crate::par::{map_indexed, Parallelism};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid config: `{field}` {msg}")]
    InvalidConfig { field: &'static str, msg: String },
    #[error("k-means needs at least {k} distinct locations, found {found}")]
    TooFewPoints { k: usize, found: usize },
    #[error("no training events")]
    NoData,
    #[error("sequence `{seq}`: {node}")]
    NonFinite { seq: String, node: NonFinite },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorInit {
    /// Seeded k-means over training locations.
    #[default]
    Kmeans,
    /// Cell centers of a regular grid over the bounding box of the training
    /// locations.
    Grid,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub val_frac: f64,
    pub clip_norm: f64,
    /// Learning-rate multiplier for the anchor coordinates.
    pub anchor_lr_scale: f64,
    pub anchor_init: AnchorInit,
    pub kmeans_iters: usize,
    pub precision: Precision,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            base_lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 16,
            seed: 0,
            patience: 5,
            val_frac: 0.1,
            clip_norm: 10.0,
            anchor_lr_scale: 10.0,
            anchor_init: AnchorInit::Kmeans,
            kmeans_iters: 100,
            precision: Precision::F64,
            parallelism: Parallelism::Rayon,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, msg: &str| Err(TrainError::InvalidConfig { field, msg: msg.to_string() });
        self.model.validate()?;
        if self.epochs < 1 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", "must be positive");
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return bad("min_lr", "must lie in [0, base_lr]");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return bad("val_frac", "must lie in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm", "must be positive");
        }
        if !(self.anchor_lr_scale > 0.0 && self.anchor_lr_scale.is_finite()) {
            return bad("anchor_lr_scale", "must be positive");
        }
        if self.kmeans_iters < 1 {
            return bad("kmeans_iters", "must be at least 1");
        }
        Ok(())
    }
}

/// Mean per-event NLLs over all events of a dataset, in raw data units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub st_nll: f64,
    pub t_nll: f64,
    pub s_nll: f64,
    pub n_events: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub st_nll: f64,
    pub t_nll: f64,
    pub s_nll: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    Completed,
    Patience { epoch: usize },
    Diverged(String),
}

pub struct TrainOutcome {
    /// Parameters with the best validation ST-NLL (training ST-NLL when there
    /// is no validation data).
    pub best: Checkpoint,
    /// Parameters after the last completed optimizer step.
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
    pub initial_anchors: Vec<[f64; 2]>,
}

pub fn write_history(mut out: impl Write, history: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(out, "epoch,split,st_nll,t_nll,s_nll,lr")?;
    for r in history {
        writeln!(out, "{},{},{},{},{},{}", r.epoch, r.split.as_str(), r.st_nll, r.t_nll, r.s_nll, r.lr)?;
    }
    Ok(())
}

fn sq(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn sorted_points(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts
}

/// Seeded k-means: the point nearest the global mean starts, the remaining
/// centers follow D²-sampling over the points in lexicographic order, then
/// at most `iters` Lloyd rounds.
pub fn kmeans(points: &[[f64; 2]], k: usize, seed: u64, iters: usize) -> Result<Vec<[f64; 2]>, TrainError> {
    let pts = sorted_points(points);
    let mut distinct = pts.clone();
    distinct.dedup();
    if k == 0 || distinct.len() < k {
        return Err(TrainError::TooFewPoints { k, found: distinct.len() });
    }
    let n = pts.len() as f64;
    let mean = [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n];
    let first = *pts.iter().min_by(|a, b| sq(**a, mean).total_cmp(&sq(**b, mean))).expect("non-empty");
    let mut centers = vec![first];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while centers.len() < k {
        let d2: Vec<f64> = pts.iter().map(|p| centers.iter().map(|c| sq(*p, *c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d2.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = pts.len() - 1;
        for (i, d) in d2.iter().enumerate() {
            if *d > 0.0 && u < *d {
                pick = i;
                break;
            }
            u -= d;
        }
        centers.push(pts[pick]);
    }
    let mut assign = vec![usize::MAX; pts.len()];
    for _ in 0..iters {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let best = (0..k).min_by(|&a, &b| sq(*p, centers[a]).total_cmp(&sq(*p, centers[b]))).expect("k >= 1");
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0, 0.0, 0.0]; k];
        for (p, &a) in pts.iter().zip(&assign) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            sums[a][2] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
    }
    Ok(centers)
}

/// Cell centers of a `⌈√K⌉`-column grid over the bounding box of `points`.
pub fn grid_anchors(points: &[[f64; 2]], k: usize) -> Vec<[f64; 2]> {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let cols = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    (0..k)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            [
                lo[0] + (hi[0] - lo[0]) * (c as f64 + 0.5) / cols as f64,
                lo[1] + (hi[1] - lo[1]) * (r as f64 + 0.5) / rows as f64,
            ]
        })
        .collect()
}

fn all_points(seqs: &[EventSequence]) -> Vec<[f64; 2]> {
    seqs.iter().flat_map(|s| s.events.iter().map(|e| e.s)).collect()
}

/// Per-sequence `(sum log p(t), sum log p(s), n)` in normalized units.
fn sequence_sums<T: Real>(model: &Gstpp, store: &ParamStore, seq: &EventSequence) -> Result<(f64, f64, usize), TrainError> {
    let mut pass = Pass::<T>::new(model, store, false);
    let recs = pass.run(&seq.events);
    let mut lt = 0.0;
    let mut ls = 0.0;
    for r in &recs {
        lt += pass.tape.scalar(r.log_pt).as_f64();
        ls += pass.tape.scalar(r.log_ps).as_f64();
    }
    if !(lt.is_finite() && ls.is_finite()) {
        let node = pass.tape.first_non_finite().unwrap_or(NonFinite { node: 0, op: "output" });
        return Err(TrainError::NonFinite { seq: seq.id.clone(), node });
    }
    Ok((lt, ls, recs.len()))
}

/// Mean per-event NLLs of already-normalized sequences, converted to raw
/// units with the normalizer's log-Jacobians.
pub fn evaluate_normalized(
    model: &Gstpp,
    store: &ParamStore,
    normalizer: &Normalizer,
    seqs: &[EventSequence],
    precision: Precision,
    par: Parallelism,
) -> Result<Metrics, TrainError> {
    let sums = map_indexed(par, seqs, |_, s| match precision {
        Precision::F64 => sequence_sums::<f64>(model, store, s),
        Precision::F32 => sequence_sums::<f32>(model, store, s),
    });
    let (mut lt, mut ls, mut n) = (0.0, 0.0, 0usize);
    for r in sums {
        let (a, b, c) = r?;
        lt += a;
        ls += b;
        n += c;
    }
    if n == 0 {
        return Err(TrainError::NoData);
    }
    let t_nll = -lt / n as f64 - normalizer.time_log_jacobian();
    let s_nll = -ls / n as f64 - normalizer.space_log_jacobian();
    Ok(Metrics { st_nll: t_nll + s_nll, t_nll, s_nll, n_events: n })
}

/// Evaluates raw-unit sequences with a checkpoint's model and normalizer.
pub fn evaluate(ck: &Checkpoint, seqs: &[EventSequence], par: Parallelism) -> Result<Metrics, TrainError> {
    let model = ck.build()?;
    let norm = ck.normalizer.apply_all(seqs);
    evaluate_normalized(&model, &ck.params, &ck.normalizer, &norm, Precision::F64, par)
}

fn sequence_grad<T: Real>(model: &Gstpp, store: &ParamStore, seq: &EventSequence) -> Result<(f64, GradBuffer), TrainError> {
    let mut pass = Pass::<T>::new(model, store, true);
    let nll = pass.nll(&seq.events).ok_or_else(|| ModelError::EmptySequence(seq.id.clone()))?;
    let loss = pass.tape.scalar(nll.st).as_f64();
    if !loss.is_finite() {
        let node = pass.tape.first_non_finite().unwrap_or(NonFinite { node: nll.st.index(), op: "output" });
        return Err(TrainError::NonFinite { seq: seq.id.clone(), node });
    }
    let grads = pass.tape.backward(nll.st);
    Ok((loss, store.collect_grads(&pass.p, &grads)))
}

/// Mean over the batch of per-sequence mean ST-NLL, and its gradient.
pub fn batch_loss_grad(
    model: &Gstpp,
    store: &ParamStore,
    batch: &[EventSequence],
    precision: Precision,
    par: Parallelism,
) -> Result<(f64, GradBuffer), TrainError> {
    let parts = map_indexed(par, batch, |_, s| match precision {
        Precision::F64 => sequence_grad::<f64>(model, store, s),
        Precision::F32 => sequence_grad::<f32>(model, store, s),
    });
    let mut total = GradBuffer::zeros_like(store);
    let mut loss = 0.0;
    let w = 1.0 / batch.len() as f64;
    for p in parts {
        let (l, g) = p?;
        loss += w * l;
        total.add_scaled(&g, w);
    }
    Ok((loss, total))
}

/// Initial anchors in normalized space according to `cfg.anchor_init`.
pub fn initial_anchors(cfg: &TrainConfig, train_norm: &[EventSequence]) -> Result<Vec<[f64; 2]>, TrainError> {
    let pts = all_points(train_norm);
    match cfg.anchor_init {
        AnchorInit::Kmeans => kmeans(&pts, cfg.model.k, cfg.seed, cfg.kmeans_iters),
        AnchorInit::Grid => {
            if pts.is_empty() {
                return Err(TrainError::NoData);
            }
            Ok(grid_anchors(&pts, cfg.model.k))
        }
    }
}

/// Fits the normalizer on `train`, initializes the model and runs AdamW with
/// a cosine schedule. Metrics are recorded after every epoch for both splits.
pub fn train(cfg: &TrainConfig, train: &[EventSequence], val: &[EventSequence]) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train: Vec<EventSequence> = train.iter().filter(|s| !s.is_empty()).cloned().collect();
    if train.is_empty() {
        return Err(TrainError::NoData);
    }
    let normalizer = Normalizer::fit(&train).map_err(|_| TrainError::NoData)?;
    let train_n = normalizer.apply_all(&train);
    let val_n: Vec<EventSequence> = normalizer.apply_all(val).into_iter().filter(|s| !s.is_empty()).collect();

    let anchors = initial_anchors(cfg, &train_n)?;
    let (model, mut store) =
        Gstpp::new(&cfg.model, Tensor::matrix(cfg.model.k, 2, anchors.iter().flatten().copied().collect()), cfg.seed)?;

    let batches_per_epoch = train_n.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule {
        base_lr: cfg.base_lr,
        min_lr: cfg.min_lr,
        total_steps: (cfg.epochs * batches_per_epoch) as u64,
    };
    let opt = AdamW::default();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    let ck = |store: &ParamStore, epoch: usize| Checkpoint::new(cfg.model.clone(), normalizer.clone(), store.clone(), epoch, cfg.seed);
    let mut best = ck(&store, 0);
    let mut best_score = f64::INFINITY;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut stop = StopReason::Completed;
    let mut order: Vec<usize> = (0..train_n.len()).collect();

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut lr = schedule.lr_at(store.step);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<EventSequence> = chunk.iter().map(|&i| train_n[i].clone()).collect();
            let (_, grads) = match batch_loss_grad(&model, &store, &batch, cfg.precision, cfg.parallelism) {
                Ok(r) => r,
                Err(e @ TrainError::NonFinite { .. }) => {
                    stop = StopReason::Diverged(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            lr = schedule.lr_at(store.step);
            store.zero_grad();
            store.accumulate(&grads, 1.0);
            store.clip_grad_norm(cfg.clip_norm);
            let scale = |p: &Param| if p.group == Group::AnchorCoords { cfg.anchor_lr_scale } else { 1.0 };
            opt.step_scaled(&mut store, lr, cfg.weight_decay, scale).map_err(|e| TrainError::InvalidConfig {
                field: "base_lr",
                msg: e.to_string(),
            })?;
        }

        let eval = |seqs: &[EventSequence]| evaluate_normalized(&model, &store, &normalizer, seqs, cfg.precision, cfg.parallelism);
        let tr = match eval(&train_n) {
            Ok(m) => m,
            Err(e @ TrainError::NonFinite { .. }) => {
                stop = StopReason::Diverged(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        history.push(EpochRecord { epoch, split: Split::Train, st_nll: tr.st_nll, t_nll: tr.t_nll, s_nll: tr.s_nll, lr });
        let score = if val_n.is_empty() {
            tr.st_nll
        } else {
            match eval(&val_n) {
                Ok(m) => {
                    history.push(EpochRecord { epoch, split: Split::Val, st_nll: m.st_nll, t_nll: m.t_nll, s_nll: m.s_nll, lr });
                    m.st_nll
                }
                Err(e @ TrainError::NonFinite { .. }) => {
                    stop = StopReason::Diverged(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        };
        if score < best_score {
            best_score = score;
            best = ck(&store, epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience.max(1) {
                stop = StopReason::Patience { epoch };
                break;
            }
        }
    }
    let last_epoch = history.last().map_or(0, |r| r.epoch);
    Ok(TrainOutcome { best, last: ck(&store, last_epoch), history, stop, initial_anchors: anchors })
}
