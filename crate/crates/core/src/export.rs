//! CSV exports for inspection: anchors with both adjacency heads, a spatial
//! log-density grid and per-event trajectory summaries.

use std::io::Write;

use crate::checkpoint::Checkpoint;
use crate::data::Event;
use crate::model::{trajectory_rows, Gstpp, ModelError, Pass};

/// `anchor_id,x,y` in raw coordinates, one row per anchor.
pub fn write_anchors(mut out: impl Write, model: &Gstpp, ck: &Checkpoint) -> std::io::Result<()> {
    writeln!(out, "anchor_id,x,y")?;
    for (i, c) in model.anchors(&ck.params).iter().enumerate() {
        let r = ck.normalizer.invert_point(*c);
        writeln!(out, "{i},{},{}", r[0], r[1])?;
    }
    Ok(())
}

/// Both K×K adjacency heads (before normalization) as dense blocks:
/// `head,row,c0,…,c{K-1}` with `head` = `distance` or `latent`. A head
/// disabled by the ablation is written as zeros.
pub fn write_adjacency(mut out: impl Write, model: &Gstpp, ck: &Checkpoint) -> std::io::Result<()> {
    let k = model.cfg.k;
    let cols: Vec<String> = (0..k).map(|j| format!("c{j}")).collect();
    writeln!(out, "head,row,{}", cols.join(","))?;
    let heads = model.saag.adjacency_values(&ck.params);
    for (name, a) in ["distance", "latent"].iter().zip(&heads) {
        for i in 0..k {
            let row: Vec<String> = a.row_slice(i).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{name},{i},{}", row.join(","))?;
        }
    }
    Ok(())
}

/// Grid specification in raw coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub res: usize,
}

impl GridSpec {
    /// Anchor bounding box padded by three raw standard deviations per axis.
    pub fn around_anchors(model: &Gstpp, ck: &Checkpoint, res: usize) -> Self {
        let raw: Vec<[f64; 2]> = model.anchors(&ck.params).iter().map(|c| ck.normalizer.invert_point(*c)).collect();
        let span = |a: usize| {
            let lo = raw.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
            let hi = raw.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
            let pad = 3.0 * ck.normalizer.loc_scale[a];
            [lo - pad, hi + pad]
        };
        GridSpec { x: span(0), y: span(1), res }
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        let at = |r: [f64; 2], i: usize| {
            if self.res == 1 {
                0.5 * (r[0] + r[1])
            } else {
                r[0] + (r[1] - r[0]) * i as f64 / (self.res - 1) as f64
            }
        };
        (0..self.res).flat_map(|i| (0..self.res).map(move |j| [at(self.x, j), at(self.y, i)])).collect()
    }
}

/// Raw-unit spatial log-density at raw time `t`, conditioned on the raw
/// `history` events strictly before `t`.
pub fn density_grid(model: &Gstpp, ck: &Checkpoint, history: &[Event], t: f64, grid: &GridSpec) -> Result<Vec<([f64; 2], f64)>, ModelError> {
    let norm = &ck.normalizer;
    let mut pass = Pass::<f64>::new(model, &ck.params, false);
    let mut s = pass.initial();
    for ev in history.iter().filter(|e| e.t < t) {
        let e = norm.event(ev);
        let (pre, _) = pass.advance(s, e.t);
        s = pass.jump(pre, &e);
    }
    let (at, _) = pass.advance(s, t * norm.time_scale);
    let mix = pass.mixture_value(at.z_l);
    let jac = norm.space_log_jacobian();
    Ok(grid.points().into_iter().map(|p| (p, mix.log_pdf(norm.point(p)) + jac)).collect())
}

pub fn write_density_grid(mut out: impl Write, rows: &[([f64; 2], f64)]) -> std::io::Result<()> {
    writeln!(out, "x,y,log_density")?;
    for (p, v) in rows {
        writeln!(out, "{},{},{}", p[0], p[1], v)?;
    }
    Ok(())
}

/// `i,t,delta_lambda,z_g_norm,z_l_max_norm` for each event of a raw-unit
/// sequence, taken at the pre-jump state.
pub fn write_trajectory(mut out: impl Write, model: &Gstpp, ck: &Checkpoint, events: &[Event]) -> std::io::Result<usize> {
    let norm: Vec<Event> = events.iter().map(|e| ck.normalizer.event(e)).collect();
    let rows = trajectory_rows(model, &ck.params, &norm);
    writeln!(out, "i,t,delta_lambda,z_g_norm,z_l_max_norm")?;
    for (r, e) in rows.iter().zip(events) {
        writeln!(out, "{},{},{},{},{}", r.i, e.t, r.delta_lambda, r.z_g_norm, r.z_l_max_norm)?;
    }
    Ok(rows.len())
}
