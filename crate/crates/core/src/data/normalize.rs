use serde::{Deserialize, Serialize};

use super::{DataError, Event, EventSequence};

/// Affine map from raw units to model units: `t' = t * time_scale` (the
/// origin stays at zero) and `s' = (s - loc_offset) / loc_scale` per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub time_scale: f64,
    pub loc_offset: [f64; 2],
    pub loc_scale: [f64; 2],
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer::identity()
    }
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer { time_scale: 1.0, loc_offset: [0.0; 2], loc_scale: [1.0; 2] }
    }

    /// Mean inter-event gap (first gap measured from the origin) becomes 1;
    /// each location axis gets zero mean and unit variance. A constant axis
    /// keeps scale 1.
    pub fn fit(train: &[EventSequence]) -> Result<Self, DataError> {
        let n: usize = train.iter().map(|s| s.len()).sum();
        if n == 0 {
            return Err(DataError::Empty);
        }
        let span: f64 = train.iter().map(|s| s.last_time()).sum();
        let mean_gap = span / n as f64;
        let time_scale = if mean_gap > 0.0 { 1.0 / mean_gap } else { 1.0 };

        let mut loc_offset = [0.0; 2];
        let mut loc_scale = [1.0; 2];
        for a in 0..2 {
            let vals = train.iter().flat_map(|s| s.events.iter().map(move |e| e.s[a]));
            let mean = vals.clone().sum::<f64>() / n as f64;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            loc_offset[a] = mean;
            if var > 0.0 {
                loc_scale[a] = var.sqrt();
            }
        }
        Ok(Normalizer { time_scale, loc_offset, loc_scale })
    }

    pub fn event(&self, e: &Event) -> Event {
        Event {
            t: e.t * self.time_scale,
            s: [0, 1].map(|a| (e.s[a] - self.loc_offset[a]) / self.loc_scale[a]),
        }
    }

    pub fn invert_event(&self, e: &Event) -> Event {
        Event {
            t: e.t / self.time_scale,
            s: [0, 1].map(|a| e.s[a] * self.loc_scale[a] + self.loc_offset[a]),
        }
    }

    pub fn point(&self, s: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|a| (s[a] - self.loc_offset[a]) / self.loc_scale[a])
    }

    pub fn invert_point(&self, s: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|a| s[a] * self.loc_scale[a] + self.loc_offset[a])
    }

    pub fn apply(&self, seq: &EventSequence) -> EventSequence {
        EventSequence { id: seq.id.clone(), events: seq.events.iter().map(|e| self.event(e)).collect() }
    }

    pub fn invert(&self, seq: &EventSequence) -> EventSequence {
        EventSequence { id: seq.id.clone(), events: seq.events.iter().map(|e| self.invert_event(e)).collect() }
    }

    pub fn apply_all(&self, seqs: &[EventSequence]) -> Vec<EventSequence> {
        seqs.iter().map(|s| self.apply(s)).collect()
    }

    /// Add to a model-unit temporal log-density to get raw units.
    pub fn time_log_jacobian(&self) -> f64 {
        self.time_scale.ln()
    }

    /// Add to a model-unit spatial log-density to get raw units.
    pub fn space_log_jacobian(&self) -> f64 {
        -(self.loc_scale[0].ln() + self.loc_scale[1].ln())
    }
}
