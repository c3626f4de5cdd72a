use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use super::{DataError, Event, EventSequence};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub sequences: usize,
    pub events: usize,
    pub mean_length: f64,
}

impl DatasetSummary {
    pub fn of(seqs: &[EventSequence]) -> Self {
        let events: usize = seqs.iter().map(|s| s.len()).sum();
        DatasetSummary {
            sequences: seqs.len(),
            events,
            mean_length: if seqs.is_empty() { 0.0 } else { events as f64 / seqs.len() as f64 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub sequences: Vec<EventSequence>,
    pub summary: DatasetSummary,
    /// Ground-truth `(log p(t_i), log p(s_i | t_i))` per event, present when
    /// the file carries the `true_logpt,true_logps` columns.
    pub truth: Option<Vec<Vec<(f64, f64)>>>,
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<LoadedDataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(file)
}

/// Parses `seq_id,t,x,y[,true_logpt,true_logps]`. Rows of one sequence must be
/// contiguous with strictly increasing `t`; row numbers in errors are file
/// line numbers (the header is line 1).
pub fn read_csv(reader: impl Read) -> Result<LoadedDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => return Err(DataError::Parse { row: 1, msg: e.to_string() }),
        Err(e) => return Err(DataError::Parse { row: 1, msg: e.to_string() }),
    };
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(LoadedDataset { sequences: Vec::new(), summary: DatasetSummary::of(&[]), truth: None });
    }
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| DataError::MissingColumn(name.to_string()));
    let (ci, ct, cx, cy) = (need("seq_id")?, need("t")?, need("x")?, need("y")?);
    let truth_cols = match (col("true_logpt"), col("true_logps")) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    };

    let mut seqs: Vec<EventSequence> = Vec::new();
    let mut truth: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DataError::Parse {
            row: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let num = |c: usize, name: &str| -> Result<f64, DataError> {
            let raw = rec.get(c).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Parse { row, msg: format!("column `{name}`: cannot parse `{raw}` as a finite number") })
        };
        let id = rec.get(ci).unwrap_or("").to_string();
        let ev = Event::new(num(ct, "t")?, num(cx, "x")?, num(cy, "y")?);
        let same = seqs.last().is_some_and(|s| s.id == id);
        if !same {
            if !seen.insert(id.clone()) {
                return Err(DataError::NotContiguous { row, seq_id: id });
            }
            seqs.push(EventSequence { id: id.clone(), events: Vec::new() });
            truth.push(Vec::new());
        }
        let cur = seqs.last_mut().expect("pushed above");
        if let Some(prev) = cur.events.last() {
            if !(ev.t > prev.t) {
                return Err(DataError::NonMonotone { row, seq_id: id, t: ev.t, prev: prev.t });
            }
        } else if ev.t < 0.0 {
            return Err(DataError::BeforeOrigin { seq_id: id, index: 0, t: ev.t });
        }
        cur.events.push(ev);
        if let Some((a, b)) = truth_cols {
            truth.last_mut().expect("pushed above").push((num(a, "true_logpt")?, num(b, "true_logps")?));
        }
    }
    let summary = DatasetSummary::of(&seqs);
    Ok(LoadedDataset { sequences: seqs, summary, truth: truth_cols.map(|_| truth) })
}

/// Writes sequences in the loader's schema. `{}` formatting of `f64` is the
/// shortest representation that parses back to the same bits.
pub fn write_csv(
    mut out: impl Write,
    seqs: &[EventSequence],
    truth: Option<&[Vec<(f64, f64)>]>,
) -> Result<(), DataError> {
    if truth.is_some() {
        writeln!(out, "seq_id,t,x,y,true_logpt,true_logps")?;
    } else {
        writeln!(out, "seq_id,t,x,y")?;
    }
    for (k, seq) in seqs.iter().enumerate() {
        for (i, e) in seq.events.iter().enumerate() {
            write!(out, "{},{},{},{}", seq.id, e.t, e.s[0], e.s[1])?;
            if let Some(tr) = truth {
                let (a, b) = tr[k][i];
                write!(out, ",{a},{b}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
