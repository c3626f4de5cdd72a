use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use gstpp::checkpoint::{Checkpoint, CheckpointError};
use gstpp::data::{generate, load_csv, split_train_val, write_csv, DataError, DatasetSummary, EventSequence, SyntheticSpec};
use gstpp::export::{density_grid, write_adjacency, write_anchors, write_density_grid, write_trajectory, GridSpec};
use gstpp::model::ModelError;
use gstpp::sampling::{rollout_eval, write_samples, RolloutConfig, SampleError};
use gstpp::training::{evaluate, train, write_history, StopReason, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "gstpp", version, about = "Graph spatio-temporal point process: train, evaluate, export, simulate")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `data` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print NLL metrics of a checkpoint on a dataset as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also run teacher-forced sampling and report T-RMSE / S-Dist.
        #[arg(long)]
        sample: bool,
        #[arg(long, default_value_t = 20)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the per-event sample dump (with --sample).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write inspection CSVs from a checkpoint.
    Export {
        what: ExportKind,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Event history for density-grid and trajectory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Sequence to use from --data (default: the first).
        #[arg(long)]
        seq: Option<String>,
        /// Grid resolution per axis.
        #[arg(long, default_value_t = 50)]
        grid: usize,
        /// Raw time of the density grid (default: last event of the sequence).
        #[arg(long)]
        time: Option<f64>,
    },
    /// Generate a synthetic dataset from a TOML spec.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExportKind {
    Anchors,
    DensityGrid,
    Trajectory,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    data: Option<PathBuf>,
    /// Validation data; when absent `train.val_frac` of `data` is held out.
    val_data: Option<PathBuf>,
    out: Option<PathBuf>,
    #[serde(default)]
    train: TrainConfig,
}

/// Failure class, mapped to the process exit code.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(msg.into()))
}

fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        if c.is::<Invalid>() || c.is::<toml::de::Error>() {
            return true;
        }
        if let Some(d) = c.downcast_ref::<DataError>() {
            return !matches!(d, DataError::Io(_));
        }
        if let Some(m) = c.downcast_ref::<ModelError>() {
            return matches!(m, ModelError::InvalidConfig { .. } | ModelError::LayoutMismatch(_));
        }
        if let Some(t) = c.downcast_ref::<TrainError>() {
            return matches!(t, TrainError::InvalidConfig { .. } | TrainError::TooFewPoints { .. } | TrainError::NoData)
                || matches!(t, TrainError::Model(ModelError::InvalidConfig { .. }));
        }
        if let Some(k) = c.downcast_ref::<CheckpointError>() {
            return !matches!(k, CheckpointError::Io(_));
        }
        false
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let r = match cli.cmd {
        Cmd::Train { config, data, seed, out } => cmd_train(&config, data, seed, out),
        Cmd::Eval { checkpoint, data, sample, draws, seed, out } => cmd_eval(&checkpoint, &data, sample, draws, seed, out),
        Cmd::Export { what, checkpoint, out, data, seq, grid, time } => {
            cmd_export(what, &checkpoint, &out, data.as_deref(), seq.as_deref(), grid, time)
        }
        Cmd::Synth { config, seed, out } => cmd_synth(&config, seed, &out),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(invalid(format!("{what} `{}` does not exist or is not a file", path.display())));
    }
    Ok(())
}

fn prepare_out(dir: &Path) -> Result<()> {
    if dir.exists() && !dir.is_dir() {
        return Err(invalid(format!("output path `{}` is not a directory", dir.display())));
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let p = dir.join(name);
    Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
}

fn load(path: &Path) -> Result<Vec<EventSequence>> {
    let d = load_csv(path).with_context(|| format!("loading {}", path.display()))?;
    let s = d.summary;
    eprintln!("{}: {} sequences, {} events, mean length {:.1}", path.display(), s.sequences, s.events, s.mean_length);
    Ok(d.sequences)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require_file(path, "checkpoint")?;
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    require_file(path, "config")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_train(config: &Path, data: Option<PathBuf>, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut rc: RunConfig = read_toml(config)?;
    // relative paths in the config are resolved against its directory
    let base = config.parent().unwrap_or(Path::new("."));
    let resolve = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
    let data = data.or(rc.data.take().map(resolve)).ok_or_else(|| invalid("no training data: set `data` or pass --data"))?;
    let val_data = rc.val_data.take().map(resolve);
    let out = out.or(rc.out.take().map(resolve)).ok_or_else(|| invalid("no output directory: set `out` or pass --out"))?;
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    let cfg = rc.train;
    cfg.validate()?;
    require_file(&data, "data file")?;
    if let Some(v) = &val_data {
        require_file(v, "validation data file")?;
    }
    prepare_out(&out)?;

    let all = load(&data)?;
    let (tr, val) = match &val_data {
        Some(v) => (all, load(v)?),
        None => split_train_val(&all, cfg.val_frac, cfg.seed),
    };
    eprintln!("training on {} sequences, validating on {}", tr.len(), val.len());
    let outcome = train(&cfg, &tr, &val)?;
    for r in &outcome.history {
        eprintln!("epoch {:>3} {:<5} st {:.4} t {:.4} s {:.4} lr {:.2e}", r.epoch, r.split.as_str(), r.st_nll, r.t_nll, r.s_nll, r.lr);
    }

    outcome.best.save(out.join("checkpoint.json"))?;
    outcome.last.save(out.join("last.json"))?;
    write_history(create(&out, "history.csv")?, &outcome.history)?;
    let cfg_json = serde_json::to_string(&cfg)?;
    let hash = format!("{:x}", Sha256::digest(cfg_json.as_bytes()));
    let stop = match &outcome.stop {
        StopReason::Completed => "completed".to_string(),
        StopReason::Patience { epoch } => format!("patience at epoch {epoch}"),
        StopReason::Diverged(m) => format!("diverged: {m}"),
    };
    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config_hash": hash,
        "config": cfg,
        "data": data,
        "train": DatasetSummary::of(&tr),
        "val": DatasetSummary::of(&val),
        "best_epoch": outcome.best.epoch,
        "stop": stop,
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    let best = outcome.history.iter().rev().find(|r| r.epoch == outcome.best.epoch);
    println!(
        "{}",
        json!({
            "best_epoch": outcome.best.epoch,
            "st_nll": best.map(|r| r.st_nll),
            "t_nll": best.map(|r| r.t_nll),
            "s_nll": best.map(|r| r.s_nll),
            "stop": stop,
            "checkpoint": out.join("checkpoint.json"),
        })
    );
    if let StopReason::Diverged(m) = &outcome.stop {
        bail!("training diverged: {m}; best checkpoint kept");
    }
    Ok(())
}

fn cmd_eval(ck: &Path, data: &Path, sample: bool, draws: usize, seed: u64, out: Option<PathBuf>) -> Result<()> {
    require_file(data, "data file")?;
    if sample && draws == 0 {
        return Err(invalid("--draws must be at least 1"));
    }
    if let Some(o) = &out {
        prepare_out(o)?;
    }
    let ck = load_checkpoint(ck)?;
    let seqs = load(data)?;
    let par = TrainConfig::default().parallelism;
    let m = evaluate(&ck, &seqs, par)?;
    let mut rec = json!({ "st_nll": m.st_nll, "t_nll": m.t_nll, "s_nll": m.s_nll, "n_events": m.n_events });
    if sample {
        let cfg = RolloutConfig { draws, seed, ..RolloutConfig::default() };
        let (rep, preds) = rollout_eval(&ck, &seqs, &cfg, par).map_err(sample_error)?;
        rec["t_rmse"] = json!(rep.t_rmse);
        rec["s_dist"] = json!(rep.s_dist);
        if let Some(o) = &out {
            write_samples(create(o, "samples.csv")?, &preds)?;
        }
    }
    println!("{rec}");
    Ok(())
}

fn sample_error(e: SampleError) -> anyhow::Error {
    match e {
        SampleError::Model(m) => anyhow::Error::new(m),
        other => anyhow!(other),
    }
}

fn cmd_export(
    what: ExportKind,
    ck: &Path,
    out: &Path,
    data: Option<&Path>,
    seq: Option<&str>,
    grid: usize,
    time: Option<f64>,
) -> Result<()> {
    if grid == 0 {
        return Err(invalid("--grid must be at least 1"));
    }
    if let Some(d) = data {
        require_file(d, "data file")?;
    }
    let ck = load_checkpoint(ck)?;
    let model = ck.build()?;
    prepare_out(out)?;
    let pick = || -> Result<Option<EventSequence>> {
        let Some(d) = data else { return Ok(None) };
        let seqs = load(d)?;
        let s = match seq {
            Some(id) => seqs.into_iter().find(|s| s.id == id).ok_or_else(|| invalid(format!("no sequence `{id}` in data")))?,
            None => seqs.into_iter().next().ok_or_else(|| invalid("data file has no sequences"))?,
        };
        Ok(Some(s))
    };
    let summary = match what {
        ExportKind::Anchors => {
            write_anchors(create(out, "anchors.csv")?, &model, &ck)?;
            write_adjacency(create(out, "adjacency.csv")?, &model, &ck)?;
            eprintln!("wrote {} anchors", model.cfg.k);
            json!({ "anchors": model.cfg.k, "files": [out.join("anchors.csv"), out.join("adjacency.csv")] })
        }
        ExportKind::DensityGrid => {
            let history = pick()?.map(|s| s.events).unwrap_or_default();
            let t = time.unwrap_or_else(|| history.last().map_or(0.0, |e| e.t));
            let spec = GridSpec::around_anchors(&model, &ck, grid);
            let rows = density_grid(&model, &ck, &history, t, &spec)?;
            write_density_grid(create(out, "density_grid.csv")?, &rows)?;
            eprintln!("wrote {}x{} grid at t={t}", grid, grid);
            json!({ "rows": rows.len(), "t": t, "files": [out.join("density_grid.csv")] })
        }
        ExportKind::Trajectory => {
            let s = pick()?.ok_or_else(|| invalid("trajectory export needs --data"))?;
            let n = write_trajectory(create(out, "trajectory.csv")?, &model, &ck, &s.events)?;
            eprintln!("wrote {n} trajectory rows for sequence `{}`", s.id);
            json!({ "rows": n, "seq_id": s.id, "files": [out.join("trajectory.csv")] })
        }
    };
    println!("{summary}");
    Ok(())
}

fn cmd_synth(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec: SyntheticSpec = read_toml(config)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    prepare_out(out)?;
    let d = generate(&spec)?;
    write_csv(create(out, "events.csv")?, &d.sequences, Some(&d.truth))?;
    let (t, s) = d.mean_true_nll();
    let sum = DatasetSummary::of(&d.sequences);
    eprintln!("generated {} sequences, {} events", sum.sequences, sum.events);
    println!(
        "{}",
        json!({ "sequences": sum.sequences, "events": sum.events, "true_t_nll": t, "true_s_nll": s, "true_st_nll": t + s })
    );
    Ok(())
}
