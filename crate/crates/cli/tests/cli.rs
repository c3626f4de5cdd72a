use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gstpp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gstpp")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

const SYNTH: &str = r#"
kind = "homogeneous_poisson"
mu = 1.0
horizon = 12.0
sequences = 12
seed = 3

[[clusters]]
center = [-2.0, 0.0]
sigma = 0.7

[[clusters]]
center = [2.0, 1.0]
sigma = 0.5
"#;

fn synth(dir: &Path) -> String {
    let spec = dir.join("spec.toml");
    fs::write(&spec, SYNTH).unwrap();
    let out = dir.join("data");
    let o = gstpp(&["synth", "--config", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("events.csv").to_str().unwrap().to_string()
}

fn train_config(dir: &Path, data: &str, k: usize) -> String {
    let p = dir.join(format!("run_k{k}.toml"));
    let text = format!(
        r#"
data = "{data}"
out = "{}"

[train]
epochs = 2
batch_size = 4
seed = 5
val_frac = 0.25

[train.model]
k = {k}
d_model = 4
d_embed = 4
d_time = 2
h_max = 0.5
"#,
        dir.join("run").display()
    );
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn synth_is_deterministic_and_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path());
    let first = fs::read(&a).unwrap();
    let b = synth(dir.path());
    assert_eq!(first, fs::read(&b).unwrap());
    let d = gstpp::data::load_csv(&a).unwrap();
    assert!(d.summary.events > 0);
    assert!(d.truth.is_some());
    assert!(String::from_utf8(first).unwrap().starts_with("seq_id,t,x,y,true_logpt,true_logps"));
}

#[test]
fn explosive_hawkes_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("h.toml");
    fs::write(
        &spec,
        "kind = \"st_hawkes\"\nmu = 0.5\nalpha = 1.2\nbeta = 1.0\nhorizon = 10.0\nsequences = 2\n[[clusters]]\ncenter = [0.0, 0.0]\nsigma = 1.0\n",
    )
    .unwrap();
    let o = gstpp(&["synth", "--config", spec.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_eval_export_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = train_config(dir.path(), &data, 3);
    let o = gstpp(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    let ck = run.join("checkpoint.json");
    assert!(ck.is_file());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    let hist = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(hist.starts_with("epoch,split,st_nll,t_nll,s_nll,lr\n"));

    // same seed and config: same history
    let o = gstpp(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 0);
    assert_eq!(hist, fs::read_to_string(run.join("history.csv")).unwrap());

    let ck = ck.to_str().unwrap();
    let o = gstpp(&["eval", "--checkpoint", ck, "--data", &data]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = stdout_json(&o);
    let (st, t, s) = (m["st_nll"].as_f64().unwrap(), m["t_nll"].as_f64().unwrap(), m["s_nll"].as_f64().unwrap());
    assert!((st - t - s).abs() < 1e-12);

    let samples = dir.path().join("samples");
    let sample = |seed: &str| {
        let o = gstpp(&[
            "eval", "--checkpoint", ck, "--data", &data, "--sample", "--draws", "3", "--seed", seed, "--out",
            samples.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        stdout_json(&o)
    };
    let (a, b) = (sample("1"), sample("1"));
    assert!(a["t_rmse"].as_f64().unwrap() >= 0.0);
    assert_eq!(a["t_rmse"], b["t_rmse"]);
    assert_eq!(a["s_dist"], b["s_dist"]);
    let dump = fs::read_to_string(samples.join("samples.csv")).unwrap();
    assert!(dump.starts_with("seq_id,i,t_true,t_pred,x_true,y_true,x_pred,y_pred\n"));

    let ex = dir.path().join("export");
    let ex_s = ex.to_str().unwrap();
    let o = gstpp(&["export", "anchors", "--checkpoint", ck, "--out", ex_s]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let anchors = fs::read_to_string(ex.join("anchors.csv")).unwrap();
    assert_eq!(anchors.lines().count(), 1 + 3);
    let adj = fs::read_to_string(ex.join("adjacency.csv")).unwrap();
    assert_eq!(adj.lines().count(), 1 + 2 * 3);

    let o = gstpp(&["export", "density-grid", "--checkpoint", ck, "--out", ex_s, "--data", &data, "--grid", "7"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["rows"], 49);
    let grid = fs::read_to_string(ex.join("density_grid.csv")).unwrap();
    let rows: Vec<&str> = grid.lines().skip(1).collect();
    assert_eq!(rows.len(), 49);
    assert!(rows.iter().all(|r| r.rsplit(',').next().unwrap().parse::<f64>().unwrap().exp() >= 0.0));

    let o = gstpp(&["export", "trajectory", "--checkpoint", ck, "--out", ex_s, "--data", &data, "--seq", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let traj = fs::read_to_string(ex.join("trajectory.csv")).unwrap();
    let d = gstpp::data::load_csv(&data).unwrap();
    let n = d.sequences.iter().find(|s| s.id == "0").unwrap().len();
    assert_eq!(traj.lines().count(), 1 + n);

    let o = gstpp(&["export", "heatmap", "--checkpoint", ck, "--out", ex_s]);
    assert_ne!(code(&o), 0);
}

#[test]
fn invalid_configs_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = train_config(dir.path(), &data, 0);
    let o = gstpp(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("`k`"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, format!("data = \"{data}\"\nout = \"x\"\nfancy = 1\n")).unwrap();
    let o = gstpp(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("fancy"));

    let o = gstpp(&["eval", "--checkpoint", dir.path().join("nope.json").to_str().unwrap(), "--data", &data]);
    assert_eq!(code(&o), 1);

    let o = gstpp(&["train", "--config", &cfg, "--bogus-flag"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn non_monotone_csv_reports_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    fs::write(&data, "seq_id,t,x,y\na,1.0,0,0\na,2.0,0,0\na,1.5,0,0\n").unwrap();
    let cfg = train_config(dir.path(), data.to_str().unwrap(), 2);
    let o = gstpp(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 4"));
}
