use std::path::Path;
use std::process::{Command, Output};

const EXPERIMENT: &str = r#"
[model]
vocab = 16
d_model = 8
n_heads = 2
n_layers = 1
d_ff = 16
max_seq = 8
momentum = { gamma = 0.5, beta = 0.0 }

[task]
kind = "assoc_recall"
n_pairs = 3
key_lo = 0
key_hi = 8
val_lo = 8
val_hi = 16

[train]
duration = { mode = "steps", steps = 4 }
batch_size = 4
lr = 1e-2
eval_samples = 8
"#;

fn momlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_momlab")).args(args).env_remove("THREADS_OVERRIDE").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn sweep_grid() -> String {
    let fixed = EXPERIMENT.replace("[model]", "[fixed.model]").replace("[task]", "[fixed.task]").replace("[train]", "[fixed.train]");
    format!("name = \"cli\"\nbase_seed = 1\n\n[grid]\ngamma = [0.0, 0.5]\nseed = [0, 1]\n{fixed}")
}

#[test]
fn verify_filters_all_pass() {
    let o = momlab(&["verify-filters"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("momentum_gain_vs_dft") && out.contains("shear_symplectic"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn fit_scaling_recovers_law() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_config(dir.path(), "g.csv", "N,gamma_star\n1,4.17\n2,2.51\n3,1.87\n4,1.52\n6,1.13\n8,0.91\n");
    let o = momlab(&["fit-scaling", "--input", &csv, "--out", &dir.path().to_string_lossy()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let fit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
    assert!((fit["alpha"].as_f64().unwrap() - 0.74).abs() <= 0.01);
    assert!((fit["y0"].as_f64().unwrap() - 4.17).abs() <= 0.05);
    assert!(stdout(&o).contains("gamma0 = 4.17"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(momlab(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(momlab(&[]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.toml", &EXPERIMENT.replace("lr = 1e-2", "lr = 1e-2\nlearnrate = 3"));
    let o = momlab(&["train", "--config", &bad, "--out", &dir.path().to_string_lossy()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learnrate"), "{}", stderr(&o));
    let cfg = write_config(dir.path(), "grid.toml", &sweep_grid());
    let o = Command::new(env!("CARGO_BIN_EXE_momlab"))
        .args(["sweep", "--config", &cfg, "--out", &dir.path().join("s").to_string_lossy()])
        .env("THREADS_OVERRIDE", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_is_run_failure() {
    let o = momlab(&["train", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "exp.toml", EXPERIMENT);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = momlab(&["train", "--config", &cfg, "--seed", "1", "--out", &out.to_string_lossy()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let ra = std::fs::read(a.join("result.json")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("result.json")).unwrap());
    assert!(a.join("timing.json").exists() && a.join("model/manifest.json").exists());
    let curves = std::fs::read_to_string(a.join("curves.csv")).unwrap();
    assert!(curves.starts_with("step,train_loss,accuracy,L_new,L_second,L_rep,gap,k0,"));
    // a different seed changes the result
    let c = dir.path().join("c");
    momlab(&["train", "--config", &cfg, "--seed", "2", "--out", &c.to_string_lossy()]);
    assert_ne!(ra, std::fs::read(c.join("result.json")).unwrap());
}

#[test]
fn sweep_parallelism_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "grid.toml", &sweep_grid());
    let (one, four) = (dir.path().join("p1"), dir.path().join("p4"));
    let o = momlab(&["sweep", "--config", &cfg, "--parallelism", "1", "--out", &one.to_string_lossy()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_momlab"))
        .args(["sweep", "--config", &cfg, "--out", &four.to_string_lossy()])
        .env("THREADS_OVERRIDE", "4")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["sweep.json", "sweep.csv"] {
        assert_eq!(std::fs::read(one.join(f)).unwrap(), std::fs::read(four.join(f)).unwrap(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(one.join("cells.jsonl")).unwrap().lines().count(), 4);

    let o = momlab(&["report", "--input", &one.to_string_lossy()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let curve = std::fs::read_to_string(one.join("report/sweep_accuracy_vs_gamma.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("series,gamma,mean_acc,sem,n"));
    let depth = std::fs::read_to_string(one.join("report/sweep_0_loss_by_depth.csv")).unwrap();
    assert_eq!(depth.lines().next(), Some("k,baseline,momentum,delta"));
}

#[test]
fn report_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = momlab(&["report", "--input", &dir.path().to_string_lossy()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no results"), "{}", stderr(&o));
}

#[test]
fn gen_data_writes_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "exp.toml", EXPERIMENT);
    let o = momlab(&["gen-data", "--config", &cfg, "--n", "5", "--seed", "3", "--out", &dir.path().to_string_lossy()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("assoc_recall.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 5);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["tokens"].as_array().unwrap().len(), 7);
}

#[test]
fn bode_and_stability_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "exp.toml", EXPERIMENT);
    let run = dir.path().join("run");
    assert_eq!(momlab(&["train", "--config", &cfg, "--out", &run.to_string_lossy()]).status.code(), Some(0));
    let model = run.join("model");
    let (m, r) = (model.to_string_lossy(), run.to_string_lossy());
    let o = momlab(&["bode", "--config", &cfg, "--model", &m, "--samples", "2", "--directions", "2", "--out", &r]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(run.join("bode.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("omega,measured,theory"));
    let o = momlab(&["bode", "--config", &cfg, "--model", &m, "--mode", "spectrum-ratio", "--samples", "2", "--out", &r]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = momlab(&["stability", "--config", &cfg, "--model", &m, "--samples", "1", "--dims", "4", "--out", &r]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let st: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("stability.json")).unwrap()).unwrap();
    let ratio = st["energy_ratio"].as_f64().unwrap();
    assert!(ratio.is_finite() && ratio > 0.0);
    assert_eq!(st["reliable"], serde_json::Value::Bool(false));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let text = std::fs::read_to_string(&path).unwrap();
            if text.contains("[grid]") {
                momentum_lab::sweeps::SweepGrid::from_toml_str(&text).unwrap();
            } else {
                momentum_lab::config::ExperimentConfig::from_toml_str(&text).unwrap();
            }
            n += 1;
        }
    }
    assert!(n >= 4);
}
