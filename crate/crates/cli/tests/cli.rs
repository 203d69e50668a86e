use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn adakde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adakde")).args(args).env_remove("ADAKDE_JOBS").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL_EVAL: &str = r#"
scenario = "GMD_F"
dims = [1]
sample_sizes = [40]
n_instances = 2
n_replicates = 2
n_eval = 50
methods = ["Silverman", "kNN", "Oracle"]
master_seed = 5
"#;

#[test]
fn help_succeeds_and_bad_flags_are_config_errors() {
    assert_eq!(code(&adakde(&["--help"])), 0);
    assert_eq!(code(&adakde(&["eval", "--bogus"])), 1);
    assert_eq!(code(&adakde(&["eval", "--config", "/nonexistent.toml", "--out", "/tmp/x"])), 1);
}

#[test]
fn eval_then_report_reproduces_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "exp.toml", SMALL_EVAL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = adakde(&["eval", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = Command::new(env!("CARGO_BIN_EXE_adakde"))
        .args(["eval", "--config", &cfg, "--out", b.to_str().unwrap()])
        .env("ADAKDE_JOBS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let runs = fs::read(a.join("runs.csv")).unwrap();
    assert_eq!(runs, fs::read(b.join("runs.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&runs).lines().count(), 1 + 2 * 2 * 3);

    let rebuilt = dir.path().join("rebuilt");
    let out = adakde(&["report", "--runs", a.join("runs.csv").to_str().unwrap(), "--out", rebuilt.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(a.join("summary.md")).unwrap(), fs::read(rebuilt.join("summary.md")).unwrap());
    assert_eq!(fs::read(a.join("plot_data.csv")).unwrap(), fs::read(rebuilt.join("plot_data.csv")).unwrap());
}

#[test]
fn overrides_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "exp.toml", SMALL_EVAL);
    let out_dir = dir.path().join("o");
    let o = out_dir.to_str().unwrap();
    assert_eq!(code(&adakde(&["eval", "--config", &cfg, "--out", o, "--methods", "Silverman,Bogus"])), 1);
    // NNKDE_pre without a checkpoint is a configuration error.
    assert_eq!(code(&adakde(&["eval", "--config", &cfg, "--out", o, "--methods", "NNKDE_pre"])), 1);
    assert_eq!(code(&adakde(&["eval", "--config", &cfg, "--out", o, "--methods", "Oracle", "--seed", "9"])), 0);
    let text = fs::read_to_string(out_dir.join("runs.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.contains(",Oracle,")));
}

#[test]
fn failure_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let base = SMALL_EVAL.replace("sample_sizes = [40]", "sample_sizes = [4]");
    let partial = write(dir.path(), "p.toml", &base.replace(r#""kNN", "Oracle""#, r#""NNKDE_scratch""#));
    let all = write(dir.path(), "a.toml", &base.replace(r#"["Silverman", "kNN", "Oracle"]"#, r#"["NNKDE_scratch"]"#));
    let o = dir.path().join("o");
    assert_eq!(code(&adakde(&["eval", "--config", &partial, "--out", o.to_str().unwrap()])), 3);
    assert_eq!(code(&adakde(&["eval", "--config", &all, "--out", o.to_str().unwrap()])), 2);
    let text = fs::read_to_string(o.join("runs.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.contains(",NA,")));
}

#[test]
fn pretrain_recommend_finetune_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "pre.toml",
        r#"
d = 2
seed = 3

[train]
n_tasks = 3
n_t = 24
m_t = 8
batch = 2
epochs = 1

[arch]
d = 2
k_nn = 6
hidden = 8
n_blocks = 1
n_heads = 2
dropout = 0.0
diag_clip_lo = -6.0
diag_clip_hi = 3.0
offdiag_scale = 0.1
"#,
    );
    let tasks = dir.path().join("tasks");
    let ckpt = dir.path().join("m.nnkd");
    let ckpt2 = dir.path().join("m2.nnkd");
    assert_eq!(code(&adakde(&["gen-tasks", "--config", &cfg, "--out", tasks.to_str().unwrap()])), 0);
    assert!(tasks.join("task_000002.csv").exists());
    let out = adakde(&["pretrain", "--config", &cfg, "--out", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let from_disk = ["pretrain", "--config", &cfg, "--out", ckpt2.to_str().unwrap(), "--tasks", tasks.to_str().unwrap()];
    assert_eq!(code(&adakde(&from_disk)), 0);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&ckpt2).unwrap());

    let pts: String = (0..30).map(|i| format!("{},{}\n", (i as f64 * 0.7).sin(), (i as f64 * 1.3).cos())).collect();
    let sample = write(dir.path(), "x.csv", &pts);
    let factors = dir.path().join("f.csv");
    let args = ["recommend", "--checkpoint", ckpt.to_str().unwrap(), "--sample", &sample, "--out", factors.to_str().unwrap()];
    assert_eq!(code(&adakde(&args)), 0);
    let text = fs::read_to_string(&factors).unwrap();
    assert_eq!(text.lines().count(), 30);
    assert!(text.lines().all(|l| l.split(',').count() == 3));

    let fine = dir.path().join("g.csv");
    let out = adakde(&["finetune", "--checkpoint", ckpt.to_str().unwrap(), "--sample", &sample, "--out", fine.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("gamma* = "));

    let mut broken = fs::read(&ckpt).unwrap();
    let k = broken.len() - 20;
    broken[k] ^= 1;
    fs::write(&ckpt, broken).unwrap();
    assert_eq!(code(&adakde(&args)), 1);
}
