use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn remem(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_remem")).args(args).env("REMEM_OUT", root).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn generate(root: &Path, name: &str) {
    let o = remem(root, &["generate", "--profile", "tiny", "--tasks", "put_back,reopen", "--count", "4", "--seed", "7", "--name", name]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let root = tempfile::tempdir().unwrap();
    generate(root.path(), "a");
    generate(root.path(), "b");
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    for file in ["manifest.json", "put_back.episodes", "reopen.episodes", "config.toml"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["tasks"][0]["episodes"], 4);
    assert_eq!(manifest["tasks"].as_array().unwrap().len(), 2);
}

#[test]
fn train_resume_and_eval() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    generate(r, "data");
    let common = ["--profile", "tiny", "--set", "data.tasks=[\"put_back\",\"reopen\"]", "--set", "train.steps=12", "--set", "train.batch=2", "--set", "train.checkpoint_every=6"];
    let mut args = vec!["train", "--name", "full", "--arm", "no_query"];
    args.extend(common);
    let o = remem(r, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = fs::read_to_string(r.join("full/config.toml")).unwrap();
    assert!(cfg.contains("recurrence = \"stateless\"") && cfg.contains("n_chunk = 0"));

    let ckpt = r.join("full/step-0000006.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let mut args = vec!["train", "--name", "resumed", "--arm", "no_query", "--resume", ckpt];
    args.extend(common);
    let o = remem(r, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(r.join("full/model.bin")).unwrap(), fs::read(r.join("resumed/model.bin")).unwrap());

    let model = r.join("full/model.bin");
    let o = remem(r, &["eval", "--profile", "tiny", "--model", model.to_str().unwrap(), "--trials", "50", "--tasks", "reopen"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let scores: serde_json::Value = serde_json::from_slice(&fs::read(r.join("eval/scores.json")).unwrap()).unwrap();
    assert_eq!(scores[0]["trials"], 50);
    assert_eq!(code(&remem(r, &["eval", "--model", model.to_str().unwrap(), "--trials", "10"])), 2, "trial floor");
    assert_eq!(code(&remem(r, &["eval", "--model", "missing.bin", "--trials", "50"])), 3);
}

#[test]
fn exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    assert_eq!(code(&remem(r, &["train", "--set", "train.stepz=3"])), 2);
    assert_eq!(code(&remem(r, &["train", "--profile", "galaxy"])), 2);
    assert_eq!(code(&remem(r, &["train", "--profile", "tiny", "--arm", "dual7"])), 2);
    assert_eq!(code(&remem(r, &["train", "--profile", "tiny"])), 3, "no data yet");
    generate(r, "data");
    let o = remem(
        r,
        &["train", "--profile", "tiny", "--set", "data.tasks=[\"put_back\"]", "--set", "train.lr=1e300", "--set", "train.lr_min=1e300", "--set", "train.steps=4"],
    );
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn resolved_config_is_written_before_work() {
    let root = tempfile::tempdir().unwrap();
    let file = root.path().join("run.toml");
    fs::write(&file, "profile = \"tiny\"\n[train]\nsteps = 9\n").unwrap();
    // Fails on missing data, after the config was resolved and written.
    let o = remem(root.path(), &["train", "--config", file.to_str().unwrap(), "--set", "train.batch=3"]);
    assert_eq!(code(&o), 3);
    let written = fs::read_to_string(root.path().join("train/config.toml")).unwrap();
    assert!(written.contains("profile = \"tiny\""));
    assert!(written.contains("steps = 9") && written.contains("batch = 3"));
    let mut bad = fs::read_to_string(&file).unwrap();
    bad.push_str("[eval]\nwhatever = 1\n");
    fs::write(&file, bad).unwrap();
    assert_eq!(code(&remem(root.path(), &["train", "--config", file.to_str().unwrap()])), 2);
}

#[test]
fn report_matches_golden() {
    let root = tempfile::tempdir().unwrap();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let o = remem(root.path(), &["report", "--scores", fixtures.join("scores.json").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = root.path().join("report");
    assert_eq!(fs::read_to_string(dir.join("report.md")).unwrap(), fs::read_to_string(fixtures.join("report.md")).unwrap());
    assert_eq!(fs::read_to_string(dir.join("beta_long_horizon.csv")).unwrap(), "beta,success_pct\n0,12.00\n0.5,41.00\n1,8.00\n");
    assert!(fs::read_to_string(dir.join("beta_long_horizon.svg")).unwrap().starts_with("<svg"));
}
