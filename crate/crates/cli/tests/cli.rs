use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use super_core::evaluation::report_parse;
use tempfile::TempDir;

const TINY_SPEC: &str = "train_per_class=40\nval_per_group=5\ntest_per_group=5\nseed=3\n";
const TINY_CONFIG: &str = "epochs=2\nbatch_size=16\nlambda2=1\nlambda3=0.001\n";

fn super_bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_super"));
    c.env_remove("SUPER_CACHE_DIR");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    super_bin().current_dir(dir).args(args).output().expect("spawn super")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A temp dir with `data/`, `cfg.txt` and `spec.txt`.
fn workspace() -> TempDir {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("spec.txt"), TINY_SPEC).unwrap();
    fs::write(t.path().join("cfg.txt"), TINY_CONFIG).unwrap();
    let o = run(t.path(), &["generate", "--spec", "spec.txt", "--out", "data"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    t
}

fn train_oracle(dir: &Path, out: &str) -> Output {
    run(dir, &["train", "--data", "data", "--config", "cfg.txt", "--guidance", "oracle", "--out", out])
}

fn first_id(dir: &Path) -> String {
    let meta = fs::read_to_string(dir.join("data/metadata.csv")).unwrap();
    meta.lines().nth(1).unwrap().split(',').next().unwrap().to_string()
}

fn manifest_entries(dir: &Path) -> usize {
    fs::read_to_string(dir.join("manifest.log")).unwrap().matches("[run]").count()
}

#[test]
fn generate_prints_groups_and_is_reproducible() {
    let t = workspace();
    let o = run(t.path(), &["generate", "--spec", "spec.txt", "--out", "again"]);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("train") && table.contains("38"));
    let a = fs::read(t.path().join("data/metadata.csv")).unwrap();
    let b = fs::read(t.path().join("again/metadata.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn generate_rejects_bad_ratio() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("bad.txt"), "correlation_ratio=1.3\n").unwrap();
    let o = run(t.path(), &["generate", "--spec", "bad.txt", "--out", "d"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("correlation_ratio"));
}

#[test]
fn train_writes_artifacts_and_guards_outputs() {
    let t = workspace();
    let o = train_oracle(t.path(), "run");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run_dir = t.path().join("run");
    for f in ["checkpoint.ckpt", "loss_log.csv", "val_metrics.csv", "config.txt", "manifest.log"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run_dir.join("loss_log.csv")).unwrap();
    assert!(log.starts_with("epoch,batch,ce1,ce2,beta,att,reg,total\n"));
    // 80 samples in batches of 16 for two epochs.
    assert_eq!(log.lines().count(), 1 + 10);
    assert_eq!(fs::read_to_string(run_dir.join("val_metrics.csv")).unwrap().lines().count(), 3);

    assert_eq!(code(&train_oracle(t.path(), "run")), 2);
    let forced = run(t.path(), &["train", "--data", "data", "--config", "cfg.txt", "--guidance", "oracle", "--out", "run", "--force"]);
    assert_eq!(code(&forced), 0);
    assert_eq!(manifest_entries(&run_dir), 2);
}

#[test]
fn train_erm_baseline_flag() {
    let t = workspace();
    let o = run(t.path(), &["train", "--data", "data", "--config", "cfg.txt", "--guidance", "oracle", "--out", "erm", "--erm"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(t.path().join("erm/loss_log.csv")).unwrap();
    let row: Vec<&str> = log.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[2], row[7]);
    assert!(row[3..7].iter().all(|c| c.is_empty()));
}

#[test]
fn vlm_guidance_without_cache_or_model_is_a_usage_error() {
    let t = workspace();
    let o = run(t.path(), &["train", "--data", "data", "--config", "cfg.txt", "--guidance", "vlm", "--out", "run"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("vlm"));
}

#[test]
fn jtt_flag_needs_jtt_keys() {
    let t = workspace();
    let o = run(t.path(), &["train", "--data", "data", "--config", "cfg.txt", "--guidance", "oracle", "--out", "run", "--jtt"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("jtt"));

    fs::write(t.path().join("jtt.txt"), format!("{TINY_CONFIG}jtt_id_epochs=1\njtt_id_lr=0.001\njtt_upweight=100\n")).unwrap();
    let o = run(t.path(), &["train", "--data", "data", "--config", "jtt.txt", "--guidance", "oracle", "--out", "run", "--jtt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(t.path().join("run/jtt_upweighted.txt").exists());
}

#[test]
fn exploding_training_exits_with_numeric_code() {
    let t = workspace();
    fs::write(t.path().join("hot.txt"), "epochs=3\nbatch_size=16\nlambda2=1\nlearning_rate=1e300\n").unwrap();
    let o = run(t.path(), &["train", "--data", "data", "--config", "hot.txt", "--guidance", "oracle", "--out", "run"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn bad_config_key_is_a_usage_error() {
    let t = workspace();
    fs::write(t.path().join("typo.txt"), "lamda2=1\n").unwrap();
    let o = run(t.path(), &["train", "--data", "data", "--config", "typo.txt", "--guidance", "oracle", "--out", "run"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lamda2"));
}

#[test]
fn evaluate_is_deterministic_and_parses_back() {
    let t = workspace();
    assert_eq!(code(&train_oracle(t.path(), "run")), 0);
    for out in ["ev1", "ev2"] {
        let o = run(t.path(), &["evaluate", "--data", "data", "--checkpoint", "run/checkpoint.ckpt", "--split", "test", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = fs::read_to_string(t.path().join("ev1/report_test.csv")).unwrap();
    let b = fs::read_to_string(t.path().join("ev2/report_test.csv")).unwrap();
    assert_eq!(a, b);
    let report = report_parse(&a).unwrap();
    assert_eq!(report.groups.len(), 4);
    assert_eq!(report.n_eval, 20);

    let o = run(t.path(), &["evaluate", "--data", "data", "--checkpoint", "run/checkpoint.ckpt", "--split", "holdout", "--out", "ev3"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn beta_sweep_runs_each_value_with_one_seed() {
    let t = workspace();
    let o = run(t.path(), &["ablate", "--data", "data", "--config", "cfg.txt", "--param", "beta", "--values", "1,4", "--out", "abl"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let abl = t.path().join("abl");
    assert_eq!(fs::read_to_string(abl.join("results.csv")).unwrap().lines().count(), 3);
    let deltas = fs::read_to_string(abl.join("deltas.csv")).unwrap();
    assert_eq!(deltas.lines().count(), 2);
    assert!(deltas.lines().nth(1).unwrap().starts_with("beta,4,1,"));
    let seeds: Vec<String> = (0..2)
        .map(|i| {
            let m = fs::read_to_string(abl.join(format!("run_{i}/manifest.log"))).unwrap();
            m.lines().find(|l| l.starts_with("seed=")).unwrap().to_string()
        })
        .collect();
    assert_eq!(seeds[0], seeds[1]);
    let betas: Vec<bool> = (0..2)
        .map(|i| fs::read_to_string(abl.join(format!("run_{i}/config.txt"))).unwrap().contains(&format!("beta={}", [1, 4][i])))
        .collect();
    assert_eq!(betas, [true, true]);
}

#[test]
fn empty_sweep_is_rejected() {
    let t = workspace();
    let o = run(t.path(), &["ablate", "--data", "data", "--config", "cfg.txt", "--param", "lambda2", "--values", "", "--out", "abl"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn prompt_sweep_reads_variants_file() {
    let t = workspace();
    assert_eq!(code(&run(t.path(), &["init-vlm", "--out", "vlm.bin", "--seed", "1"])), 0);
    fs::write(t.path().join("prompts.txt"), "# n,superclass\n1,shape\n5,shape\n").unwrap();
    let o = run(
        t.path(),
        &["ablate", "--data", "data", "--config", "cfg.txt", "--param", "prompts", "--values", "prompts.txt", "--guidance", "vlm", "--vlm-model", "vlm.bin", "--out", "abl"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let results = fs::read_to_string(t.path().join("abl/results.csv")).unwrap();
    assert!(results.contains("prompts,1:shape,") && results.contains("prompts,5:shape,"));

    let o = run(t.path(), &["ablate", "--data", "data", "--config", "cfg.txt", "--param", "prompts", "--values", "prompts.txt", "--out", "abl2"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn export_maps_writes_four_images_per_id() {
    let t = workspace();
    assert_eq!(code(&train_oracle(t.path(), "run")), 0);
    let id = first_id(t.path());
    let export = |out: &str| run(t.path(), &["export-maps", "--data", "data", "--checkpoint", "run/checkpoint.ckpt", "--ids", &id, "--out", out]);
    assert_eq!(code(&export("maps")), 0);
    let maps = t.path().join("maps");
    let mut pngs: Vec<String> = fs::read_dir(&maps)
        .unwrap()
        .flatten()
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    pngs.sort();
    let expected: Vec<String> = ["guidance", "head1", "head2", "original"].iter().map(|k| format!("{id}_{k}.png")).collect();
    assert_eq!(pngs, expected);
    assert_eq!(fs::read_dir(maps.join("sidecar")).unwrap().count(), 3);

    assert_eq!(code(&export("maps2")), 0);
    for f in &expected {
        assert_eq!(fs::read(maps.join(f)).unwrap(), fs::read(t.path().join("maps2").join(f)).unwrap(), "{f}");
    }

    let o = run(t.path(), &["export-maps", "--data", "data", "--checkpoint", "run/checkpoint.ckpt", "--ids", "zz999", "--out", "maps3"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn cache_dir_override_and_warm_reuse() {
    let t = workspace();
    let cache: PathBuf = t.path().join("elsewhere");
    assert_eq!(code(&run(t.path(), &["init-vlm", "--out", "vlm.bin"])), 0);
    let cache_cmd = || {
        super_bin()
            .current_dir(t.path())
            .env("SUPER_CACHE_DIR", &cache)
            .args(["cache-guidance", "--data", "data", "--config", "cfg.txt", "--guidance", "vlm", "--vlm-model", "vlm.bin"])
            .output()
            .unwrap()
    };
    let cold = cache_cmd();
    assert_eq!(code(&cold), 0, "{}", stderr(&cold));
    assert!(String::from_utf8_lossy(&cold.stdout).contains("(80 computed, 0 already cached)"));
    let warm = cache_cmd();
    assert!(String::from_utf8_lossy(&warm.stdout).contains("(0 computed, 80 already cached)"));
    assert_eq!(fs::read_dir(cache.join("vlm")).unwrap().flatten().filter(|e| e.path().extension().is_some_and(|x| x == "map")).count(), 80);
    assert!(!t.path().join("data/cache").exists());

    let o = super_bin()
        .current_dir(t.path())
        .env("SUPER_CACHE_DIR", &cache)
        .args(["train", "--data", "data", "--config", "cfg.txt", "--guidance", "vlm", "--out", "run"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn init_vlm_refuses_to_overwrite() {
    let t = TempDir::new().unwrap();
    assert_eq!(code(&run(t.path(), &["init-vlm", "--out", "m.bin"])), 0);
    assert_eq!(code(&run(t.path(), &["init-vlm", "--out", "m.bin"])), 2);
    assert_eq!(code(&run(t.path(), &["init-vlm", "--out", "m.bin", "--force"])), 0);
}
