use std::path::Path;
use std::process::{Command, Output};

use fedhet::report::read_metrics;
use fedhet::{parse_config_str, run_experiment, FoldId};
use fedhet_core::synthdata::read_cohort;

const TINY: &str = r#"
setting = "strong2"
seed = 5
folds = 2
bootstrap = 5
strategies = ["local", "fedavg", "soup"]

[generator]
n_patients = 120

[fl]
rounds = 2
local_steps = 3

[image_fl]
rounds = 1
local_steps = 2
"#;

fn fedhet(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedhet"));
    cmd.args(args).env_remove("FEDHET_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn fedhet")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn config_errors_exit_with_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    for (name, text) in [
        ("unknown.toml", "setting = \"strong2\"\nfolds = 5\nbogus = 1\n"),
        ("patch4.toml", "setting = \"strong4\"\ntasks = [\"patch\"]\n"),
        ("boot.toml", "setting = \"strong2\"\nbootstrap = 0\n"),
        ("syntax.toml", "setting = \n"),
    ] {
        let cfg = write(tmp.path(), name, text);
        let o = fedhet(&["run", "--config", &cfg, "--out", out], &[]);
        assert_eq!(o.status.code(), Some(1), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
    let missing = fedhet(&["run", "--config", "/nonexistent.toml", "--out", out], &[]);
    assert_eq!(missing.status.code(), Some(1));
    let strong4 = write(tmp.path(), "s4.toml", "setting = \"strong4\"\ntasks = [\"patch\"]\n");
    let msg = String::from_utf8_lossy(&fedhet(&["run", "--config", &strong4, "--out", out], &[]).stderr).into_owned();
    assert!(msg.contains("whole_image"), "{msg}");
    let bad_seed = write(tmp.path(), "ok.toml", TINY);
    assert_eq!(fedhet(&["run", "--config", &bad_seed, "--out", out], &[("FEDHET_SEED", "x")]).status.code(), Some(1));
}

#[test]
fn every_fold_cell_is_a_row_or_a_failure() {
    let cfg = parse_config_str(TINY, None).unwrap();
    let result = run_experiment(&cfg).unwrap();
    let fold_failures = result.failures.iter().filter(|f| f.fold != FoldId::Cv).count();
    assert_eq!(result.fold_rows().count() + fold_failures, result.expected_fold_cells);
    // 2 locals + FedAvg + soup, 3 patch metrics + 2 image metrics, 3 subsets, 2 folds
    assert_eq!(result.expected_fold_cells, 4 * 5 * 3 * 2);
    for r in &result.rows {
        assert!((0.0..=1.0).contains(&r.point), "{r:?}");
    }
    assert!(result.rows.iter().any(|r| r.fold == FoldId::Cv));
}

#[test]
fn run_report_and_seed_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "tiny.toml", TINY);
    let out = tmp.path().join("run");
    let o = fedhet(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], &[("FEDHET_SEED", "77")]);
    assert!(matches!(o.status.code(), Some(0 | 2)), "{}", String::from_utf8_lossy(&o.stderr));
    let provenance: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(provenance["seed"], 77);
    assert!(out.join("report.md").exists());
    assert!(out.join("failures.csv").exists());
    assert!(std::fs::read_dir(out.join("history")).unwrap().count() > 0);
    assert!(std::fs::read_dir(out.join("models")).unwrap().count() > 0);
    let rows = read_metrics(&out.join("metrics.csv")).unwrap();
    assert!(!rows.is_empty());

    let o = fedhet(&["report", "--in", out.to_str().unwrap(), "--format", "csv"], &[]);
    assert_eq!(o.status.code(), Some(0));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.starts_with("setting,task,subset,metric,model,column,cell"));
    assert!(out.join("report.csv").exists());
    let md = fedhet(&["report", "--in", out.to_str().unwrap(), "--format", "md"], &[]);
    assert!(String::from_utf8(md.stdout).unwrap().contains("| Model |"));
    let bad = fedhet(&["report", "--in", out.to_str().unwrap(), "--format", "pdf"], &[]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn generate_writes_a_readable_archive() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "tiny.toml", TINY);
    let dir = tmp.path().join("cohort");
    let o = fedhet(&["generate", "--config", &cfg, "--out", dir.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let cohort = read_cohort(&dir).unwrap();
    assert_eq!(cohort.len(), 120);
    assert_eq!(cohort.image_count(), 240);
}
