use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsd_cli::commands::{CompareSummary, RunSummary};
use tempfile::TempDir;

const MODEL: &str = r#"
[dataset]
split = [0.6, 0.2, 0.2]
batch_size = 32

[dataset.source]
kind = "synthetic"
generator = "concentric_rings"
n = 400
noise_std = 0.2

[model]
layers = [
    { kind = "fully_connected", name = "fc1", in_dim = 2, out_dim = 12, activation = "relu" },
    { kind = "fully_connected", name = "fc2", in_dim = 12, out_dim = 12, activation = "relu" },
    { kind = "fully_connected", name = "fc3", in_dim = 12, out_dim = 2 },
]

[optimizer]
lr = 0.05
momentum = 0.9
nesterov = true
weight_decay = 1e-4

[convergence]
patience = 3
max_epochs = 15
"#;

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, format!("{MODEL}\n{extra}")).unwrap();
    path
}

fn dsd_bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsd"))
        .args(args)
        .output()
        .unwrap()
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        cmd,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    dsd_bin(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SINGLE: &str = r#"
[dsd]
phases = [
    { kind = "dense", epochs = 15, lr = 0.05 },
    { kind = "sparse", sparsity = 0.3, epochs = 4, lr = 0.005 },
    { kind = "redense", epochs = 4 },
]
"#;

#[test]
fn train_writes_checkpoint_and_record() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("run");
    let o = run("train", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("ckpt_00_dense.dsdc").is_file());
    assert!(out.join("final.dsdc").is_file());
    let record = fs::read_to_string(out.join("record.csv")).unwrap();
    let mut lines = record.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,phase,lr,train_loss,val_loss,val_err")
    );
    assert!(lines.count() >= 1);
    let echo = fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(echo.contains("excluded_layers = [\"fc1\"]"), "{echo}");
    assert!(echo.contains("seed = 1"), "{echo}");
}

#[test]
fn same_seed_reproduces_bit_identical_results() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        assert!(run("train", &cfg, out, &["--seed", "7"]).status.success());
    }
    let (sa, sb) = (RunSummary::load(&a).unwrap(), RunSummary::load(&b).unwrap());
    assert_eq!(sa.final_test_error, sb.final_test_error);
    assert_eq!(
        fs::read(a.join("final.dsdc")).unwrap(),
        fs::read(b.join("final.dsdc")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("record.csv")).unwrap(),
        fs::read(b.join("record.csv")).unwrap()
    );
}

#[test]
fn invalid_sparsity_rejected_before_training() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[dsd]\nphases = [{ kind = \"dense\", epochs = 3 }, { kind = \"sparse\", sparsity = 1.5, epochs = 3 }]\n",
    );
    let out = tmp.path().join("run");
    let o = run("dsd", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dsd.phases"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[harness]\nseedz = [1]\n");
    let o = run("train", &cfg, &tmp.path().join("run"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seedz"), "{}", stderr(&o));
}

#[test]
fn dsd_run_reports_phases_and_improvements() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SINGLE);
    let out = tmp.path().join("run");
    let o = run("dsd", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    let s = RunSummary::load(&out).unwrap();
    let sparsity: Vec<f64> = s.phases.iter().map(|p| p.sparsity).collect();
    assert_eq!(sparsity, vec![0.0, 0.3, 0.0]);
    assert_eq!(s.checkpoints.len(), 3);
    assert!(s.final_sparsity.iter().all(|l| !l.mask_active));
    assert_eq!(s.redense_checks.len(), 1);
    let check = &s.redense_checks[0];
    assert!(check.passed());
    assert_eq!(check.lr, check.preceding_sparse_lr * 0.1);
    assert_eq!(check.preceding_sparse_lr, 0.005);
    // fc1 is excluded by default: five stages for each of fc2 and fc3.
    assert_eq!(s.histograms.len(), 10);

    let first = dsd_bin(&["report", out.to_str().unwrap()]);
    assert!(first.status.success(), "{}", stderr(&first));
    let text = fs::read_to_string(out.join("report/summary.txt")).unwrap();
    assert!(text.contains("Improve (abs)"), "{text}");
    assert!(text.contains("Improve (rel)"), "{text}");
    let second = dsd_bin(&["report", out.to_str().unwrap()]);
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(
        text,
        fs::read_to_string(out.join("report/summary.txt")).unwrap()
    );

    for name in &s.histograms {
        let engine = fs::read(out.join(name)).unwrap();
        let regenerated = fs::read(out.join("report").join(name)).unwrap();
        assert_eq!(engine, regenerated, "{name}");
    }
}

#[test]
fn two_iteration_plan_records_four_post_baseline_phases() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"
[dsd]
phases = [
    { kind = "dense", epochs = 10, lr = 0.05 },
    { kind = "sparse", sparsity = 0.5, epochs = 3, lr = 0.005 },
    { kind = "redense", epochs = 3 },
    { kind = "sparse", sparsity = 0.25, epochs = 3, lr = 0.005 },
    { kind = "redense", epochs = 3 },
]
"#,
    );
    let out = tmp.path().join("run");
    assert!(run("dsd", &cfg, &out, &[]).status.success());
    let s = RunSummary::load(&out).unwrap();
    assert_eq!(s.phases.len(), 5);
    assert_eq!(s.phases.iter().skip(1).count(), 4);
    assert_eq!(s.histograms.len(), 20);
    assert!(out.join("hist_fc2_post_prune_iter2.csv").is_file());
}

#[test]
fn from_checkpoint_skips_the_dense_phase() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SINGLE);
    let base = tmp.path().join("base");
    assert!(run("train", &cfg, &base, &[]).status.success());
    let ckpt = base.join("final.dsdc");
    let out = tmp.path().join("run");
    let o = run(
        "dsd",
        &cfg,
        &out,
        &["--from-checkpoint", ckpt.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let s = RunSummary::load(&out).unwrap();
    let kinds: Vec<&str> = s.phases.iter().map(|p| p.kind.as_str()).collect();
    assert_eq!(kinds, ["sparse", "redense"]);
    assert!(s.start_test_error.is_some());
    assert_eq!(
        fs::read(out.join("start.dsdc")).unwrap(),
        fs::read(&ckpt).unwrap()
    );
}

#[test]
fn compare_with_two_seeds_flags_low_power() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!("{SINGLE}\n[harness]\nseeds = [3, 4]\n"),
    );
    let out = tmp.path().join("cmp");
    let o = run("compare", &cfg, &out, &["--jobs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s: CompareSummary =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(s.low_power);
    assert_eq!(s.budget_epochs, 8);

    let comparison = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = comparison.lines().collect();
    assert_eq!(rows[0], "method,n,mean_err,sd_err");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("dsd,2,") && rows[2].starts_with("llr,2,"));
    let tests = fs::read_to_string(out.join("tests.csv")).unwrap();
    assert_eq!(tests.lines().count(), 2);
    assert!(tests.starts_with("method_a,method_b,t,df,p\ndsd,llr,"));

    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("LOW STATISTICAL POWER"), "{report}");
    for seed in [3, 4] {
        for arm in ["dsd", "llr"] {
            let arm_summary =
                RunSummary::load(&out.join(format!("seed_{seed:04}")).join(arm)).unwrap();
            assert_eq!(arm_summary.epochs, 8);
        }
    }
    let again = dsd_bin(&["report", out.to_str().unwrap()]);
    assert!(again.status.success());
    assert_eq!(String::from_utf8(again.stdout).unwrap(), report);
}

#[test]
fn unequal_budgets_are_a_fairness_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"
[dsd]
phases = [
    { kind = "dense", epochs = 5, lr = 0.05 },
    { kind = "sparse", sparsity = 0.5, epochs = 45, lr = 0.005 },
    { kind = "redense", epochs = 45 },
]

[llr]
schedule = [{ epochs = 40, lr = 0.005 }, { epochs = 40, lr = 0.0005 }]
"#,
    );
    for cmd in ["compare", "llr"] {
        let out = tmp.path().join(cmd);
        let o = run(cmd, &cfg, &out, &[]);
        assert_eq!(o.status.code(), Some(3), "{cmd}: {}", stderr(&o));
        assert!(
            stderr(&o).contains("80") && stderr(&o).contains("90"),
            "{}",
            stderr(&o)
        );
        assert!(!out.exists());
    }
}

#[test]
fn report_on_empty_dir_lists_expected_files() {
    let tmp = TempDir::new().unwrap();
    let o = dsd_bin(&["report", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for f in [
        "summary.json",
        "config.resolved.toml",
        "record.csv",
        "start.dsdc",
    ] {
        assert!(err.contains(f), "{err}");
    }
}
