use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use adapref_cli::svg::{emit_svg, CsvTable, SvgKind};

fn adapref(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adapref"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "gen-data",
        "--pairs",
        "150",
        "--dim",
        "4",
        "--seed",
        "3",
        "--out",
        p(dir),
    ];
    args.extend_from_slice(extra);
    let out = adapref(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&adapref(&["--help"])), 0);
    assert_eq!(code(&adapref(&["--version"])), 0);
    assert_eq!(code(&adapref(&["no-such-command"])), 2);
    assert_eq!(
        code(&adapref(&["train", "--data", "x", "--loss", "bogus"])),
        2
    );

    let missing = tmp.path().join("missing");
    assert_eq!(code(&adapref(&["train", "--data", p(&missing)])), 3);
    assert_eq!(code(&adapref(&["analyze", "--report", p(&missing)])), 3);

    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, "{ not json\n").unwrap();
    assert_eq!(code(&adapref(&["train", "--data", p(&bad)])), 5);
    assert_eq!(code(&adapref(&["dpo", "--data", p(&bad)])), 5);

    let data = tmp.path().join("data");
    gen(&data, &[]);
    // Invalid configurations are usage errors.
    assert_eq!(
        code(&adapref(&["train", "--data", p(&data), "--tau0", "-1"])),
        2
    );
    assert_eq!(
        code(&adapref(&[
            "train",
            "--data",
            p(&data),
            "--loss",
            "ada-quad",
            "--tau-max",
            "2"
        ])),
        2
    );
    assert_eq!(
        code(&adapref(&[
            "gen-data",
            "--gamma",
            "1.5",
            "--out",
            p(&tmp.path().join("g"))
        ])),
        2
    );
}

#[test]
fn unit_interval_reduction_gives_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, &["--label-mode", "stochastic"]);
    let ce = tmp.path().join("ce");
    let ada = tmp.path().join("ada");
    let common = [
        "--epochs", "4", "--batch", "16", "--seed", "9", "--hidden", "8",
    ];
    let mut a = vec!["train", "--data", p(&data), "--loss", "ce", "--out", p(&ce)];
    a.extend_from_slice(&common);
    assert_eq!(code(&adapref(&a)), 0);
    let mut b = vec![
        "train",
        "--data",
        p(&data),
        "--loss",
        "ada-lin",
        "--tau0",
        "1",
        "--tau-max",
        "1",
        "--rho0",
        "0.6931471805599453",
        "--out",
        p(&ada),
    ];
    b.extend_from_slice(&common);
    assert_eq!(code(&adapref(&b)), 0);

    for epoch in 1..=4 {
        let name = format!("checkpoints/epoch_{epoch:04}.json");
        let x = fs::read(ce.join(&name)).unwrap();
        let y = fs::read(ada.join(&name)).unwrap();
        assert_eq!(x, y, "epoch {epoch} checkpoints differ");
    }
    assert_eq!(
        fs::read(ce.join("checkpoint.json")).unwrap(),
        fs::read(ada.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn train_and_analyze_write_expected_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, &[]);
    for f in ["train.jsonl", "test.jsonl", "manifest.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let run = tmp.path().join("run");
    let out = adapref(&[
        "train",
        "--data",
        p(&data),
        "--epochs",
        "2",
        "--hidden",
        "8",
        "--out",
        p(&run),
    ]);
    assert_eq!(code(&out), 0);
    for f in [
        "report.json",
        "checkpoint.json",
        "manifest.json",
        "checkpoints/epoch_0002.json",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["input_hash"].as_str().unwrap().len(), 64);

    let an = tmp.path().join("an");
    let report = run.join("report.json");
    assert_eq!(
        code(&adapref(&[
            "analyze",
            "--report",
            p(&report),
            "--out-dir",
            p(&an),
            "--bins",
            "7"
        ])),
        0
    );
    let hist = CsvTable::parse(&fs::read_to_string(an.join("tau_histogram.csv")).unwrap()).unwrap();
    assert_eq!(hist.header, ["lo", "hi", "count"]);
    assert_eq!(hist.rows.len(), 7);
    assert_eq!(hist.column(2).iter().sum::<f64>(), 120.0);
    let by = CsvTable::parse(&fs::read_to_string(an.join("tau_by_strength.csv")).unwrap()).unwrap();
    assert_eq!(by.header[1], "mean_tau");
    let eff =
        CsvTable::parse(&fs::read_to_string(an.join("effective_loss_curve.csv")).unwrap()).unwrap();
    assert!(eff.rows.iter().all(|r| r[1].is_finite()));
    for f in [
        "loss_curve.svg",
        "tau_histogram.svg",
        "effective_loss_curve.svg",
        "manifest.json",
    ] {
        assert!(an.join(f).is_file(), "{f}");
    }

    // Re-running the analysis reproduces the plots byte for byte.
    let an2 = tmp.path().join("an2");
    assert_eq!(
        code(&adapref(&[
            "analyze",
            "--report",
            p(&report),
            "--out-dir",
            p(&an2),
            "--bins",
            "7"
        ])),
        0
    );
    for f in ["tau_histogram.svg", "loss_curve.svg", "tau_by_strength.csv"] {
        assert_eq!(
            fs::read(an.join(f)).unwrap(),
            fs::read(an2.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn cross_entropy_analysis_skips_tau_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, &[]);
    let run = tmp.path().join("run");
    assert_eq!(
        code(&adapref(&[
            "train",
            "--data",
            p(&data),
            "--loss",
            "ce",
            "--epochs",
            "1",
            "--hidden",
            "4",
            "--out",
            p(&run)
        ])),
        0
    );
    let an = tmp.path().join("an");
    assert_eq!(
        code(&adapref(&[
            "analyze",
            "--report",
            p(&run.join("report.json")),
            "--out-dir",
            p(&an)
        ])),
        0
    );
    assert!(an.join("loss_curve.csv").is_file());
    assert!(!an.join("tau_histogram.csv").exists());
}

#[test]
fn svg_rendering_is_deterministic() {
    let mut t = CsvTable::new(&["lo", "hi", "count"]);
    for i in 0..5 {
        t.push(vec![i as f64, i as f64 + 1.0, (i * i) as f64]);
    }
    let a = emit_svg(&t, SvgKind::Histogram, "x").unwrap();
    assert_eq!(a, emit_svg(&t, SvgKind::Histogram, "x").unwrap());
    assert_eq!(a.matches("fill=\"steelblue\"").count(), 5);
}

#[test]
fn dpo_and_sweep_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let dpo = tmp.path().join("dpo");
    let out = adapref(&["dpo", "--epochs", "5", "--pairs", "60", "--out", p(&dpo)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "dataset.jsonl",
        "policy.json",
        "report.json",
        "manifest.json",
    ] {
        assert!(dpo.join(f).is_file(), "{f}");
    }
    // Re-use the written dataset and policy as inputs.
    let again = tmp.path().join("again");
    let out = adapref(&[
        "dpo",
        "--data",
        p(&dpo.join("dataset.jsonl")),
        "--ref",
        p(&dpo.join("policy.json")),
        "--loss",
        "ce",
        "--epochs",
        "2",
        "--out",
        p(&again),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let data = tmp.path().join("data");
    gen(&data, &[]);
    let sweep = tmp.path().join("sweep");
    let out = adapref(&[
        "sweep-rho",
        "--rho0-list",
        "0.05,0.3",
        "--data",
        p(&data),
        "--epochs",
        "1",
        "--hidden",
        "4",
        "--out",
        p(&sweep),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let t = CsvTable::parse(&fs::read_to_string(sweep.join("sweep_rho.csv")).unwrap()).unwrap();
    assert_eq!(t.column(0), vec![0.05, 0.3]);
}

#[test]
fn small_align_study() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = tmp.path().join("grid.json");
    let mut grid_spec = adapref::bandit::AlignStudyConfig::standard(1).grid;
    grid_spec.learning_rates = vec![1e-3, 3e-3];
    grid_spec.epochs = vec![1];
    grid_spec.base.architecture = adapref::model::Architecture::Mlp2 { hidden: 8 };
    fs::write(&grid, serde_json::to_string(&grid_spec).unwrap()).unwrap();
    let out_dir = tmp.path().join("study");
    let out = adapref(&[
        "align-study",
        "--grid",
        p(&grid),
        "--seeds",
        "2",
        "--pairs",
        "100",
        "--eval-contexts",
        "200",
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["per_seed"].as_array().unwrap().len(), 2);
    assert_eq!(summary["mean_gaps"].as_array().unwrap().len(), 2);
    let csv = fs::read_to_string(out_dir.join("study.csv")).unwrap();
    // header + 2 seeds x 2 losses x 2 configurations
    assert_eq!(csv.lines().count(), 1 + 8);
    assert!(out_dir.join("manifest.json").is_file());
}

#[test]
fn verify_single_suite_passes() {
    let out = adapref(&["verify", "--suite", "duality"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn converged_adaptive_run_has_nondecreasing_tau_by_strength() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    // The seed-0 run of the strength-bin acceptance experiment.
    let out = adapref(&[
        "gen-data",
        "--pairs",
        "2000",
        "--dim",
        "8",
        "--gt-seed",
        "0",
        "--seed",
        "100",
        "--out",
        p(&data),
    ]);
    assert_eq!(code(&out), 0);
    let run = tmp.path().join("run");
    let out = adapref(&[
        "train",
        "--data",
        p(&data),
        "--loss",
        "ada-lin",
        "--epochs",
        "20",
        "--out",
        p(&run),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let an = tmp.path().join("an");
    assert_eq!(
        code(&adapref(&[
            "analyze",
            "--report",
            p(&run.join("report.json")),
            "--out-dir",
            p(&an)
        ])),
        0
    );
    let t = CsvTable::parse(&fs::read_to_string(an.join("tau_by_strength.csv")).unwrap()).unwrap();
    let taus = t.column(1);
    assert_eq!(taus.len(), 5);
    assert!(taus.windows(2).all(|w| w[1] >= w[0]), "{taus:?}");
}
