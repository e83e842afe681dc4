use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::CommandFactory;
use serde_json::Value;
use ssm_cli::args::{Cli, Command as Sub};
use tempfile::tempdir;

fn ssm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssm"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = ssm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

const SMALL: &[&str] = &[
    "--resolution",
    "32",
    "--n-train",
    "8",
    "--n-val",
    "2",
    "--n-test",
    "6",
    "--defect-min",
    "3",
    "--defect-max",
    "6",
];

fn synth_small(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["synth", "--out", out];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(dir, &args);
}

const TINY_TRAIN: &[&str] = &[
    "--epochs", "2", "--widths", "4,4,8,8", "--scales", "4,8", "--lr", "1e-3",
];

#[test]
fn help_exits_zero_and_documents_every_flag() {
    let dir = tempdir().unwrap();
    let out = ok(dir.path(), &["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "train", "detect", "eval", "inspect"] {
        assert!(text.contains(sub), "{sub}");
    }
    let cmd = Cli::command();
    for sub in cmd.get_subcommands().filter(|s| s.get_name() != "help") {
        let out = ok(dir.path(), &[sub.get_name(), "--help"]);
        let text = String::from_utf8_lossy(&out.stdout).into_owned();
        for arg in sub.get_arguments() {
            if let Some(long) = arg.get_long() {
                assert!(
                    text.contains(&format!("--{long}")),
                    "{} --{long}",
                    sub.get_name()
                );
                if long != "help" {
                    assert!(
                        arg.get_help().is_some(),
                        "{} --{long} has no help text",
                        sub.get_name()
                    );
                }
            }
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempdir().unwrap();
    let out = ssm(dir.path(), &["detect", "--image", "a.png"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("--checkpoint") && err.contains("Usage"),
        "{err}"
    );

    for args in [
        &["frobnicate"][..],
        &["synth", "--out", "d", "--bogus"],
        &["synth"],
        &[
            "detect",
            "--checkpoint",
            "c",
            "--image",
            "a.png",
            "--data",
            "d",
        ],
        &[
            "detect",
            "--checkpoint",
            "c",
            "--image",
            "a.png",
            "--normalize-heatmaps",
        ],
        &["train", "--data", "d", "--out", "o", "--scales", "4,x"],
        &[
            "eval",
            "--data",
            "d",
            "--checkpoint",
            "c",
            "--out",
            "r.json",
            "--jobs",
            "0",
        ],
    ] {
        assert_eq!(ssm(dir.path(), args).status.code(), Some(1), "{args:?}");
    }
    assert!(!dir.path().join("d").exists());
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempdir().unwrap();
    let out = ssm(
        dir.path(),
        &[
            "eval",
            "--data",
            "missing",
            "--checkpoint",
            "c",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
    fs::write(dir.path().join("junk.ckpt"), b"junk").unwrap();
    assert_eq!(
        ssm(dir.path(), &["inspect", "--checkpoint", "junk.ckpt"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn config_file_sets_flags_and_command_line_wins() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "# desk run\nepochs = 3\n--lr = 0.01\nscales = \"4,8\"\nbatch_size = 2\n\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let cli = ssm_cli::parse([
        "ssm", "train", "--data", "d", "--out", "o", "--config", cfg, "--epochs", "5",
    ])
    .unwrap();
    let Sub::Train(a) = &cli.command else {
        panic!("train expected")
    };
    assert_eq!((a.epochs, a.lr, a.batch_size), (5, 0.01, 2));
    assert_eq!(a.scales.as_slice(), &[4, 8]);

    let echoed = serde_json::to_value(&cli.command).unwrap();
    assert_eq!(echoed["subcommand"], "train");
    assert_eq!(echoed["epochs"], 5);
    assert_eq!(echoed["scales"], serde_json::json!([4, 8]));

    let bad = dir.path().join("bad.cfg");
    for text in [
        "epochz = 3\n",
        "epochs 3\n",
        "config = other.cfg\n",
        "epochs = many\n",
    ] {
        fs::write(&bad, text).unwrap();
        let err = ssm_cli::parse([
            "ssm",
            "train",
            "--data",
            "d",
            "--out",
            "o",
            "--config",
            bad.to_str().unwrap(),
        ]);
        assert!(err.is_err(), "{text:?}");
    }
    let switch = dir.path().join("switch.cfg");
    fs::write(&switch, "normalize-heatmaps = true\nheatmap-dir = maps\n").unwrap();
    let cli = ssm_cli::parse([
        "ssm",
        "detect",
        "--checkpoint",
        "c",
        "--image",
        "a.png",
        "--config",
        switch.to_str().unwrap(),
    ])
    .unwrap();
    let Sub::Detect(a) = &cli.command else {
        panic!("detect expected")
    };
    assert!(a.inference.normalize_heatmaps);
    assert_eq!(a.inference.heatmap_dir.as_deref(), Some(Path::new("maps")));

    let out = ssm(
        dir.path(),
        &[
            "train",
            "--data",
            "d",
            "--out",
            "o",
            "--config",
            "absent.cfg",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempdir().unwrap();
    synth_small(dir.path(), "d", &["--seed", "7"]);
    synth_small(dir.path(), "d2", &["--seed", "7"]);
    synth_small(dir.path(), "d3", &["--seed", "8"]);
    let a = read_tree(&dir.path().join("d"));
    assert!(!a.is_empty());
    assert_eq!(a, read_tree(&dir.path().join("d2")));
    assert_ne!(a, read_tree(&dir.path().join("d3")));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    synth_small(d, "data", &["--seed", "1"]);
    synth_small(d, "data", &["--seed", "2", "--family", "checker"]);

    let mut train = vec![
        "train",
        "--data",
        "data",
        "--out",
        "model",
        "--checkpoint-every",
        "1",
    ];
    train.extend_from_slice(TINY_TRAIN);
    ok(d, &train);
    for cat in ["stripes", "checker"] {
        let m = d.join("model").join(cat);
        for f in [
            "model.ckpt",
            "epoch_0001.ckpt",
            "epoch_0002.ckpt",
            "train.json",
            "timing.json",
        ] {
            assert!(m.join(f).is_file(), "{cat}/{f}");
        }
        let log = fs::read_to_string(m.join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
        for line in log.lines() {
            let v: Value = serde_json::from_str(line).unwrap();
            assert!(v["loss"]["total"].as_f64().unwrap().is_finite());
        }
    }

    // Same inputs give the same checkpoint and log.
    train[4] = "model2";
    ok(d, &train);
    for f in ["model.ckpt", "train_log.jsonl", "train.json"] {
        let a = fs::read(d.join("model/stripes").join(f)).unwrap();
        let b = fs::read(d.join("model2/stripes").join(f)).unwrap();
        if f == "train.json" {
            let mut a: Value = serde_json::from_slice(&a).unwrap();
            let mut b: Value = serde_json::from_slice(&b).unwrap();
            a["config"]["out"] = Value::Null;
            b["config"]["out"] = Value::Null;
            assert_eq!(a, b);
        } else {
            assert_eq!(a, b, "{f}");
        }
    }

    let out = ok(d, &["inspect", "--checkpoint", "model/stripes/model.ckpt"]);
    let header: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(header["scales"], serde_json::json!([4, 8]));
    assert!(header["thresholds"]["4"].as_f64().is_some());
    assert!(header["num_params"].as_u64().unwrap() > 0);

    let eval = [
        "eval",
        "--data",
        "data",
        "--checkpoint",
        "model",
        "--out",
        "out/report.json",
        "--heatmap-dir",
        "maps",
    ];
    ok(d, &eval);
    let bytes = fs::read(d.join("out/report.json")).unwrap();
    let report: Value = serde_json::from_slice(&bytes).unwrap();
    let rows = report["categories"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for key in ["image_auc", "pixel_auc"] {
        let vals: Vec<f64> = rows.iter().map(|r| r[key].as_f64().unwrap()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(
            (report["mean"][key].as_f64().unwrap() - mean).abs() < 1e-12,
            "{key}"
        );
    }
    assert_eq!(report["images"].as_array().unwrap().len(), 12);
    assert_eq!(report["config"]["subcommand"], "eval");
    assert_eq!(report["config"]["max_iters"], 10);
    assert!(d.join("out/report.csv").is_file());
    assert!(d.join("out/report_timing.json").is_file());
    assert!(d.join("maps/stripes/test/good/000.png").is_file());
    assert!(d.join("maps/checker/test/good/000_color.png").is_file());

    ok(d, &eval);
    assert_eq!(fs::read(d.join("out/report.json")).unwrap(), bytes);

    let out = ok(
        d,
        &[
            "detect",
            "--checkpoint",
            "model/checker/model.ckpt",
            "--data",
            "data/checker/test/good",
            "--scales",
            "8",
            "--heatmap-dir",
            "det",
            "--normalize-heatmaps",
        ],
    );
    let det: Value = serde_json::from_slice(&out.stdout).unwrap();
    let images = det["images"].as_array().unwrap();
    assert_eq!(images.len(), 3);
    for img in images {
        assert!(img["epsilon"].as_f64().unwrap() >= 0.0);
        assert_eq!(img["epsilon_k"].as_object().unwrap().len(), 1);
    }
    assert_eq!(det["config"]["scales"], serde_json::json!([8]));
    assert!(d.join("det/000.json").is_file());

    let single = ssm(
        d,
        &[
            "eval",
            "--data",
            "data",
            "--checkpoint",
            "model/stripes/model.ckpt",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(single.status.code(), Some(2));
    ok(
        d,
        &[
            "eval",
            "--data",
            "data",
            "--category",
            "stripes",
            "--checkpoint",
            "model/stripes/model.ckpt",
            "--out",
            "r.json",
        ],
    );
    let missing = ssm(
        d,
        &[
            "detect",
            "--checkpoint",
            "model/stripes/model.ckpt",
            "--image",
            "x.png",
            "--scales",
            "16",
        ],
    );
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn diverging_training_saves_last_good_checkpoint() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    synth_small(d, "data", &[]);
    let mut args = vec!["train", "--data", "data", "--out", "model"];
    args.extend_from_slice(TINY_TRAIN);
    args.extend_from_slice(&["--lr", "1e30"]);
    let out = ssm(d, &args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    assert!(d.join("model/stripes/last_good.ckpt").is_file());
    assert!(!d.join("model/stripes/model.ckpt").exists());
    ok(
        d,
        &["inspect", "--checkpoint", "model/stripes/last_good.ckpt"],
    );
}
