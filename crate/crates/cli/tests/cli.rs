use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use medvit::checkpoint::Checkpoint;

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn medvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medvit"))
        .args(args)
        .env_remove("MEDVIT_SEED")
        .output()
        .expect("spawn medvit")
}

fn ok(args: &[&str]) -> String {
    let out = medvit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn count_params_prints_total_and_breakdown() {
    let text = ok(&["count-params", "--task", "cls", "--config", "default"]);
    let mut lines = text.lines();
    let total: usize = lines.next().unwrap().trim().parse().unwrap();
    let parts: usize = lines
        .map(|l| l.split_whitespace().last().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, parts);
    assert!(text.contains("encoder.axial"));
}

#[test]
fn unknown_flag_exits_with_usage() {
    let out = medvit(&["count-params", "--task", "cls", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_configuration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlearning_rate = 1.0\n").unwrap();
    let out = medvit(&["count-params", "--task", "reg", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    let out = medvit(&[
        "finetune",
        "--from-scratch",
        "--ratio",
        "0",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = medvit(&[
        "pretrain-encoder",
        "--data",
        s(&dir.path().join("absent")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn segmentation_label_directories_are_scored() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-phantoms", "--out", s(&data), "--count", "2", "--seed", "3"]);
    let (pred, truth) = (dir.path().join("pred"), dir.path().join("truth"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&truth).unwrap();
    for entry in fs::read_dir(&data).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name.contains("_labels") {
            fs::copy(data.join(&name), truth.join(&name)).unwrap();
            fs::copy(data.join(&name), pred.join(&name)).unwrap();
        }
    }
    let out = dir.path().join("eval");
    ok(&[
        "evaluate",
        "--task",
        "seg",
        "--pred",
        s(&pred),
        "--truth",
        s(&truth),
        "--out",
        s(&out),
    ]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for k in ["dice_wt", "dice_tc", "dice_et"] {
        assert_eq!(report["metrics"][k], 1.0, "{k}");
    }
    assert!(out.join("report.csv").exists());
}

/// gen-phantoms -> pretrain-encoder -> pretrain-transformer -> finetune ->
/// evaluate with one epoch per stage.
fn smoke(root: &Path, extra: &[&str]) {
    let cfg = desk_config();
    let data = root.join("data");
    ok(&["gen-phantoms", "--out", s(&data), "--count", "10", "--seed", "1"]);
    let common = ["--config", s(&cfg), "--data", s(&data), "--epochs", "1"];
    let enc = root.join("enc");
    ok(&[&["pretrain-encoder", "--out", s(&enc)][..], &common].concat());
    let tr = root.join("tr");
    let from = enc.join("checkpoint.medckpt");
    ok(&[&["pretrain-transformer", "--from", s(&from), "--out", s(&tr)][..], &common].concat());
    let ft = root.join("ft");
    let from = tr.join("checkpoint.medckpt");
    ok(&[
        &["finetune", "--task", "cls", "--from", s(&from), "--out", s(&ft)][..],
        &common,
        extra,
    ]
    .concat());
    let ev = root.join("eval");
    let from = ft.join("checkpoint.medckpt");
    ok(&["evaluate", "--task", "cls", "--from", s(&from), "--data", s(&data), "--out", s(&ev)]);
}

#[test]
fn smoke_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    smoke(dir.path(), &[]);
    for stage in ["enc", "tr", "ft"] {
        for f in ["checkpoint.medckpt", "loss_curve.csv", "resolved_config.toml", "run_info.json"] {
            assert!(dir.path().join(stage).join(f).exists(), "{stage}/{f}");
        }
    }
    let resolved = fs::read_to_string(dir.path().join("ft/resolved_config.toml")).unwrap();
    assert!(resolved.starts_with("# fingerprint = \""));
    for f in ["report.json", "report.csv", "split.json"] {
        assert!(dir.path().join("ft").join(f).exists(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval/report.json")).unwrap()).unwrap();
    let mauc = report["metrics"]["mauc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mauc));
    let ck = Checkpoint::load(&dir.path().join("ft/checkpoint.medckpt")).unwrap();
    assert!(ck.params.iter().any(|(k, _)| k.starts_with("transformer.")));
}

#[test]
fn no_transformer_checkpoint_has_no_transformer_keys() {
    let dir = tempfile::tempdir().unwrap();
    smoke(dir.path(), &["--no-transformer"]);
    let ck = Checkpoint::load(&dir.path().join("ft/checkpoint.medckpt")).unwrap();
    assert!(ck.params.iter().all(|(k, _)| !k.starts_with("transformer.")));
    assert!(ck.params.iter().any(|(k, _)| k.starts_with("encoder.")));
}

#[test]
fn seeded_runs_are_bitwise_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    smoke(a.path(), &[]);
    smoke(b.path(), &[]);
    for f in [
        "enc/checkpoint.medckpt",
        "tr/checkpoint.medckpt",
        "ft/checkpoint.medckpt",
        "ft/report.json",
        "ft/report.csv",
        "ft/loss_curve.csv",
        "eval/report.json",
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}
