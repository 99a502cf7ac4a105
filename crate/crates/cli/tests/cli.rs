use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cosim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cosim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cosim(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, count: &str) {
    ok(&[
        "synth",
        "--out",
        p(dir),
        "--seed",
        "3",
        "--count",
        count,
        "--size",
        "32",
        "32",
    ]);
}

fn first_id(data: &Path) -> String {
    fs::read_to_string(data.join("manifest.txt"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_owned()
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let data = t.join("data");
    synth(&data, "6");
    assert_eq!(
        fs::read_to_string(data.join("manifest.txt"))
            .unwrap()
            .lines()
            .count(),
        6
    );

    let ckpt = t.join("m.ckpt");
    let hist = t.join("history.csv");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
        "--epochs",
        "2",
        "--batch",
        "2",
        "--holdout",
        "0.34",
        "--history",
        p(&hist),
        "--balance",
        "--seed",
        "1",
    ]);
    assert!(fs::read(&ckpt).unwrap().starts_with(b"COSIM1\n"));
    let history = fs::read_to_string(&hist).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,layer,metric,value"));
    assert!(history.contains(",heldout_f,"));

    let report = t.join("report.json");
    let pr = t.join("pr.csv");
    let out = ok(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--report",
        p(&report),
        "--pr-csv",
        p(&pr),
        "--n-thresholds",
        "11",
    ]);
    assert!(!out.is_empty());
    assert!(fs::read_to_string(&report).unwrap().contains("\"best_f\""));
    let pr_text = fs::read_to_string(&pr).unwrap();
    assert_eq!(pr_text.lines().next(), Some("threshold,precision,recall"));
    assert_eq!(pr_text.lines().count(), 12);

    let id = first_id(&data);
    let (map, mask) = (t.join("map.png"), t.join("mask.png"));
    ok(&[
        "infer",
        "--ckpt",
        p(&ckpt),
        "--t0",
        p(&data.join("t0").join(format!("{id}.png"))),
        "--t1",
        p(&data.join("t1").join(format!("{id}.png"))),
        "--out-map",
        p(&map),
        "--out-mask",
        p(&mask),
        "--thresholds",
        "0.2,0.3,0.4",
    ]);
    assert!(fs::metadata(&map).unwrap().len() > 0);
    assert!(fs::metadata(&mask).unwrap().len() > 0);

    let contrast = t.join("contrast.csv");
    ok(&["contrast", "--history", p(&hist), "--out", p(&contrast)]);
    let rows = fs::read_to_string(&contrast).unwrap();
    assert_eq!(rows.lines().next(), Some("epoch,layer,metric,value"));
    assert_eq!(rows.lines().count(), 1 + 2 * 3 * 4);

    let feats = t.join("features.csv");
    ok(&[
        "export-features",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--level",
        "1",
        "--samples",
        "3",
        "--seed",
        "2",
        "--out",
        p(&feats),
    ]);
    let table = fs::read_to_string(&feats).unwrap();
    assert_eq!(table.lines().count(), 1 + 6 * 3 * 2);
    assert!(table.starts_with("pair_id,branch,x,y,changed,f0,"));
}

#[test]
fn training_is_reproducible_from_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "4");
    let mut bytes = Vec::new();
    for name in ["a.ckpt", "b.ckpt"] {
        let ckpt = tmp.path().join(name);
        ok(&[
            "train",
            "--data",
            p(&data),
            "--out",
            p(&ckpt),
            "--epochs",
            "1",
            "--seed",
            "5",
        ]);
        bytes.push(fs::read(ckpt).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn explicit_flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "4");
    let cfg = tmp.path().join("train.cfg");
    fs::write(
        &cfg,
        "# quick run\nepochs=3\nbatch = 2\nbalance=true\nlr_head=0.005\n\n",
    )
    .unwrap();
    let hist = tmp.path().join("h.csv");
    let ckpt = tmp.path().join("m.ckpt");
    ok(&[
        "--config",
        p(&cfg),
        "train",
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
        "--history",
        p(&hist),
        "--epochs",
        "1",
    ]);
    let epochs: std::collections::BTreeSet<String> = fs::read_to_string(&hist)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_owned())
        .collect();
    assert_eq!(epochs.len(), 1);

    let hist3 = tmp.path().join("h3.csv");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
        "--history",
        p(&hist3),
    ]);
    assert!(fs::read_to_string(&hist3).unwrap().contains("\n3,"));
}

#[test]
fn exit_codes_follow_error_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let ckpt = tmp.path().join("m.ckpt");

    assert_eq!(cosim(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(cosim(&[]).status.code(), Some(2));

    let out = cosim(&["train", "--data", p(&missing), "--out", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out.stderr.is_empty());

    let out = cosim(&["eval", "--ckpt", p(&missing), "--data", p(&missing)]);
    assert_eq!(out.status.code(), Some(3));

    let data = tmp.path().join("data");
    synth(&data, "4");
    let out = cosim(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
        "--epochs",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = cosim(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
        "--epochs",
        "3",
        "--lr",
        "1e200",
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(!ckpt.exists());

    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "epochs 3\n").unwrap();
    let out = cosim(&[
        "--config",
        p(&cfg),
        "train",
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
