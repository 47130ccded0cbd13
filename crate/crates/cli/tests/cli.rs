use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cdgmae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdgmae")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Data rows of a rendered table (header and rule skipped).
fn table_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(2).map(|l| l.split_whitespace().map(str::to_string).collect()).filter(|r: &Vec<String>| !r.is_empty()).collect()
}

#[test]
fn flops_single_pair_parses_and_matches_reference() {
    let o = cdgmae(&["flops", "--preset", "vit-s16", "--anchors", "3", "--anchor-mask", "0.25"]);
    assert!(o.status.success());
    let rows = table_rows(&stdout(&o));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "3");
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 0.25);
    let g: f64 = rows[0][3].parse().unwrap();
    assert!((g - 11.6).abs() <= 0.15 * 11.6, "{g}");
}

#[test]
fn flops_single_anchor_unmasked_near_six() {
    let o = cdgmae(&["flops", "--preset", "vit-s16", "--anchors", "1", "--anchor-mask", "0"]);
    let g: f64 = table_rows(&stdout(&o))[0][3].parse().unwrap();
    assert!((g - 6.0).abs() <= 0.9, "{g}");
}

#[test]
fn flops_cross_product_of_lists() {
    let o = cdgmae(&["flops", "--anchors", "2,3", "--anchor-mask", "0.25,0.5"]);
    let rows = table_rows(&stdout(&o));
    let keys: Vec<(String, f64)> = rows.iter().map(|r| (r[0].clone(), r[1].parse().unwrap())).collect();
    assert_eq!(keys, vec![("2".into(), 0.25), ("2".into(), 0.5), ("3".into(), 0.25), ("3".into(), 0.5)]);
}

#[test]
fn config_value_overridden_by_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("flops.txt");
    fs::write(&cfg, "anchors = 2\nanchor_mask = 0.5\n").unwrap();

    let from_file = cdgmae(&["--config", p(&cfg), "flops"]);
    let rows = table_rows(&stdout(&from_file));
    assert_eq!((rows[0][0].as_str(), rows[0][1].parse::<f64>().unwrap()), ("2", 0.5));

    let overridden = cdgmae(&["flops", "--config", p(&cfg), "--anchors", "4"]);
    let rows = table_rows(&stdout(&overridden));
    assert_eq!((rows[0][0].as_str(), rows[0][1].parse::<f64>().unwrap()), ("4", 0.5));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cdgmae(&["flops", "--bogus"]).status.code(), Some(1));
    assert_eq!(cdgmae(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(cdgmae(&[]).status.code(), Some(1));
    let missing = cdgmae(&["synth-views"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--out"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, "unknown_key = 1\n").unwrap();
    assert_eq!(cdgmae(&["--config", p(&cfg), "flops"]).status.code(), Some(1));
}

#[test]
fn io_and_format_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent");
    assert_eq!(cdgmae(&["labelprop", "--identity-stub", "--videos", p(&missing)]).status.code(), Some(2));
    let junk = dir.path().join("junk.cdgt");
    fs::write(&junk, b"not a tensor").unwrap();
    assert_eq!(cdgmae(&["metrics", "--features", p(&junk), p(&junk)]).status.code(), Some(2));
}

#[test]
fn gradcheck_tiny_passes() {
    let o = cdgmae(&["gradcheck", "--tiny"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains(", 0 failed"));
}

#[test]
fn identity_stub_on_static_video_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let videos = dir.path().join("videos");
    let o = cdgmae(&[
        "synth-video",
        "--out",
        p(&videos),
        "--videos",
        "2",
        "--frames",
        "10",
        "--size",
        "16",
        "--motion",
        "static",
        "--seed",
        "3",
    ]);
    assert!(o.status.success());
    let o = cdgmae(&["labelprop", "--identity-stub", "--videos", p(&videos)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("J_m = 1.00000  F_m = 1.00000"), "{}", stdout(&o));
}

fn train_tiny(out: &Path, bags: &Path) -> Output {
    cdgmae(&[
        "train",
        "--out",
        p(out),
        "--bags",
        p(bags),
        "--preset",
        "tiny",
        "--steps",
        "6",
        "--batch-size",
        "4",
        "--anchors",
        "2",
        "--anchor-mask",
        "0.25",
        "--seed",
        "9",
    ])
}

#[test]
fn seeded_pipeline_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let bags = dir.path().join("bags");
    let o = cdgmae(&["synth-views", "--out", p(&bags), "--bags", "6", "--size", "16", "--seed", "4", "--ppm"]);
    assert!(o.status.success());
    assert!(bags.join("bag_0000/real.ppm").exists());

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = train_tiny(out, &bags);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join("checkpoint/manifest.txt").exists());
        assert!(out.join("train.timing").exists());
    }
    let log_a = fs::read(a.join("train.log")).unwrap();
    assert_eq!(log_a, fs::read(b.join("train.log")).unwrap());
    assert_eq!(String::from_utf8_lossy(&log_a).lines().count(), 6);
    assert!(!String::from_utf8_lossy(&log_a).contains("wall_ms"));
    for entry in fs::read_dir(a.join("checkpoint")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join("checkpoint").join(&name)).unwrap(), fs::read(b.join("checkpoint").join(&name)).unwrap());
    }

    for (out, pairing) in [(&a, "views"), (&b, "views")] {
        let o = cdgmae(&[
            "metrics",
            "--checkpoint",
            p(&out.join("checkpoint")),
            "--bags",
            p(&bags),
            "--pairing",
            pairing,
            "--both-directions",
            "--out",
            p(out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(a.join("metrics.records")).unwrap(), fs::read(b.join("metrics.records")).unwrap());
    let recs = fs::read_to_string(a.join("metrics.records")).unwrap();
    assert_eq!(recs.lines().count(), 6 * 4);
    assert!(recs.contains("nps_rev="));

    let random = cdgmae(&["metrics", "--checkpoint", p(&a.join("checkpoint")), "--bags", p(&bags), "--pairing", "random"]);
    assert_eq!(table_rows(&stdout(&random))[0][1], "6");

    let plots = dir.path().join("plots");
    let o = cdgmae(&["report", "--input", p(&a.join("train.log")), "--out", p(&plots), "--y", "loss,lr"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dat = fs::read_to_string(plots.join("train.dat")).unwrap();
    assert!(dat.starts_with("# step loss lr\n"));
    assert_eq!(dat.lines().count(), 7);
    assert!(fs::read_to_string(plots.join("train.svg")).unwrap().contains("<polyline"));
    assert!(fs::read_to_string(plots.join("train.summary.txt")).unwrap().contains("loss"));
}

#[test]
fn train_config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.txt");
    fs::write(&cfg, "preset = tiny\nsteps = 50\nbatch_size = 2\nnum_bags = 4\nbag_size = 2\nnum_anchors = 1\n").unwrap();
    let out = dir.path().join("run");
    let o = cdgmae(&["train", "--config", p(&cfg), "--steps", "3", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(resolved.contains("steps = 3"));
    assert!(resolved.contains("batch_size = 2"));
    assert_eq!(fs::read_to_string(out.join("train.log")).unwrap().lines().count(), 3);
}

#[test]
fn odd_feature_count_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("x.cdgt");
    assert_eq!(cdgmae(&["metrics", "--features", p(&f)]).status.code(), Some(1));
}
