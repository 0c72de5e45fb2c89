use std::path::Path;
use std::process::{Command, Output};

fn seqco(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqco"))
        .args(args)
        .current_dir(cwd)
        .env("SEQCO_LOG", "error")
        .output()
        .expect("spawn seqco")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn json(p: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_slice(&read(p)).unwrap()
}

const SUBCOMMANDS: [&str; 8] = ["synth", "proposals", "masks", "views", "match", "gradcheck", "pretrain", "eval"];

#[test]
fn help_exits_zero_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    for sub in SUBCOMMANDS {
        let o = seqco(&[sub, "--help"], dir.path());
        assert_eq!(code(&o), 0, "{sub}");
        let text = String::from_utf8(o.stdout).unwrap();
        assert!(text.contains("[default:"), "{sub}:\n{text}");
    }
    let text = String::from_utf8(seqco(&["masks", "--help"], dir.path()).stdout).unwrap();
    assert!(text.contains("[default: 16]") && text.contains("[default: 0.7]") && text.contains("[default: complementary]"));
}

#[test]
fn usage_errors_exit_one_and_runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&seqco(&[], dir.path())), 1);
    assert_eq!(code(&seqco(&["synth", "--bogus"], dir.path())), 1);
    assert_eq!(code(&seqco(&["synth", "--out", "d", "--min-objects", "4"], dir.path())), 1);
    assert_eq!(code(&seqco(&["masks", "--out", "m", "--online", "1.5"], dir.path())), 1);
    let o = seqco(&["proposals", "--image", "missing.ppm"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.ppm"));
    std::fs::write(dir.path().join("bad.ckpt"), b"SEQC1\x05").unwrap();
    let o = seqco(&["eval", "--checkpoint", "bad.ckpt", "--synthetic", "2"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("offset"));
}

#[test]
fn synth_and_proposals_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for out in ["a", "b", "c"] {
        let seed = if out == "c" { "2" } else { "1" };
        assert_eq!(code(&seqco(&["synth", "--count", "4", "--seed", seed, "--out", out], p)), 0);
    }
    let names: Vec<_> = std::fs::read_dir(p.join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 8);
    for n in &names {
        assert_eq!(read(p.join("a").join(n)), read(p.join("b").join(n)));
    }
    assert_ne!(read(p.join("a/scene_00000.ppm")), read(p.join("c/scene_00000.ppm")));

    for mode in ["ss", "gt", "random"] {
        let run = |out: &str| {
            let o = seqco(&["proposals", "--image", "a/scene_00001.ppm", "--mode", mode, "--top", "30", "--seed", "1", "--out", out], p);
            assert_eq!(code(&o), 0, "{mode}: {}", String::from_utf8_lossy(&o.stderr));
        };
        run("x.props.json");
        run("y.props.json");
        assert_eq!(read(p.join("x.props.json")), read(p.join("y.props.json")), "{mode}");
        let v = json(p.join("x.props.json"));
        let boxes = v["proposals"].as_array().unwrap();
        assert!(!boxes.is_empty() && boxes.len() <= 30);
        assert_eq!(v["image_sha256"].as_str().unwrap().len(), 64);
        for b in boxes {
            let b: Vec<f64> = b.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
            assert!(b[0] - b[2] / 2.0 >= -1e-9 && b[0] + b[2] / 2.0 <= 1.0 + 1e-9);
        }
        if mode == "gt" {
            assert_eq!(v["proposals"], json(p.join("a/scene_00001.gt.json"))["boxes"]);
        }
    }
    let o = seqco(&["proposals", "--image", "a/scene_00002.ppm"], p);
    assert_eq!(code(&o), 0);
    assert!(p.join("a/scene_00002.props.json").exists());
}

#[test]
fn masks_views_and_match() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&seqco(&["masks", "--out", "m", "--seed", "4"], p)), 0);
    let m = json(p.join("m/masks.json"));
    assert_eq!(m["online"]["masked_cells"], 11);
    assert_eq!(m["momentum"]["masked_cells"], 5);
    let rows = |k: &str| m[k]["grid"].as_array().unwrap().iter().map(|r| r.as_str().unwrap().to_string()).collect::<Vec<_>>();
    for (a, b) in rows("online").iter().zip(rows("momentum")) {
        assert!(a.chars().zip(b.chars()).all(|(x, y)| x != y));
    }
    assert!(read(p.join("m/online.pgm")).starts_with(b"P5\n64 64\n255\n"));

    assert_eq!(code(&seqco(&["synth", "--count", "1", "--out", "d"], p)), 0);
    for out in ["v1", "v2"] {
        assert_eq!(code(&seqco(&["views", "--image", "d/scene_00000.ppm", "--seed", "9", "--out", out], p)), 0);
    }
    for f in ["base.ppm", "view1.ppm", "view2.ppm", "views.json"] {
        assert_eq!(read(p.join("v1").join(f)), read(p.join("v2").join(f)), "{f}");
    }
    assert!(json(p.join("v1/views.json"))["geometry"]["flip"].is_boolean());

    std::fs::write(p.join("cost.json"), "[[4, 1, 3], [2, 0, 5], [3, 2, 2]]").unwrap();
    let o = seqco(&["match", "--cost", "cost.json", "--out", "h.json"], p);
    assert_eq!(code(&o), 0);
    let h = json(p.join("h.json"));
    assert_eq!(h["cost"], 5.0);
    assert_eq!(h["query_for_target"], serde_json::json!([1, 0, 2]));
    assert_eq!(code(&seqco(&["match", "--cost", "cost.json", "--strategy", "one-by-one", "--out", "o.json"], p)), 0);
    assert_eq!(json(p.join("o.json"))["cost"], 6.0);
}

#[test]
fn pretrain_resume_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let common = ["--synthetic", "6", "--batch-size", "2", "--seed", "5"];
    let train = |extra: &[&str]| {
        let mut args = vec!["pretrain"];
        args.extend(common);
        args.extend(extra);
        let o = seqco(&args, p);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    train(&["--steps", "6", "--metrics", "full.ndjson", "--checkpoint", "full.ckpt"]);
    train(&["--steps", "6", "--metrics", "again.ndjson", "--checkpoint", "again.ckpt"]);
    assert_eq!(read(p.join("full.ndjson")), read(p.join("again.ndjson")));
    assert_eq!(read(p.join("full.ckpt")), read(p.join("again.ckpt")));

    train(&["--steps", "3", "--metrics", "split.ndjson", "--checkpoint", "split.ckpt"]);
    train(&["--steps", "6", "--metrics", "split.ndjson", "--checkpoint", "split.ckpt", "--resume", "split.ckpt"]);
    assert_eq!(read(p.join("full.ndjson")), read(p.join("split.ndjson")));
    assert_eq!(read(p.join("full.ckpt")), read(p.join("split.ckpt")));

    let text = String::from_utf8(read(p.join("full.ndjson"))).unwrap();
    assert_eq!(text.lines().count(), 6);
    for (i, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["step"], i as u64 + 1);
        for k in ["loss_total", "loss_focal", "loss_box", "loss_ssl", "n_matched"] {
            assert!(v[k].is_number(), "{k}");
        }
    }

    let args = ["eval", "--checkpoint", "full.ckpt", "--out", "report.json", "--synthetic", "6", "--seed", "5"];
    assert_eq!(code(&seqco(&args, p)), 0);
    let r = json(p.join("report.json"));
    assert_eq!(r["scenes"], 6);
    assert!(r["recall_at_05"].as_f64().unwrap().is_finite());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = seqco(&["gradcheck", "--out", "g.json"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
    let g = json(dir.path().join("g.json"));
    assert!(g["max_relative_error"].as_f64().unwrap() <= 1e-4);
}
