use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn attrikit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attrikit")).args(args).output().expect("binary runs")
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if p.is_dir() {
            files.extend(tree_bytes(&p).into_iter().map(|(n, b)| (format!("{name}/{n}"), b)));
        } else {
            files.push((name, fs::read(&p).unwrap()));
        }
    }
    files.sort();
    files
}

#[test]
fn version_names_the_schema() {
    let out = attrikit(&["--version"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("attrikit ") && text.contains("(schema 1)"), "{text}");
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(attrikit(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(attrikit(&["gen-data"]).status.code(), Some(1));
    assert_eq!(attrikit(&[]).status.code(), Some(1));
    assert_eq!(attrikit(&["gen-data", "--out-dir", "x", "--seed", "minus"]).status.code(), Some(1));
    assert_eq!(attrikit(&["gen-data", "--out-dir", "x", "--min-positives", "9"]).status.code(), Some(1));
    assert_eq!(attrikit(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.atk");
    let out = attrikit(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (d, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let out = attrikit(&["gen-data", "--count", "6", "--seed", seed, "--out-dir", d.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let ta = tree_bytes(&a);
    assert!(ta.iter().any(|(n, _)| n == "annotations.jsonl"));
    assert_eq!(ta, tree_bytes(&b));
    assert_ne!(ta, tree_bytes(&c));
}

#[test]
fn selftest_passes() {
    let out = attrikit(&["selftest", "--seeds", "2"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn pipeline_runs_end_to_end_on_a_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let config = r#"{
        "data": {"count": 24},
        "model": {"dim": 16, "heads": 2, "queries": 2, "encoder_depth": 2, "connector_depth": 1, "decoder_depth": 1},
        "train": {"stage1_steps": 4, "stage2_steps": 2, "batch": 4, "warmup_steps": 1, "checkpoint_every": 2},
        "compose": {"steps": 2},
        "eval": {"validation_pairs": 8, "gallery": 12, "queries": 4, "cases_per_attribute": 1,
                 "composition_cases": 2, "projection_points": 30, "permutations": 5}
    }"#;
    fs::write(p("c.json"), config).unwrap();
    let ok = |args: &[&str]| {
        let out = attrikit(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    ok(&["gen-data", "--config", &p("c.json"), "--out-dir", &p("data")]);
    ok(&["train", "--config", &p("c.json"), "--data-dir", &p("data"), "--out-dir", &p("run")]);
    let ckpt = p("run/final.atk");
    assert!(Path::new(&ckpt).exists());

    let report: serde_json::Value = serde_json::from_str(&ok(&["eval", "--config", &p("c.json"), "--checkpoint", &ckpt])).unwrap();
    for key in ["gap", "retrieval", "personalization", "composition", "single_reference", "color_structure"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }

    let img = p("data/images/000000_x.ppm");
    let compose = |out: &str| {
        ok(&[
            "compose", "--checkpoint", &ckpt, "--ref", &format!("{img}:object color"), "--w", "0.5",
            "--prompt", "a small circle", "--steps", "3", "--seed", "2", "--out", out,
        ]);
        fs::read(out).unwrap()
    };
    assert_eq!(compose(&p("a.ppm")), compose(&p("b.ppm")));

    let hits = ok(&["retrieve", "--checkpoint", &ckpt, "--gallery", &p("data/images"), "--query", &img, "--attribute", "foreground hue", "--k", "3"]);
    assert_eq!(hits.lines().count(), 3);
    assert!(hits.lines().next().unwrap().contains("000000_x.ppm"), "{hits}");

    let csv = ok(&["project", "--config", &p("c.json"), "--checkpoint", &ckpt, "--count", "30"]);
    assert_eq!(csv.lines().next(), Some("x,y,label"));
    assert_eq!(csv.lines().count(), 31);

    let unknown = attrikit(&["retrieve", "--checkpoint", &ckpt, "--gallery", &p("data/images"), "--query", &img, "--attribute", "texture"]);
    assert_eq!(unknown.status.code(), Some(1));
}
