use std::path::Path;
use std::process::{Command, Output};

fn ltvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltvae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn manifest(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("manifest.json")).expect("manifest");
    serde_json::from_str(&text).expect("manifest json")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn train_args<'a>(data: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--data", data, "--out", out, "--seed", "4", "--threads", "1",
        "--hidden", "16", "--pretrain-epochs", "3", "--epochs-per-round", "1", "--max-rounds", "2",
    ]
}

#[test]
fn synth_train_eval_sample_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("synth");
    let out = ltvae(&["synth", "--out", p(&synth), "--n", "300", "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&synth);
    assert_eq!(m["command"], "synth");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 2);
    let header = std::fs::read_to_string(synth.join("x.csv")).unwrap();
    assert!(header.starts_with("x0,x1,"));
    assert!(header.lines().next().unwrap().ends_with("x99,label1,label2"));

    let data = synth.join("x.csv");
    let run = dir.path().join("run");
    let out = ltvae(&train_args(p(&data), p(&run)));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.json", "checkpoint.json", "history.json", "search_log.txt", "manifest.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let m = manifest(&run);
    let rounds = m["rounds"].as_array().unwrap();
    assert!(!rounds.is_empty() && rounds.len() <= 2);
    assert!(rounds[0]["sgd_seconds"].as_f64().unwrap() >= 0.0);
    let sha = m["inputs"][0]["sha256"].as_str().unwrap();
    assert_eq!(sha.len(), 64);

    let eval = dir.path().join("eval");
    let model = run.join("model.json");
    let out = ltvae(&[
        "eval", "--data", p(&data), "--model", p(&model), "--out", p(&eval), "--iw-k", "10", "--iw-rows", "20",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(eval.join("metrics.tsv")).unwrap();
    assert!(metrics.contains("loglik_iw\t"));
    assert!(metrics.contains("best_facet_acc_truth1\t"));
    assert!(metrics.contains("best_facet_acc_truth2\t"));

    let samples = dir.path().join("samples");
    let out = ltvae(&[
        "sample", "--model", p(&model), "--out", p(&samples), "--n", "6", "--shape", "10x10", "--png",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(samples.join("grid.pgm").is_file() && samples.join("grid.png").is_file());
    let rows = std::fs::read_to_string(samples.join("samples.csv")).unwrap().lines().count();
    assert_eq!(rows, 7);

    let cond = dir.path().join("cond");
    let out = ltvae(&[
        "sample", "--model", p(&model), "--out", p(&cond), "--mode", "conditional", "--data", p(&data),
        "--row", "3", "--resample", "0", "--n", "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // Overlapping fixed and resampled facets are rejected.
    let out = ltvae(&[
        "sample", "--model", p(&model), "--out", p(&cond), "--mode", "conditional", "--data", p(&data),
        "--fixed", "0", "--resample", "0",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn same_seed_single_thread_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("synth");
    assert!(ltvae(&["synth", "--out", p(&synth), "--n", "200", "--seed", "9"]).status.success());
    let data = synth.join("x.csv");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(ltvae(&train_args(p(&data), p(&a))).status.success());
    assert!(ltvae(&train_args(p(&data), p(&b))).status.success());
    for f in ["model.json", "history.json", "search_log.txt", "checkpoint.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn resume_continues_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("synth");
    assert!(ltvae(&["synth", "--out", p(&synth), "--n", "200", "--seed", "5"]).status.success());
    let data = synth.join("x.csv");
    let full = dir.path().join("full");
    assert!(ltvae(&train_args(p(&data), p(&full))).status.success());

    let part = dir.path().join("part");
    let mut args = train_args(p(&data), p(&part));
    let last = args.len() - 1;
    args[last] = "1";
    assert!(ltvae(&args).status.success());
    let mut args = train_args(p(&data), p(&part));
    args.push("--resume");
    assert!(ltvae(&args).status.success());
    assert_eq!(manifest(&part)["resumed_from_round"], 1);
    assert_eq!(
        std::fs::read(full.join("model.json")).unwrap(),
        std::fs::read(part.join("model.json")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    // Usage errors.
    assert_eq!(ltvae(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(ltvae(&["synth", "--out", p(&out), "--n", "0"]).status.code(), Some(1));
    // Data errors.
    let missing = dir.path().join("missing.csv");
    assert_eq!(ltvae(&["train", "--data", p(&missing), "--out", p(&out)]).status.code(), Some(2));
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "x0,x1\n0.5,abc\n").unwrap();
    assert_eq!(ltvae(&["train", "--data", p(&bad), "--out", p(&out)]).status.code(), Some(2));
    let junk = dir.path().join("model.json");
    std::fs::write(&junk, "{ not json").unwrap();
    assert_eq!(
        ltvae(&["sample", "--model", p(&junk), "--out", p(&out)]).status.code(),
        Some(2)
    );
}
