use std::fs;
use std::path::Path;
use std::process::Command;

fn adasum(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_adasum")).args(args).output().unwrap();
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    (out.status.code().unwrap_or(-1), stderr)
}

fn manifest_value(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("manifest.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from manifest"))
        .to_string()
}

fn csv_header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn single_rank_sum_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let (code, err) = adasum(&["train", "--ranks", "1", "--reduction", "sum", "--out-dir", d.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
    }
    let (ca, cb) = (fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(ca, cb);
    assert_eq!(
        csv_header(&a.join("metrics.csv")),
        "step,epoch,rank_count,reduction,local_steps,train_loss,eval_accuracy,lr,orthogonality_mean,scale"
    );
    assert_eq!(manifest_value(&a, "content_hash"), manifest_value(&b, "content_hash"));
    let entries: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries.iter().filter(|n| n.to_str() == Some("manifest.txt")).count(), 1);
}

#[test]
fn local_steps_cut_allreduce_calls() {
    let dir = tempfile::tempdir().unwrap();
    let mut calls = Vec::new();
    for ls in ["1", "16"] {
        let out = dir.path().join(ls);
        let args = ["train", "--ranks", "2", "--batch-size", "5", "--local-steps", ls, "--out-dir", out.to_str().unwrap()];
        assert_eq!(adasum(&args).0, 0);
        calls.push(manifest_value(&out, "allreduce_calls").parse::<u64>().unwrap());
    }
    assert_eq!(calls[0], 16 * calls[1]);
}

#[test]
fn adasum_beats_sum_at_sixteen_ranks() {
    let dir = tempfile::tempdir().unwrap();
    let mut acc = Vec::new();
    for red in ["adasum", "sum"] {
        let out = dir.path().join(red);
        assert_eq!(adasum(&["train", "--ranks", "16", "--reduction", red, "--out-dir", out.to_str().unwrap()]).0, 0);
        acc.push(manifest_value(&out, "final_eval_accuracy").parse::<f64>().unwrap());
    }
    assert!(acc[0] >= acc[1], "adasum {} vs sum {}", acc[0], acc[1]);
}

#[test]
fn tcp_and_inproc_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("inproc"), dir.path().join("tcp"));
    assert_eq!(adasum(&["train", "--ranks", "4", "--epochs", "1", "--out-dir", a.to_str().unwrap()]).0, 0);
    let (code, err) = adasum(&["train", "--ranks", "4", "--transport", "tcp", "--out-dir", b.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = out.to_str().unwrap();
    assert_eq!(adasum(&["train", "--ranks", "3", "--out-dir", o]).0, 2);
    assert_eq!(adasum(&["train", "--optimizer", "rmsprop", "--out-dir", o]).0, 2);
    assert_eq!(adasum(&["train", "--rank", "0", "--out-dir", o]).0, 2);
    assert_eq!(adasum(&["nope"]).0, 2);
    assert_eq!(adasum(&["--version"]).0, 0);

    let (code, err) = adasum(&["train", "--ranks", "2", "--max-lr", "1e300", "--out-dir", o]);
    assert_eq!(code, 3, "{err}");
    assert!(csv_header(&out.join("metrics.csv")).starts_with("step,epoch"));
    assert!(manifest_value(&out, "status").starts_with("error"));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "# quick run\nranks = 4\nreduction = sum\nepochs = 1\n").unwrap();
    let out = dir.path().join("o");
    let args = ["train", "--config", cfg.to_str().unwrap(), "--reduction", "adasum", "--out-dir", out.to_str().unwrap()];
    assert_eq!(adasum(&args).0, 0);
    assert_eq!(manifest_value(&out, "config.ranks"), "4");
    assert_eq!(manifest_value(&out, "config.reduction"), "adasum");

    fs::write(&cfg, "ranks = 4\nmystery = 1\n").unwrap();
    assert_eq!(adasum(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]).0, 2);
}

#[test]
fn property_commands_write_their_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();

    assert_eq!(adasum(&["lemma-check", "--trials", "1000", "--seed", "3", "--out-dir", &p("lem")]).0, 0);
    let lem = fs::read_to_string(d.join("lem/lemmas.csv")).unwrap();
    assert_eq!(lem.lines().count(), 1001);
    assert!(lem.lines().skip(1).all(|l| l.ends_with(",0")));
    assert_eq!(manifest_value(&d.join("lem"), "violations"), "0");

    assert_eq!(adasum(&["seq-error", "--steps", "20", "--out-dir", &p("se")]).0, 0);
    assert_eq!(
        csv_header(&d.join("se/error.csv")),
        "step,rel_err_adasum,rel_err_sum,grad_norm_mean,orthogonality,cum_rel_err_adasum,cum_rel_err_sum"
    );

    assert_eq!(adasum(&["orthogonality", "--ranks", "4", "--out-dir", &p("orth")]).0, 0);
    assert_eq!(csv_header(&d.join("orth/orth.csv")), "step,epoch,layer_0,layer_1,layer_2,layer_3,mean");

    let args = ["bench", "--ranks", "4", "--min-exp", "10", "--max-exp", "14", "--trials", "3", "--out-dir", &p("b")];
    assert_eq!(adasum(&args).0, 0);
    let bench = fs::read_to_string(d.join("b/bench.csv")).unwrap();
    assert_eq!(bench.lines().next().unwrap(), "bytes,op,median_s,p95_s");
    assert_eq!(bench.lines().count(), 1 + 5 * 2);
}
