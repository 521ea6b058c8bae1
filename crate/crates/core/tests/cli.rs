use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_embedkit"));
    c.env_remove("EMBEDKIT_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn json_of(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Corpus {
    _dir: tempfile::TempDir,
    root: PathBuf,
    images: String,
    texts: String,
    manifest: String,
}

impl Corpus {
    fn new(extra: &[&str]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let out = root.join("synth");
        let mut args = vec!["synth", "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        let path = |f: &str| out.join(f).to_str().unwrap().to_string();
        Corpus {
            images: path("images.cemb"),
            texts: path("texts.cemb"),
            manifest: path("manifest.jsonl"),
            _dir: dir,
            root,
        }
    }
    fn file(&self, name: &str) -> PathBuf {
        self.root.join("synth").join(name)
    }
    fn tmp(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

const SMALL: &[&str] = &["--classes", "4", "--train-per-class", "6", "--val-per-class", "3", "--test-per-class", "3", "--dim", "16"];

fn small(sigma: &str, seed: &str) -> Corpus {
    let mut a = SMALL.to_vec();
    a.extend_from_slice(&["--sigma", sigma, "--seed", seed]);
    Corpus::new(&a)
}

#[test]
fn synth_writes_files_deterministically() {
    let a = small("0.2", "3");
    let b = small("0.2", "3");
    for f in ["images.cemb", "texts.cemb", "manifest.jsonl"] {
        let x = std::fs::read(a.file(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, std::fs::read(b.file(f)).unwrap(), "{f}");
    }
    let c = small("0.2", "4");
    assert_ne!(std::fs::read(&a.images).unwrap(), std::fs::read(&c.images).unwrap());
    let lines = std::fs::read_to_string(&a.manifest).unwrap().lines().count();
    assert_eq!(lines, 4 * 12);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&run(&["synth", "--classes", "0", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["synth", "--classes", "2", "--dim", "1", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["synth", "--classes", "2", "--sigma", "-1", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&[])), 2);

    let c = small("0.1", "0");
    let base = ["--store", &c.images, "--manifest", &c.manifest];
    let ck = c.tmp("m.cprm");
    let mut train = vec!["train", "--checkpoint", s(&ck)];
    train.extend_from_slice(&base);
    let mut zero = train.clone();
    zero.extend_from_slice(&["--epochs", "0"]);
    assert_eq!(code(&run(&zero)), 2);
    let mut neg_lr = train.clone();
    neg_lr.extend_from_slice(&["--lr", "0"]);
    assert_eq!(code(&run(&neg_lr)), 2);
    assert!(!ck.exists());

    let mut rt = vec!["retrieve", "--mode", "class-text"];
    rt.extend_from_slice(&base);
    assert_eq!(code(&run(&rt)), 2);
    let mut rr = vec!["retrieve", "--mode", "class-text-rerank", "--rerank-depth", "0", "--texts", &c.texts];
    rr.extend_from_slice(&base);
    assert_eq!(code(&run(&rr)), 2);
    let mut zs = vec!["zero-shot"];
    zs.extend_from_slice(&base);
    assert_eq!(code(&run(&zs)), 2);

    let mut visual = vec!["retrieve", "--mode", "visual"];
    visual.extend_from_slice(&base);
    let o = bin().args(&visual).env("EMBEDKIT_THREADS", "zero").output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn train_echoes_defaults_and_is_reproducible() {
    let c = Corpus::new(&["--classes", "2", "--train-per-class", "3", "--val-per-class", "1", "--test-per-class", "1", "--dim", "8", "--seed", "5"]);
    let (ck1, ck2) = (c.tmp("a.cprm"), c.tmp("b.cprm"));
    let (rep1, rep2) = (c.tmp("a.json"), c.tmp("b.json"));
    for (ck, rep) in [(&ck1, &rep1), (&ck2, &rep2)] {
        ok(&["train", "--store", &c.images, "--manifest", &c.manifest, "--checkpoint", s(ck), "--report", s(rep)]);
    }
    assert_eq!(std::fs::read(&ck1).unwrap(), std::fs::read(&ck2).unwrap());
    assert_eq!(std::fs::read(&rep1).unwrap(), std::fs::read(&rep2).unwrap());

    let r = read_json(&rep1);
    let cfg = &r["config"];
    assert_eq!(cfg["epochs"], 300);
    assert_eq!(cfg["batch_size"], 64);
    assert_eq!(cfg["lr"], 1e-4);
    assert_eq!(cfg["hidden"], 4096);
    assert_eq!(cfg["seed"], 0);
    assert_eq!(cfg["optimizer"]["name"], "adam");
    let epochs = r["epochs"].as_array().unwrap();
    assert_eq!(epochs.len(), 300);
    let first = epochs[0]["train_loss"].as_f64().unwrap();
    let last = epochs[299]["train_loss"].as_f64().unwrap();
    assert!(last < first, "{last} !< {first}");
}

#[test]
fn train_and_eval_classify() {
    let c = small("0.1", "2");
    let ck = c.tmp("m.cprm");
    let out = ok(&["train", "--store", &c.images, "--manifest", &c.manifest, "--checkpoint", s(&ck), "--epochs", "40", "--hidden", "64", "--batch-size", "8", "--lr", "0.001"]);
    let rep = json_of(&out);
    assert_eq!(rep["epochs"].as_array().unwrap().len(), 40);

    let csv = c.tmp("units.csv");
    let o = ok(&["eval-classify", "--store", &c.images, "--manifest", &c.manifest, "--checkpoint", s(&ck), "--csv", s(&csv)]);
    let r = json_of(&o);
    assert_eq!(r["mode"], "classifier");
    assert_eq!(r["accuracy"], 1.0);
    assert_eq!(r["map"], 1.0);
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().next(), Some("unit,ap"));
    assert_eq!(rows.lines().count(), 1 + 4);

    let pretty = ok(&["eval-classify", "--store", &c.images, "--manifest", &c.manifest, "--checkpoint", s(&ck), "--pretty"]);
    assert!(serde_json::from_slice::<Value>(&pretty.stdout).is_err());
    assert!(!pretty.stdout.is_empty());
}

#[test]
fn train_rejects_store_missing_manifest_ids() {
    let big = small("0.1", "0");
    let other = Corpus::new(&["--classes", "2", "--dim", "16", "--train-per-class", "2", "--val-per-class", "1", "--test-per-class", "1"]);
    let ck = big.tmp("m.cprm");
    let o = run(&["train", "--store", &other.images, "--manifest", &big.manifest, "--checkpoint", s(&ck), "--epochs", "1"]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("img-0003-train-0005"), "{err}");
    assert!(!ck.exists());

    let chk = run(&["check", "--store", &other.images, "--manifest", &big.manifest]);
    assert_eq!(code(&chk), 1);
    assert_eq!(json_of(&chk)["ok"], false);
    let fine = ok(&["check", "--store", &big.images, "--manifest", &big.manifest, "--texts", &big.texts]);
    assert_eq!(json_of(&fine)["ok"], true);
}

#[test]
fn perfect_separation_end_to_end() {
    let c = small("0", "7");
    let base = ["--store", &c.images, "--texts", &c.texts, "--manifest", &c.manifest];
    let mut zs = vec!["zero-shot"];
    zs.extend_from_slice(&base);
    let r = json_of(&ok(&zs));
    assert_eq!(r["accuracy"], 1.0);
    assert_eq!(r["map"], 1.0);
    for mode in ["visual", "class-text", "class-text-rerank", "oracle"] {
        let mut a = vec!["retrieve", "--mode", mode];
        a.extend_from_slice(&base);
        let r = json_of(&ok(&a));
        assert_eq!(r["map"], 1.0, "{mode}");
    }
}

#[test]
fn rerank_depth_one_matches_class_text_order() {
    let c = small("0.6", "11");
    let base = ["--store", &c.images, "--texts", &c.texts, "--manifest", &c.manifest];
    let run_mode = |mode: &str, extra: &[&str], tag: &str| {
        let (rk, rep) = (c.tmp(&format!("{tag}.jsonl")), c.tmp(&format!("{tag}.json")));
        let mut a = vec!["retrieve", "--mode", mode, "--rankings", s(&rk), "--out", s(&rep)];
        a.extend_from_slice(&base);
        a.extend_from_slice(extra);
        ok(&a);
        (rk, rep)
    };
    let (ct_rk, ct_rep) = run_mode("class-text", &[], "ct");
    let (d1_rk, d1_rep) = run_mode("class-text-rerank", &["--rerank-depth", "1"], "d1");
    assert_eq!(std::fs::read(&ct_rk).unwrap(), std::fs::read(&d1_rk).unwrap());
    let ids = |p: &Path| -> Vec<Vec<String>> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                let v: Value = serde_json::from_str(l).unwrap();
                v["ranking"].as_array().unwrap().iter().map(|e| e[0].as_str().unwrap().to_string()).collect()
            })
            .collect()
    };
    assert_eq!(ids(&ct_rk), ids(&d1_rk));
    ok(&["report-diff", s(&ct_rep), s(&d1_rep)]);

    let (vis_rk, _) = run_mode("visual", &[], "vis");
    let (deep_rk, _) = run_mode("class-text-rerank", &["--rerank-depth", "1000"], "deep");
    assert_eq!(ids(&vis_rk), ids(&deep_rk));
}

#[test]
fn report_diff_detects_changes() {
    let c = small("0.9", "13");
    let base = ["--store", &c.images, "--texts", &c.texts, "--manifest", &c.manifest];
    let (a, b) = (c.tmp("a.json"), c.tmp("b.json"));
    for (mode, out) in [("visual", &a), ("class-text", &b)] {
        let mut args = vec!["retrieve", "--mode", mode, "--out", s(out)];
        args.extend_from_slice(&base);
        ok(&args);
    }
    ok(&["report-diff", s(&a), s(&a)]);
    let o = run(&["report-diff", s(&a), s(&b)]);
    assert_eq!(code(&o), 1);
    assert_eq!(json_of(&o)["equal"], false);
    ok(&["report-diff", s(&a), s(&b), "--tolerance", "1"]);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let c = small("0.5", "17");
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "3"].into_iter().enumerate() {
        let (rk, rep) = (c.tmp(&format!("rk{i}")), c.tmp(&format!("rep{i}")));
        let o = bin()
            .args(["retrieve", "--mode", "class-text-rerank", "--rerank-depth", "5", "--store", &c.images, "--texts", &c.texts, "--manifest", &c.manifest, "--rankings", s(&rk), "--out", s(&rep)])
            .env("EMBEDKIT_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        outputs.push((std::fs::read(&rk).unwrap(), std::fs::read(&rep).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn normalize_round_trip() {
    let c = small("0.3", "1");
    let out = c.tmp("n.cemb");
    let r = json_of(&ok(&["normalize", "--input", &c.images, "--output", s(&out)]));
    assert_eq!(r["count"], 48);
    let a = embedkit::EmbeddingStore::load(&c.images).unwrap();
    let b = embedkit::EmbeddingStore::load(&out).unwrap();
    assert!(b.is_normalized());
    assert_eq!(a.ids(), b.ids());
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() <= 1e-6);
        }
    }
}

#[test]
fn fixture_is_readable() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let o = ok(&["check", "--store", s(&dir.join("tiny.cemb")), "--manifest", s(&dir.join("tiny_manifest.jsonl")), "--descriptions", s(&dir.join("tiny_descriptions.json"))]);
    let r = json_of(&o);
    assert_eq!(r["store"]["count"], 2);
    assert_eq!(r["store"]["dim"], 3);
    assert_eq!(r["descriptions"], "ok");
}
