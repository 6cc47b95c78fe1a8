use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mrm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrm")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn small_pop(dir: &Path, d: usize, two_cluster: bool) -> PathBuf {
    let het = if two_cluster {
        r#"{"kind":"two_cluster","majority_frac":0.8}"#
    } else {
        r#"{"kind":"gaussian_weights"}"#
    };
    let spec = write(
        dir,
        &format!("pop{d}{two_cluster}.json"),
        &format!(r#"{{"n_users":20,"pairs_per_user":24,"d":{d},"k_true":2,"label_noise":0.1,"heterogeneity":{het}}}"#),
    );
    let corpus = dir.join(format!("corpus{d}{two_cluster}.jsonl"));
    let out = mrm(&["gen", "--config", s(&spec), "--out", s(&corpus), "--truth", s(&dir.join("truth.json"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    corpus
}

#[test]
fn gen_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pop = configs().join("pop.json");
    for run in ["a", "b"] {
        let out = mrm(&[
            "gen",
            "--config",
            s(&pop),
            "--out",
            s(&d.join(format!("{run}.jsonl"))),
            "--truth",
            s(&d.join(format!("{run}.json"))),
            "--seed",
            "42",
        ]);
        assert_eq!(code(&out), 0);
        assert!(String::from_utf8_lossy(&out.stdout).contains("users=128 pairs=7680 d=16"));
    }
    assert_eq!(std::fs::read(d.join("a.jsonl")).unwrap(), std::fs::read(d.join("b.jsonl")).unwrap());
    assert_eq!(std::fs::read(d.join("a.json")).unwrap(), std::fs::read(d.join("b.json")).unwrap());
}

#[test]
fn invalid_noise_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "bad.json", r#"{"n_users":4,"pairs_per_user":4,"d":3,"k_true":2,"label_noise":0.6}"#);
    let out = mrm(&["gen", "--config", s(&spec), "--out", s(&dir.path().join("c.jsonl")), "--truth", s(&dir.path().join("t.json"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_writes_checkpoint_log_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_pop(dir.path(), 6, false);
    let run = dir.path().join("run");
    let out = mrm(&["train", "--corpus", s(&corpus), "--out-dir", s(&run), "--config", s(&configs().join("train.json")), "--epochs", "20"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ck: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ck["version"], 1);
    assert_eq!(ck["k"], 2);
    assert_eq!(ck["d"], 6);
    assert!(ck["w0"].as_array().unwrap().iter().all(|x| x.as_f64().unwrap().is_finite()));
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,batch,mean_query_loss,tau,retained_users,grad_norm_w0,grad_norm_phi\n"));
    // 10 seen users in batches of 2 for 20 epochs
    assert_eq!(log.lines().count(), 1 + 20 * 5);
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["epochs"], 20);
}

#[test]
fn aggregation_choice_changes_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_pop(dir.path(), 6, true);
    let mut texts = Vec::new();
    for agg in ["mean", "soft"] {
        let run = dir.path().join(agg);
        let out = mrm(&["train", "--corpus", s(&corpus), "--out-dir", s(&run), "--epochs", "10", "--aggregate", agg]);
        assert_eq!(code(&out), 0);
        texts.push(std::fs::read_to_string(run.join("checkpoint.json")).unwrap());
    }
    assert_ne!(texts[0], texts[1]);
}

#[test]
fn usage_and_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&mrm(&["train", "--corpus", s(&d.join("missing.jsonl")), "--out-dir", s(&d.join("o")), "--epochs", "1"])), 2);
    assert_eq!(code(&mrm(&["train", "--bogus"])), 2);
    let corpus = small_pop(d, 6, false);
    assert_eq!(code(&mrm(&["train", "--corpus", s(&corpus), "--out-dir", s(&d.join("o"))])), 2, "epochs required");
    assert_eq!(code(&mrm(&["train", "--corpus", s(&corpus), "--out-dir", s(&d.join("o")), "--epochs", "1", "--rho", "0"])), 2);
    assert_eq!(code(&mrm(&["eval", "--baseline", "maml", "--corpus", s(&corpus), "--out-dir", s(&d.join("o"))])), 2);
}

#[test]
fn dimension_mismatch_between_checkpoint_and_corpus_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let d16 = small_pop(dir.path(), 16, false);
    let d8 = small_pop(dir.path(), 8, false);
    let run = dir.path().join("run");
    assert_eq!(code(&mrm(&["train", "--corpus", s(&d16), "--out-dir", s(&run), "--epochs", "1"])), 0);
    let ck = run.join("checkpoint.json");
    assert_eq!(code(&mrm(&["eval", "--checkpoint", s(&ck), "--corpus", s(&d8), "--out-dir", s(&dir.path().join("e"))])), 2);
    assert_eq!(code(&mrm(&["fewshot", "--checkpoint", s(&ck), "--corpus", s(&d8), "--out", s(&dir.path().join("f.csv"))])), 2);
    assert_eq!(code(&mrm(&["adapt", "--checkpoint", s(&ck), "--corpus", s(&d8), "--out", s(&dir.path().join("w.csv"))])), 2);
}

#[test]
fn eval_fewshot_and_adapt_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = small_pop(d, 6, false);
    let run = d.join("run");
    assert_eq!(code(&mrm(&["train", "--corpus", s(&corpus), "--out-dir", s(&run), "--epochs", "5"])), 0);
    let ck = run.join("checkpoint.json");

    let ev = d.join("ev");
    assert_eq!(code(&mrm(&["eval", "--checkpoint", s(&ck), "--corpus", s(&corpus), "--out-dir", s(&ev)])), 0);
    let report = std::fs::read_to_string(ev.join("report.csv")).unwrap();
    assert!(report.starts_with("user_id,population,n_test,accuracy\n"));
    assert_eq!(report.lines().count(), 21);
    let summary = std::fs::read_to_string(ev.join("summary.csv")).unwrap();
    let keys: Vec<&str> = summary.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(keys, ["metric", "overall_mean", "overall_std", "worst10", "worst20", "worst50", "seen_mean", "unseen_mean"]);

    let fs = d.join("fs.csv");
    assert_eq!(code(&mrm(&["fewshot", "--checkpoint", s(&ck), "--corpus", s(&corpus), "--shots", "2,5,10", "--out", s(&fs)])), 0);
    let text = std::fs::read_to_string(&fs).unwrap();
    assert_eq!(text.lines().next().unwrap(), "shots,mean_accuracy,n_users");
    assert_eq!(text.lines().count(), 4);
    assert_eq!(code(&mrm(&["fewshot", "--checkpoint", s(&ck), "--corpus", s(&corpus), "--shots", "500", "--out", s(&fs)])), 2);

    let w = d.join("w.csv");
    assert_eq!(code(&mrm(&["adapt", "--checkpoint", s(&ck), "--corpus", s(&corpus), "--shots", "3", "--out", s(&w)])), 0);
    let text = std::fs::read_to_string(&w).unwrap();
    assert_eq!(text.lines().next().unwrap(), "user_id,population,n_shots,w_1,w_2");
    assert_eq!(text.lines().count(), 21);

    let bl = d.join("bl");
    assert_eq!(code(&mrm(&["eval", "--baseline", "shared-bt", "--corpus", s(&corpus), "--out-dir", s(&bl), "--epochs", "3"])), 0);
    assert!(bl.join("report.csv").exists());
}

#[test]
fn gradcheck_exit_codes() {
    for cfg in ["tiny.json", "tiny-mlp.json"] {
        let out = mrm(&["gradcheck", "--config", s(&configs().join(cfg)), "--tol", "1e-5"]);
        assert_eq!(code(&out), 0, "{cfg}: {}", String::from_utf8_lossy(&out.stdout));
    }
    assert_eq!(code(&mrm(&["gradcheck", "--tol", "1e-30"])), 1);
}

#[test]
fn divergence_exits_3_and_dumps_last_finite_state() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_pop(dir.path(), 6, false);
    let run = dir.path().join("run");
    let out = mrm(&["train", "--corpus", s(&corpus), "--out-dir", s(&run), "--epochs", "2", "--alpha", "1e300", "--n-inner", "3"]);
    assert_eq!(code(&out), 3);
    let dump = std::fs::read_to_string(run.join("last_finite_checkpoint.json")).unwrap();
    assert!(dump.contains("\"version\":1"));
}

#[test]
fn params_count_table() {
    let out = mrm(&["params-count", "--users", "0,1", "--variant", "mrm"]);
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "variant,n_users,params\nmrm,0,36\nmrm,1,38\n");
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_pop(dir.path(), 6, false);
    let mut texts = Vec::new();
    for t in ["1", "4"] {
        let run = dir.path().join(t);
        assert_eq!(code(&mrm(&["--threads", t, "train", "--corpus", s(&corpus), "--out-dir", s(&run), "--epochs", "5"])), 0);
        texts.push(std::fs::read(run.join("checkpoint.json")).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
}
