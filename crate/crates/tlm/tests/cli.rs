use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tlm::checkpoint::model_to_bytes;
use tlm::config::RunConfig;
use tlm_core::model::LanguageModel;

fn tlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tlm")).args(args).env_remove("TLM_OUTPUT_ROOT").output().unwrap()
}

fn ok(args: &[&str]) {
    let o = tlm(args);
    assert!(o.status.success(), "{args:?}\n{}", String::from_utf8_lossy(&o.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.json");
        fs::write(
            &config,
            r#"{"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 32, "max_seq_len": 64,
               "pretrain_steps": 5, "pretrain_window": 32, "lora_rank": 2, "max_new_tokens": 4,
               "p0_quantile": 0.5, "entropy_tokens": 4, "cross_grad_batch_size": 2, "trend_every": 1}"#,
        )
        .unwrap();
        Self { _dir: dir, root, config }
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn corpus(&self, domain: &str, n: &str) -> PathBuf {
        let out = self.dir(domain);
        ok(&["gen-corpus", "--domain", domain, "--n", n, "--seed", "3", "--out", s(&out)]);
        out.join("corpus.jsonl")
    }
}

fn same_files(a: &Path, b: &Path, files: &[&str]) {
    for f in files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn full_pipeline_and_replay() {
    let fx = Fixture::new();
    let cfg = s(&fx.config);
    let source = fx.corpus("source-qa", "20");
    let target = fx.corpus("target-qa", "8");

    let pre = fx.dir("pre");
    ok(&["pretrain", "--config", cfg, "--corpus", s(&source), "--out", s(&pre)]);
    let model = pre.join("model.ckpt");

    let ttl = fx.dir("ttl");
    ok(&["ttl", "--config", cfg, "--model", s(&model), "--data", s(&target), "--out", s(&ttl)]);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(ttl.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["samples"], 8);
    assert_eq!(fs::read_to_string(ttl.join("predictions.jsonl")).unwrap().lines().count(), 8);

    let online = fx.dir("online");
    ok(&["ttl", "--config", cfg, "--model", s(&model), "--data", s(&target), "--mode", "online", "--cadence", "3", "--out", s(&online)]);

    let eval = fx.dir("eval");
    ok(&["eval", "--config", cfg, "--model", s(&model), "--adapter", s(&ttl.join("adapter.lora")), "--data", s(&target), "--out", s(&eval)]);
    let e: serde_json::Value = serde_json::from_slice(&fs::read(eval.join("eval.json")).unwrap()).unwrap();
    assert!(e["mean_input_ppl"].as_f64().unwrap() > 1.0);

    for kind in ["cross-grad", "taylor", "trend", "contribution"] {
        ok(&["diagnose", kind, "--config", cfg, "--model", s(&model), "--data", s(&target), "--out", s(&fx.dir(kind))]);
    }
    ok(&[
        "diagnose", "forgetting", "--config", cfg, "--model", s(&model), "--data", s(&target),
        "--source-data", s(&source), "--set", "forgetting_budgets=[0,2]", "--out", s(&fx.dir("forgetting")),
    ]);
    ok(&["baseline-entropy", "--config", cfg, "--model", s(&model), "--data", s(&target), "--out", s(&fx.dir("entropy"))]);

    for (dir, files) in [
        (&pre, &["model.ckpt", "pretrain_losses.csv", "pretrain.json"][..]),
        (&ttl, &["report.csv", "predictions.jsonl", "adapter.lora", "summary.json"][..]),
    ] {
        let again = fx.dir("replayed");
        ok(&["replay", "--manifest", s(&dir.join("manifest.json")), "--out", s(&again)]);
        same_files(dir, &again, files);
        fs::remove_dir_all(&again).unwrap();
    }
}

#[test]
fn zero_step_pretraining_writes_the_initialization() {
    let fx = Fixture::new();
    let source = fx.corpus("source-markov", "5");
    let out = fx.dir("pre");
    ok(&["pretrain", "--config", s(&fx.config), "--corpus", s(&source), "--steps", "0", "--out", s(&out)]);
    let cfg = RunConfig::load(&fx.config).unwrap();
    let init = LanguageModel::new(cfg.model()).unwrap();
    assert_eq!(fs::read(out.join("model.ckpt")).unwrap(), model_to_bytes(&init));
}

#[test]
fn exit_codes_by_error_kind() {
    let fx = Fixture::new();
    let out = fx.dir("x");
    let code = |args: &[&str]| tlm(args).status.code().unwrap();

    assert_eq!(code(&["ttl", "--out", s(&out), "--model", "m", "--data", "d", "--bogus"]), 2);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["pretrain", "--out", s(&out), "--corpus", s(&fx.dir("missing.jsonl"))]), 3);

    let bad_cfg = fx.dir("bad.json");
    fs::write(&bad_cfg, r#"{"no_such_key": 1}"#).unwrap();
    assert_eq!(code(&["pretrain", "--config", s(&bad_cfg), "--out", s(&out), "--corpus", "c"]), 4);

    let junk = fx.dir("junk.jsonl");
    fs::write(&junk, "not json\n").unwrap();
    assert_eq!(code(&["pretrain", "--out", s(&out), "--corpus", s(&junk)]), 5);

    let junk_model = fx.dir("model.ckpt");
    fs::write(&junk_model, b"garbage").unwrap();
    let target = fx.corpus("target-qa", "2");
    assert_eq!(code(&["ttl", "--out", s(&out), "--model", s(&junk_model), "--data", s(&target)]), 5);
}

#[test]
fn relative_output_resolves_under_the_output_root() {
    let fx = Fixture::new();
    let o = Command::new(env!("CARGO_BIN_EXE_tlm"))
        .args(["gen-corpus", "--domain", "target-qa", "--n", "3", "--out", "rel"])
        .env("TLM_OUTPUT_ROOT", &fx.root)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(fx.root.join("rel/corpus.jsonl")).unwrap().lines().count(), 3);
}
