use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "seed": 7,
  "out_dir": "out",
  "fixture": {
    "families": [
      {"family": "west", "consonants": "ptkmn", "vowels": "aeiou", "n_stems": 40, "n_suffixes": 2,
       "locales": [{"tag": "wa-AA", "sentences": 150}, {"tag": "wb-BB", "sentences": 120}]},
      {"family": "east", "consonants": "bdgvz", "vowels": "äöy", "n_stems": 40, "n_suffixes": 2,
       "locales": [{"tag": "ea-DD", "sentences": 150}, {"tag": "eb-EE", "sentences": 100}]}
    ],
    "mutation_rate": 0.1,
    "loanword_rate": 0.0,
    "min_words": 3,
    "max_words": 6,
    "zipf_exponent": 1.0,
    "nbest_locales": [],
    "nbest": {"utterances": 4, "hypotheses": 3}
  },
  "clustering": {"k": 2},
  "bpe": {"vocab_size": 80},
  "model": {"n_layers": 1, "d_model": 8, "n_heads": 2, "d_ff": 16, "context_len": 16, "dropout_p": 0.0},
  "train": {"steps": 5, "batch_size": 4, "peak_lr": 0.001, "warmup_steps": 1, "eval_every": 5},
  "finetune": {"steps": 5, "batch_size": 4, "peak_lr": 0.001, "warmup_steps": 1, "eval_every": 5},
  "valid_sentences": 10,
  "targets": ["wb-BB"]
}"#;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_locale-forge"))
        .current_dir(dir)
        .env("LOCALE_FORGE_LOG", "error")
        .args(args)
        .output()
        .expect("binary runs")
}

fn error_report(out: &Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or_default().to_string();
    serde_json::from_str(&line).unwrap_or_else(|e| panic!("stderr is not a JSON report ({e}): {line}"))
}

fn tiny_config(dir: &Path) {
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();
}

/// The tiny config with `edit` applied to its JSON object.
fn edited_config(dir: &Path, edit: impl FnOnce(&mut serde_json::Map<String, Value>)) {
    let mut v: Value = serde_json::from_str(TINY).unwrap();
    edit(v.as_object_mut().unwrap());
    std::fs::write(dir.join("c.json"), v.to_string()).unwrap();
}

#[test]
fn missing_manifest_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    edited_config(dir.path(), |m| {
        m.remove("fixture");
        m.insert("manifest".into(), "nope.json".into());
    });
    let out = bin(dir.path(), &["--config", "c.json", "ingest"]);
    assert_eq!(out.status.code(), Some(2));
    let r = error_report(&out);
    assert_eq!(r["class"], "config");
    assert!(r["message"].as_str().unwrap().contains("manifest"), "{r}");
}

#[test]
fn missing_seed_is_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    edited_config(dir.path(), |m| {
        m.remove("seed");
    });
    let out = bin(dir.path(), &["--config", "c.json", "ingest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_report(&out)["message"].as_str().unwrap().contains("seed"));
}

#[test]
fn stage_out_of_order_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());
    let out = bin(dir.path(), &["--config", "tiny.json", "ingest"]);
    assert_eq!(out.status.code(), Some(4));
    let r = error_report(&out);
    assert_eq!(r["class"], "data");
    assert_eq!(r["stage"], "ingest");
}

#[test]
fn cluster_k_equal_to_n_gives_singletons() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());
    for cmd in ["gen-fixture", "ingest", "similarity"] {
        let out = bin(dir.path(), &["--config", "tiny.json", cmd]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = bin(dir.path(), &["--config", "tiny.json", "cluster", "--k", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let g: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/grouping.json")).unwrap()).unwrap();
    let groups = g["groups"].as_array().unwrap();
    assert_eq!(groups.len(), 4);
    assert!(groups.iter().all(|x| x.as_array().unwrap().len() == 1));
    let record: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/records/cluster.json")).unwrap()).unwrap();
    assert_eq!(record["master_seed"], 7);

    let out = bin(dir.path(), &["--config", "tiny.json", "cluster", "--k", "9"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn gen_fixture_is_deterministic_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());
    let read = |sub: &str| std::fs::read(dir.path().join(sub).join("fixture/corpora/wa-AA.txt")).unwrap();
    for (out, seed) in [("a", "7"), ("b", "7"), ("c", "8")] {
        let o = bin(dir.path(), &["--config", "tiny.json", "--out", out, "--seed", seed, "gen-fixture"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn tiny_run_all_writes_every_stage_record() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());
    let out = bin(dir.path(), &["--config", "tiny.json", "run-all"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let o = dir.path().join("out");
    for f in ["grouping.json", "groups/group-0/model.lglm", "targets/wb-BB/mft.lglm", "eval.json", "cost.json"] {
        assert!(o.join(f).is_file(), "missing {f}");
    }
    assert!(o.join("records/train.json").is_file());
}
