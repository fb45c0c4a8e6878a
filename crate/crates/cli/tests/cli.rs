//! Black-box tests of the installed binary: spawn it, parse stdout as JSON,
//! and hold every output to the shipped schema plus the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

use capalign_core::mat::Mat;
use capalign_core::numio::{save_tensor, TensorFile};
use serde_json::Value;

fn capalign(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capalign"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary spawns")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

fn assert_schema(command: &str, value: &Value) {
    let errs = capalign_cli::schema::validate_command_output(command, value);
    assert!(errs.is_empty(), "{command} output violates schema: {errs:?}");
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn write_tensor(path: &Path, t: &TensorFile) {
    save_tensor(path, t).unwrap();
}

fn ot_fixture(dir: &Path) {
    let cost = Mat::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
    write_tensor(&dir.join("c.tnsr"), &TensorFile::from_mat(&cost));
    let half = TensorFile::from_f64(vec![2], vec![0.5, 0.5]).unwrap();
    write_tensor(&dir.join("a.tnsr"), &half);
    write_tensor(&dir.join("b.tnsr"), &half);
}

#[test]
fn sinkhorn_reports_cost_and_residuals() {
    let dir = tempfile::tempdir().unwrap();
    ot_fixture(dir.path());
    let out = capalign(
        dir.path(),
        &["sinkhorn", "--cost", "c.tnsr", "--a", "a.tnsr", "--b", "b.tnsr", "--eps", "0.05",
          "--iters", "30", "--out", "plan.tnsr"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_schema("sinkhorn", &v);
    // Mass should concentrate on the zero-cost diagonal.
    assert!(v["cost"].as_f64().unwrap() < 0.01, "cost {}", v["cost"]);
    assert!(v["row_residual"].as_f64().unwrap() < 1e-6);
    assert!(v["col_residual"].as_f64().unwrap() < 1e-6);
    let plan = capalign_core::numio::load_tensor(&dir.path().join("plan.tnsr"))
        .unwrap()
        .to_mat()
        .unwrap();
    assert_eq!(plan.shape(), (2, 2));
    assert!(plan.get(0, 0) > 0.4 && plan.get(1, 1) > 0.4);
}

#[test]
fn verify_pairs_matches_a_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("pairs.csv"),
        "caption_id,image_id,text_en,text_bn,similarity,valid\n\
         1,10,a red box,lal baksho,,\n\
         2,20,a blue dog,nil kukur,,\n\
         3,30,a green tree,shobuj gach,,\n",
    )
    .unwrap();
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let emb = Mat::from_vec(
        3,
        4,
        vec![
            1.0, 0.0, 1.0, 0.0, // cos 1.0: accepted
            1.0, 0.0, 0.0, 1.0, // cos 0.0: rejected
            1.0, 0.0, r, r, // cos ~0.707: accepted
        ],
    );
    write_tensor(&dir.path().join("emb.tnsr"), &TensorFile::from_mat(&emb));
    let out = capalign(
        dir.path(),
        &["verify-pairs", "--records", "pairs.csv", "--embeddings", "emb.tnsr",
          "--threshold", "0.55", "--out", "verified.csv"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_schema("verify-pairs", &v);
    assert_eq!(v["summary"]["total"], 3);
    assert_eq!(v["summary"]["accepted"], 2);
    assert_eq!(v["summary"]["rejected"], 1);
    assert_eq!(v["summary"]["unverified"], 0);
    let written = std::fs::read_to_string(dir.path().join("verified.csv")).unwrap();
    assert_eq!(written.lines().count(), 4, "header plus each record");
    assert!(written.lines().nth(2).unwrap().ends_with(",false"));
}

#[test]
fn train_toy_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["train-toy", "--epochs", "1", "--batches", "2", "--seed", "7"];
    let first = capalign(dir.path(), &args);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let second = capalign(dir.path(), &args);
    assert_eq!(first.stdout, second.stdout);
    let v = stdout_json(&first);
    assert_schema("train-toy", &v);
    assert_eq!(v["config"]["seed"], 7);
    assert_eq!(v["steps"], 2);
    assert_eq!(v["history"].as_array().unwrap().len(), 2);
}

#[test]
fn caption_only_training_reports_no_alignment_terms() {
    let dir = tempfile::tempdir().unwrap();
    let out = capalign(
        dir.path(),
        &["train-toy", "--epochs", "1", "--batches", "1", "--mode", "caption-only"],
    );
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    assert_schema("train-toy", &v);
    assert!(v["final"]["losses"]["pal"].is_null());
    assert!(v["final"]["losses"]["ot"].is_null());
    assert_eq!(v["final"]["losses"]["ce"], v["final"]["losses"]["total"]);
}

#[test]
fn generate_decodes_every_image_of_the_scene_batch() {
    let dir = tempfile::tempdir().unwrap();
    let trained = capalign(
        dir.path(),
        &["train-toy", "--epochs", "1", "--batches", "1", "--checkpoint-dir", "ckpt",
          "--history", "false"],
    );
    assert_eq!(code(&trained), 0, "{}", String::from_utf8_lossy(&trained.stderr));
    assert!(stdout_json(&trained)["history"].is_null());
    let out = capalign(dir.path(), &["generate", "--checkpoint", "ckpt", "--beams", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_schema("generate", &v);
    let captions = v["captions"].as_array().unwrap();
    assert!(!captions.is_empty());
    for c in captions {
        let ids = c["token_ids"].as_array().unwrap();
        let names = c["tokens"].as_array().unwrap();
        assert_eq!(ids.len(), names.len());
        assert_eq!(names[0], "<bos>");
    }
}

#[test]
fn bleu_scores_identical_corpora_at_one_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let lines = "[\"a\",\"red\",\"box\",\"sits\"]\n[\"the\",\"dog\",\"runs\",\"far\"]\n";
    std::fs::write(dir.path().join("cand.jsonl"), lines).unwrap();
    std::fs::write(dir.path().join("ref.jsonl"), lines).unwrap();
    let out = capalign(
        dir.path(),
        &["bleu", "--candidates", "cand.jsonl", "--references", "ref.jsonl"],
    );
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    assert_schema("bleu", &v);
    assert_eq!(v["candidates"], 2);
    let scores = v["scores"].as_array().unwrap();
    assert_eq!(scores.len(), 4);
    for s in scores {
        assert_eq!(s.as_f64().unwrap(), 100.0);
    }
}

#[test]
fn diagnose_reports_alignment_between_clouds() {
    let dir = tempfile::tempdir().unwrap();
    let real = Mat::from_fn(8, 3, |i, j| ((i * 3 + j) as f64).sin());
    let syn = Mat::from_fn(8, 3, |i, j| ((i * 3 + j) as f64).sin() + 0.2);
    write_tensor(&dir.path().join("real.tnsr"), &TensorFile::from_mat(&real));
    write_tensor(&dir.path().join("syn.tnsr"), &TensorFile::from_mat(&syn));
    let out = capalign(
        dir.path(),
        &["diagnose", "--real", "real.tnsr", "--synthetic", "syn.tnsr"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_schema("diagnose", &v);
    assert_eq!(v["label_a"], "real");
    assert_eq!(v["label_b"], "synthetic");
    // A pure shift keeps the clouds' shapes: centroid distance is the shift length.
    let shift = (3.0f64 * 0.04).sqrt();
    assert!((v["centroid_distance"].as_f64().unwrap() - shift).abs() < 1e-9);
}

#[test]
fn pal_eval_scores_paired_descriptors() {
    let dir = tempfile::tempdir().unwrap();
    let real = Mat::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let syn = Mat::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, -1.0, 0.0]);
    write_tensor(&dir.path().join("r.tnsr"), &TensorFile::from_mat(&real));
    write_tensor(&dir.path().join("s.tnsr"), &TensorFile::from_mat(&syn));
    let out = capalign(dir.path(), &["pal-eval", "--real", "r.tnsr", "--synthetic", "s.tnsr"]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    assert_schema("pal-eval", &v);
    assert_eq!(v["per_pair"][0], 0.0);
    assert_eq!(v["per_pair"][1], 2.0);
    assert_eq!(v["mean"], 1.0);
}

#[test]
fn merge_shards_drops_duplicates_and_counts_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("s1.csv"),
        "caption_id,image_id,text_en,text_bn,similarity,valid\n\
         1,10,a cat,biral,0.9,true\n\
         2,20,a dog,kukur,0.3,false\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("s2.jsonl"),
        "{\"caption_id\":1,\"image_id\":10,\"text_en\":\"a cat\",\"text_bn\":\"biral\",\"similarity\":0.9,\"valid\":true}\n\
         {\"caption_id\":3,\"image_id\":30,\"text_en\":\"a bird\",\"text_bn\":\"pakhi\"}\n",
    )
    .unwrap();
    let out = capalign(
        dir.path(),
        &["merge-shards", "--shard", "s1.csv", "--shard", "s2.jsonl", "--out", "merged.csv"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_schema("merge-shards", &v);
    assert_eq!(v["shards"], 2);
    assert_eq!(v["summary"]["total"], 3);
    assert_eq!(v["summary"]["duplicates"], 1);
    assert_eq!(v["summary"]["accepted"], 1);
    assert_eq!(v["summary"]["rejected"], 1);
    assert_eq!(v["summary"]["unverified"], 1);
}

#[test]
fn build_prompts_writes_one_sidecar_per_record() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("recs.csv"),
        "caption_id,image_id,text_en,text_bn,similarity,valid\n\
         7,70,a tall tree,lomba gach,,\n\
         8,80,two red birds,duti lal pakhi,,\n",
    )
    .unwrap();
    let out = capalign(
        dir.path(),
        &["build-prompts", "--records", "recs.csv", "--out-dir", "prompts",
          "--model-version", "generator=v2.1", "--seed", "11"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_schema("build-prompts", &v);
    assert_eq!(v["written"], 2);
    assert_eq!(v["seed"], 11);
    let sidecar: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("prompts/7.json")).unwrap())
            .unwrap();
    assert_eq!(sidecar["prompt"], "A photo of: a tall tree. In Bengali: lomba gach");
    assert_eq!(sidecar["seed"], 11);
    assert_eq!(sidecar["model_versions"]["generator"], "v2.1");
    assert_eq!(sidecar["sha256_of_prompt"].as_str().unwrap().len(), 64);
}

#[test]
fn grad_check_passes_at_small_point_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = capalign(dir.path(), &["grad-check", "--points", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_schema("grad-check", &v);
    assert_eq!(v["pass"], true);
    for name in ["pal", "infonce", "masked_ce", "transport"] {
        assert_eq!(v["checks"][name]["pass"], true, "{name}");
    }
}

#[test]
fn usage_errors_exit_two_with_error_json() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["sinkhorn", "--cost", "c.tnsr", "--a", "a.tnsr", "--b", "b.tnsr", "--bogus"][..],
        &["no-such-command"][..],
        &["sinkhorn"][..],
    ] {
        let out = capalign(dir.path(), args);
        assert_eq!(code(&out), 2, "args {args:?}");
        let v = stdout_json(&out);
        assert_schema("error", &v);
        assert_eq!(v["error"]["kind"], "usage", "args {args:?}");
    }
}

#[test]
fn runtime_errors_exit_one_with_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = capalign(
        dir.path(),
        &["verify-pairs", "--records", "missing.csv", "--embeddings", "missing.tnsr"],
    );
    assert_eq!(code(&out), 1);
    let v = stdout_json(&out);
    assert_schema("error", &v);
    assert_eq!(v["error"]["kind"], "runtime");
    assert!(v["error"]["message"].as_str().unwrap().contains("missing.csv"));
}

#[test]
fn config_file_fills_flags_and_explicit_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    ot_fixture(dir.path());
    std::fs::write(dir.path().join("run.json"), r#"{"eps": 0.5, "iters": 10}"#).unwrap();
    let base = ["sinkhorn", "--cost", "c.tnsr", "--a", "a.tnsr", "--b", "b.tnsr"];

    let mut args = base.to_vec();
    args.extend(["--config", "run.json"]);
    let out = capalign(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["eps"], 0.5);
    assert_eq!(v["iters"], 10);

    let mut args = base.to_vec();
    args.extend(["--config", "run.json", "--eps", "0.05"]);
    let v = stdout_json(&capalign(dir.path(), &args));
    assert_eq!(v["eps"], 0.05, "explicit flag beats config");
    assert_eq!(v["iters"], 10, "config still fills the rest");
}

#[test]
fn config_keys_outside_the_subcommand_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    ot_fixture(dir.path());
    std::fs::write(dir.path().join("bad.json"), r#"{"epz": 0.5}"#).unwrap();
    let out = capalign(
        dir.path(),
        &["sinkhorn", "--cost", "c.tnsr", "--a", "a.tnsr", "--b", "b.tnsr", "--config", "bad.json"],
    );
    assert_eq!(code(&out), 2);
    let v = stdout_json(&out);
    assert_eq!(v["error"]["kind"], "usage");
    assert!(v["error"]["message"].as_str().unwrap().contains("epz"));
}

#[test]
fn config_can_set_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("seeded.json"), r#"{"seed": 9}"#).unwrap();
    let direct = capalign(dir.path(), &["train-toy", "--epochs", "1", "--batches", "1", "--seed", "9"]);
    let via_cfg = capalign(
        dir.path(),
        &["train-toy", "--epochs", "1", "--batches", "1", "--config", "seeded.json"],
    );
    assert_eq!(code(&direct), 0);
    assert_eq!(direct.stdout, via_cfg.stdout);
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = capalign(dir.path(), &["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    let out = capalign(dir.path(), &["--version"]);
    assert_eq!(code(&out), 0);
    let out = capalign(dir.path(), &["sinkhorn", "--help"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn logs_go_to_stderr_not_stdout() {
    let dir = tempfile::tempdir().unwrap();
    ot_fixture(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_capalign"))
        .current_dir(dir.path())
        .env("RUST_LOG", "info")
        .args(["sinkhorn", "--cost", "c.tnsr", "--a", "a.tnsr", "--b", "b.tnsr"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    stdout_json(&out); // whole stream parses: no log lines interleaved
    assert!(String::from_utf8_lossy(&out.stderr).contains("solved"));
}
