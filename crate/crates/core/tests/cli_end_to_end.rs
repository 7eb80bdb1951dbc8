use std::path::{Path, PathBuf};

use maskprune::cli::main_with_args;
use maskprune::sparse::SparseCheckpoint;

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/corpus.txt");

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let code = main_with_args(std::iter::once("maskprune").chain(args.iter().copied()), &mut o, &mut e);
    (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = run(args);
    assert_eq!(code, 0, "{args:?} failed: {err}");
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small dense checkpoint shared by the tests of this file.
fn pretrained(dir: &Path) -> PathBuf {
    let path = dir.join("dense.bin");
    ok(&[
        "pretrain", "--corpus", CORPUS, "--out", s(&path), "--steps", "20", "--batch-size", "4", "--seq-len", "32",
        "--embed-dim", "16", "--n-blocks", "2", "--n-heads", "2", "--context-len", "32", "--mlp-ratio", "2",
    ]);
    path
}

const CALIB: [&str; 6] = ["--batch-size", "2", "--seq-len", "32", "--norm-batches", "2"];

fn eval_binary(model: &Path, masks: &Path) -> String {
    ok(&["eval", "--model", s(model), "--corpus", CORPUS, "--masks", s(masks), "--seq-len", "32"])
}

#[test]
fn zero_step_prune_equals_wanda_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let model = pretrained(dir.path());
    let pruned = dir.path().join("p0");
    let mut args = vec!["prune", "--model", s(&model), "--corpus", CORPUS, "--out-dir", s(&pruned), "--init", "wanda", "--steps", "0"];
    args.extend(CALIB);
    ok(&args);
    let wanda = dir.path().join("wanda.bin");
    let mut args = vec!["baseline", "--model", s(&model), "--corpus", CORPUS, "--method", "wanda", "--out", s(&wanda)];
    args.extend(CALIB);
    ok(&args);

    let a = eval_binary(&model, &pruned.join("masks.bin"));
    let b = eval_binary(&model, &wanda);
    assert_eq!(a, b);
    assert_eq!(std::fs::read(pruned.join("masks.bin")).unwrap(), std::fs::read(&wanda).unwrap());
    let log = std::fs::read_to_string(pruned.join("train_log.csv")).unwrap();
    assert_eq!(log.trim(), "step,lm_loss,sparsity_loss,weight_loss,total,soft_density,alpha,tau");
}

#[test]
fn fixed_tau_ablation_logs_constant_temperature() {
    let dir = tempfile::tempdir().unwrap();
    let model = pretrained(dir.path());
    let out = dir.path().join("abl");
    let mut args = vec!["ablate", "--model", s(&model), "--corpus", CORPUS, "--out-dir", s(&out), "--variant", "fixed_tau", "--steps", "6"];
    args.extend(CALIB);
    let stdout = ok(&args);
    assert!(stdout.starts_with("fixed_tau: perplexity"), "{stdout}");
    let mut rdr = csv::Reader::from_path(out.join("fixed_tau").join("train_log.csv")).unwrap();
    let tau_col = rdr.headers().unwrap().iter().position(|h| h == "tau").unwrap();
    let taus: Vec<f64> = rdr.records().map(|r| r.unwrap()[tau_col].parse().unwrap()).collect();
    assert_eq!(taus, vec![4.0; 6]);
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(table.starts_with("variant,perplexity,binary_density,soft_density,final_lm_loss\nfixed_tau,"), "{table}");
}

#[test]
fn repeated_prune_runs_write_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let model = pretrained(dir.path());
    let logs: Vec<Vec<u8>> = ["r1", "r2"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let mut args = vec!["prune", "--model", s(&model), "--corpus", CORPUS, "--out-dir", s(&out), "--steps", "8", "--seed", "4"];
            args.extend(CALIB);
            ok(&args);
            std::fs::read(out.join("train_log.csv")).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
    assert_eq!(String::from_utf8_lossy(&logs[0]).lines().count(), 9);
}

#[test]
fn export_alloc_and_config_files() {
    let dir = tempfile::tempdir().unwrap();
    let model = pretrained(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"steps": 3, "target_sparsity": 0.6, "batch_size": 2, "seq_len": 32, "norm_batches": 2}"#).unwrap();
    let out = dir.path().join("p");
    ok(&["prune", "--model", s(&model), "--corpus", CORPUS, "--out-dir", s(&out), "--config", s(&cfg), "--steps", "4"]);
    let written: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(written["steps"], 4);
    assert_eq!(written["target_sparsity"], 0.6);
    assert_eq!(written["lambda1"], 3.0);

    let masks = out.join("masks.bin");
    let alloc = ok(&["alloc", "--model", s(&model), "--masks", s(&masks)]);
    let global = alloc.lines().last().unwrap();
    let fields: Vec<&str> = global.split(',').collect();
    let (kept, total): (usize, usize) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
    assert_eq!(fields[0], "global");
    assert_eq!(kept, (0.4 * total as f64).round() as usize);
    assert_eq!(alloc.lines().count(), 1 + 2 + 1);

    let sparse = dir.path().join("m.sparse");
    let msg = ok(&["export", "--model", s(&model), "--masks", s(&masks), "--out", s(&sparse)]);
    assert_eq!(msg.trim(), format!("kept {kept} of {total} weights"));
    let ck = SparseCheckpoint::read(&sparse).unwrap();
    assert_eq!((ck.kept(), ck.total()), (kept, total));
    assert_eq!(ck.layers.len(), 12);

    let nf = ok(&["eval", "--model", s(&model), "--corpus", CORPUS, "--mode", "noise-free", "--logits", s(&out.join("logits.bin")), "--seq-len", "32"]);
    assert!(nf.trim().parse::<f64>().unwrap().is_finite());
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let model = pretrained(dir.path());
    let (code, _, err) = run(&["eval", "--model", s(&model), "--corpus", CORPUS, "--seq-len", "32"]);
    assert_eq!(code, 1);
    assert!(err.contains("--masks"), "{err}");
    let (code, _, err) = run(&["eval", "--model", "/nonexistent/x.bin", "--corpus", CORPUS]);
    assert_eq!(code, 1);
    assert!(err.contains("/nonexistent/x.bin"), "{err}");
    let (code, _, err) = run(&["prune", "--model", s(&model), "--corpus", CORPUS, "--out-dir", "x", "--sparsity", "1.5"]);
    assert_eq!(code, 1);
    assert!(err.contains("target_sparsity"), "{err}");
    let (code, _, err) = run(&["ablate", "--model", s(&model), "--corpus", CORPUS, "--out-dir", "x", "--variant", "nope"]);
    assert_eq!(code, 1);
    assert!(err.contains("nope"), "{err}");
    let (code, _, _) = run(&["prune", "--lambda3", "1"]);
    assert_eq!(code, 2);
}
