//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs in roughly a quarter of an hour on one core. The language-model runs
//! share one pretrained desk model.

use std::path::Path;
use std::time::Instant;

use maskprune::analysis::count_patterns;
use maskprune::autodiff::{grad_check_multi, GradCheckOptions, Tensor};
use maskprune::baselines::{baseline_masks, collect_activation_norms, BaselineMethod, Grouping};
use maskprune::checkpoint::save_model;
use maskprune::cli::main_with_args;
use maskprune::mask::{finalize_mask, BinaryMask, GumbelNoise, MaskLogits};
use maskprune::model::{pretrain_dense, CalibrationStream, Corpus, EvalStream, MaskMode, ModelConfig, PretrainConfig, TinyCausalLM};
use maskprune::sparse::{SparseCheckpoint, SparseLayer};
use maskprune::trainer::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/corpus.txt");

/// Mask-learning settings for the language-model criteria: the desk profile
/// with a lighter batch, 500 steps, and init strength 0.5. At the default
/// strength of 3 the sigmoid starts saturated and the learned mask never
/// leaves its Wanda initialization.
fn lm_config(target_sparsity: f64) -> TrainConfig {
    TrainConfig {
        steps: 500,
        batch_size: 4,
        seq_len: 64,
        strength: 0.5,
        target_sparsity,
        ..TrainConfig::desk()
    }
}

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn record(&mut self, id: usize, pass: bool, what: &str, detail: String) {
        let line = format!("{} criterion {id}: {what} ({detail})", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((pass, line));
    }
}

struct Lm {
    model: TinyCausalLM<f32>,
    train: Vec<usize>,
    eval: EvalStream,
}

fn setup_lm() -> Lm {
    let corpus = Corpus::load(CORPUS).unwrap();
    let (train, held) = corpus.split(0.1).unwrap();
    let mut model = TinyCausalLM::<f32>::new(ModelConfig::desk(), 0).unwrap();
    let t = Instant::now();
    let stream = CalibrationStream::new(train.clone(), 16, 64, 1).unwrap();
    pretrain_dense(&mut model, &stream, &PretrainConfig { steps: 700, lr: 3e-3, warmup: 100 }).unwrap();
    let eval = EvalStream::new(held, 8, 64).unwrap();
    let ppl = model.perplexity(&MaskMode::Dense, &eval).unwrap();
    println!("# desk model pretrained in {:.0?}: dense held-out perplexity {ppl:.4}", t.elapsed());
    Lm { model, train, eval }
}

// ---------------------------------------------------------------------------

fn gradient_check(r: &mut Report, lm: &Lm) {
    let t = Instant::now();
    let model = lm.model.cast::<f64>();
    let stream = CalibrationStream::new(lm.train.clone(), 1, 32, 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        seq_len: 32,
        ..TrainConfig::desk()
    };
    let task = LmTask { model: &model, stream: &stream };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // logits small enough that the masks are not saturated
    let logits: Vec<MaskLogits<f64>> = model
        .maskable_layers()
        .iter()
        .map(|l| {
            let w = model.layer_weights(l).clone();
            let p = Tensor::from_fn(w.shape().to_vec(), |_| rng.gen_range(-0.05..0.05));
            MaskLogits::new(l.layer_id, l.name.clone(), p, w).unwrap()
        })
        .collect();
    let points: Vec<Tensor<f64>> = logits.iter().map(|l| l.logits().clone()).collect();
    let coords: Vec<(usize, usize)> = (0..200)
        .map(|_| {
            let i = rng.gen_range(0..points.len());
            (i, rng.gen_range(0..points[i].numel()))
        })
        .collect();
    let batch = task.batch(0);
    let report = grad_check_multi(
        |g, vars| Ok(objective_graph(g, &task, &logits, vars, &batch, &cfg, 0)?.objective.total),
        &points,
        &coords,
        GradCheckOptions {
            step: 1e-4,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            richardson: true,
        },
    );
    let elapsed = t.elapsed().as_secs_f64();
    r.record(
        1,
        report.passed && report.checked == 200 && elapsed < 120.0,
        "objective gradient vs central differences, desk model, f64",
        format!("{} coords, max rel err {:.2e} <= 1e-4, {elapsed:.1}s < 120s", report.checked, report.max_rel_error),
    );
}

fn threshold_law(r: &mut Report) {
    let t = Instant::now();
    let draws = 100_000;
    let mut worst: f64 = 0.0;
    let mut all = true;
    for (k, &(alpha, tau)) in [(25.0, 4.0), (187.5, 0.45), (350.0, 0.05)].iter().enumerate() {
        for (j, &ap) in [-1.5f64, 0.0, 1.0].iter().enumerate() {
            let p = ap / alpha;
            let ml = MaskLogits::new(0, "probe", Tensor::full([1, draws], p), Tensor::full([1, draws], 1.0)).unwrap();
            let noise = GumbelNoise::for_step(&[1, draws], 99, k, j);
            let m = ml.soft_mask(alpha, tau, Some(&noise)).unwrap();
            let emp = m.data().iter().filter(|&&x| x > 0.5).count() as f64 / draws as f64;
            let law = 1.0 - (-(alpha * p).exp()).exp();
            let z = (emp - law).abs() / (law * (1.0 - law) / draws as f64).sqrt();
            worst = worst.max(z);
            all &= z <= 3.0;
        }
    }
    let elapsed = t.elapsed().as_secs_f64();
    r.record(
        2,
        all && elapsed < 30.0,
        "P(M > 0.5) = 1 - exp(-exp(alpha P)) for 9 (P, alpha, tau) triples",
        format!("worst deviation {worst:.2} sd <= 3, {elapsed:.1}s < 30s"),
    );
}

struct LmRun {
    row: AblationRow,
    outcome: TrainOutcome<f32>,
    finite: bool,
    hash_ok: bool,
}

fn lm_run(lm: &Lm, variant: AblationVariant, base: &TrainConfig) -> LmRun {
    let t = Instant::now();
    let stream = CalibrationStream::new(lm.train.clone(), base.batch_size, base.seq_len, base.seed).unwrap();
    let before = lm.model.weights_hash();
    let (row, outcome) = run_variant(variant, base, &lm.model, &stream, &lm.eval).unwrap();
    let hash_ok = lm.model.weights_hash() == before;
    let finite = row.perplexity.is_finite() && outcome.log.records.iter().all(|r| r.total.is_finite());
    println!(
        "# {} at density {}: perplexity {:.4}, soft density {:.5}, binary density {:.6}, {:.0?}",
        row.variant,
        base.density(),
        row.perplexity,
        row.soft_density,
        row.binary_density,
        t.elapsed()
    );
    LmRun { row, outcome, finite, hash_ok }
}

fn density_and_baselines(r: &mut Report, lm: &Lm, runs: &[(f64, &LmRun)]) {
    let n = lm.model.maskable_param_count();
    let mut d_ok = true;
    let mut d_detail = Vec::new();
    let mut b_ok = true;
    let mut b_detail = Vec::new();
    for &(rho, run) in runs {
        let cfg = lm_config(1.0 - rho);
        let masks = finalize_mask(&run.outcome.logits, rho).unwrap();
        let kept: usize = masks.iter().map(BinaryMask::kept).sum();
        let want = (rho * n as f64).round() as usize;
        let ok = (run.row.soft_density - rho).abs() <= 0.01 && kept == want;
        d_ok &= ok;
        d_detail.push(format!("rho {rho}: soft {:.5}, kept {kept}/{n} (want {want})", run.row.soft_density));

        // baselines use the same calibration batches as mask training
        let stream = CalibrationStream::new(lm.train.clone(), cfg.batch_size, cfg.seq_len, cfg.seed).unwrap();
        let norms = collect_activation_norms(&lm.model, &stream, cfg.norm_batches).unwrap();
        let wanda = baseline_masks(&lm.model, BaselineMethod::Wanda, Some(&norms), rho, Grouping::PerRow).unwrap();
        let magnitude = baseline_masks(&lm.model, BaselineMethod::Magnitude, None, rho, Grouping::PerRow).unwrap();
        let base_kept: usize = wanda.iter().map(BinaryMask::kept).sum();
        assert_eq!(base_kept, magnitude.iter().map(BinaryMask::kept).sum::<usize>());
        // per-row rounding can leave the baselines a few weights short of
        // round(rho N); compare at their exact count
        let matched = finalize_mask(&run.outcome.logits, base_kept as f64 / n as f64).unwrap();
        assert_eq!(matched.iter().map(BinaryMask::kept).sum::<usize>(), base_kept);
        let ppl = |m: &[BinaryMask]| lm.model.perplexity(&MaskMode::Binary(m), &lm.eval).unwrap();
        let (pl, pw, pm) = (ppl(&matched), ppl(&wanda), ppl(&magnitude));
        b_ok &= pl <= pw && pl <= pm;
        b_detail.push(format!("rho {rho} at {base_kept} kept: learned {pl:.4}, wanda {pw:.4}, magnitude {pm:.4}"));
    }
    r.record(3, d_ok, "terminal noise-free soft density within 0.01, exact binary budget", d_detail.join("; "));
    r.record(5, b_ok, "learned mask perplexity <= wanda and magnitude", b_detail.join("; "));
}

fn toy_losses(task: &LinearTask<f64>, bits: &[bool]) -> f64 {
    let w = Tensor::new(
        task.w.shape().to_vec(),
        task.w.data().iter().zip(bits).map(|(&w, &b)| if b { w } else { 0.0 }).collect(),
    )
    .unwrap();
    task.loss_with(&w)
}

/// Loss of every 12-of-24 mask, sorted, by direct enumeration.
fn brute_force(task: &LinearTask<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(2_704_156);
    let mut m: u32 = (1 << 12) - 1;
    while m < 1 << 24 {
        let bits: Vec<bool> = (0..24).map(|i| m >> i & 1 == 1).collect();
        out.push(toy_losses(task, &bits));
        let c = m & m.wrapping_neg();
        let r = m + c;
        m = (((r ^ m) >> 2) / c) | r;
    }
    out.sort_by(f64::total_cmp);
    out
}

fn toy_config() -> TrainConfig {
    // a 24-weight layer needs a much larger density weight than the
    // language model, and a nearly flat start to explore
    TrainConfig {
        strength: 0.05,
        lambda1: 50.0,
        ..TrainConfig::default()
    }
}

fn toy_learned(task: &LinearTask<f64>) -> Vec<bool> {
    let cfg = toy_config();
    let norms = task.activation_norms();
    let init = initialize_logits(task, &cfg, Some(&norms)).unwrap();
    let out = train_masks(task, &cfg, init).unwrap();
    finalize_mask(&out.logits, 0.5).unwrap().remove(0).bits
}

fn oracle_optimality(r: &mut Report) {
    let t = Instant::now();
    // The instance is the first data seed on which the one-shot Wanda mask
    // is not already optimal, so the criterion is not met by the warm start.
    let mut sweep = Vec::new();
    let mut chosen = None;
    for seed in 1..=8u64 {
        let task = LinearTask::<f64>::synthetic(4, 6, 64, seed);
        let losses = brute_force(&task);
        let norms = task.activation_norms().norms(0).unwrap();
        let wanda = maskprune::baselines::wanda_mask(&task.w, &norms, 0.5, Grouping::PerRow).unwrap();
        let wanda_ratio = toy_losses(&task, &wanda.bits) / losses[0];
        let learned = toy_losses(&task, &toy_learned(&task));
        sweep.push(format!("{:.3}", learned / losses[0]));
        if chosen.is_none() && wanda_ratio > 1.0 + 1e-12 {
            chosen = Some((seed, losses, learned, wanda_ratio));
        }
    }
    println!("# toy sweep, learned/optimal loss for data seeds 1..8: {}", sweep.join(" "));
    let (seed, losses, learned, wanda_ratio) = chosen.expect("some seed where wanda is suboptimal");
    let (best, median) = (losses[0], losses[losses.len() / 2]);
    r.record(
        4,
        learned <= 1.05 * best && learned < median && losses.len() == 2_704_156,
        "4x6 layer, learned mask vs all C(24,12) masks",
        format!(
            "data seed {seed}: learned {learned:.5}, optimum {best:.5} (ratio {:.4} <= 1.05), median {median:.5}, wanda ratio {wanda_ratio:.4}, {:.0?}",
            learned / best,
            t.elapsed()
        ),
    );
}

fn ablation(r: &mut Report, full: &LmRun, l2zero: &LmRun, fa: &LmRun, ft: &LmRun) {
    let alpha_fixed = fa.outcome.log.records.iter().all(|x| x.alpha == 25.0);
    let tau_fixed = ft.outcome.log.records.iter().all(|x| x.tau == 4.0);
    let pass = l2zero.row.perplexity >= full.row.perplexity && fa.finite && ft.finite && alpha_fixed && tau_fixed;
    r.record(
        6,
        pass,
        "lambda2 = 0 no better than full; fixed alpha / fixed tau complete",
        format!(
            "full {:.4}, lambda2_zero {:.4}, fixed_alpha {:.4} (finite {}), fixed_tau {:.4} (finite {})",
            full.row.perplexity, l2zero.row.perplexity, fa.row.perplexity, fa.finite, ft.row.perplexity, ft.finite
        ),
    );
}

fn combinatorics(r: &mut Report) {
    let six = count_patterns(4, 2).unwrap().exact == "6";
    // Pascal's triangle in u128 as the independent oracle
    let mut row: Vec<u128> = vec![1];
    let mut pascal_ok = true;
    for n in 0..=64u64 {
        for k in 0..=n {
            pascal_ok &= count_patterns(n, k).unwrap().exact == row[k as usize].to_string();
        }
        let mut next = vec![1u128; row.len() + 1];
        for k in 1..row.len() {
            next[k] = row[k - 1] + row[k];
        }
        row = next;
    }
    let big = count_patterns(1024, 512).unwrap();
    let dev = (big.exact_log2 / 1024.0 - 1.0).abs();
    let huge = count_patterns(4096, 2048).unwrap();
    r.record(
        8,
        six && pascal_ok && dev <= 0.01,
        "pattern counts",
        format!(
            "C(4,2)=6 {six}, Pascal n<=64 {pascal_ok}, |log2 C(1024,512)/1024 - 1| = {dev:.5}; C(4096,2048) has {} digits (~10^{:.2})",
            huge.decimal_digits,
            huge.exact_log2 * std::f64::consts::LOG10_2
        ),
    );
}

fn export_round_trip(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ok = 0;
    for trial in 0..100 {
        let (rows, cols) = (rng.gen_range(1..64), rng.gen_range(1..64));
        let p: f64 = rng.gen();
        let bits: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(p)).collect();
        let w = Tensor::from_fn([rows, cols], |_| f32::from_bits(rng.gen::<u32>() & 0xbfff_ffff));
        let mask = BinaryMask::new(trial, format!("t{trial}"), rows, cols, bits.clone()).unwrap();
        let ck = SparseCheckpoint {
            layers: vec![SparseLayer::from_mask(&mask, &w).unwrap()],
        };
        let back = SparseCheckpoint::decode(&ck.encode(), Path::new("mem")).unwrap();
        let l = &back.layers[0];
        let kept: Vec<u32> = w.data().iter().zip(&bits).filter(|(_, &b)| b).map(|(v, _)| v.to_bits()).collect();
        if l.bits() == bits && l.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>() == kept {
            ok += 1;
        }
    }
    // golden file: one 2x5 layer "ab" keeping entries 0, 2 and 9
    let mask = BinaryMask::new(0, "ab", 2, 5, (0..10).map(|i| [0, 2, 9].contains(&i)).collect()).unwrap();
    let w = Tensor::from_fn([2, 5], |i| i as f32 * 0.5);
    let ck = SparseCheckpoint {
        layers: vec![SparseLayer::from_mask(&mask, &w).unwrap()],
    };
    let golden: Vec<u8> = [
        &b"LEAPSPRS"[..],
        &[1, 0, 0, 0],
        &[1, 0, 0, 0],
        &[2, 0, 0, 0],
        b"ab",
        &[2, 0, 0, 0],
        &[5, 0, 0, 0],
        &[0b0000_0101, 0b0000_0010],
        &[3, 0, 0, 0, 0, 0, 0, 0],
        &0.0f32.to_le_bytes(),
        &1.0f32.to_le_bytes(),
        &4.5f32.to_le_bytes(),
    ]
    .concat();
    let golden_ok = ck.encode() == golden;
    r.record(
        9,
        ok == 100 && golden_ok,
        "sparse export round trip and byte layout",
        format!("{ok}/100 randomized layers identical, golden bytes match {golden_ok}"),
    );
}

fn cli_determinism(r: &mut Report, lm: &Lm) -> bool {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("desk.bin");
    save_model(&lm.model, &ckpt).unwrap();
    let before = lm.model.weights_hash();
    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let args = [
            "maskprune", "prune", "--model", ckpt.to_str().unwrap(), "--corpus", CORPUS, "--out-dir", out.to_str().unwrap(),
            "--steps", "50", "--batch-size", "4", "--seq-len", "64", "--strength", "0.5", "--seed", "3",
        ];
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = main_with_args(args, &mut o, &mut e);
        assert_eq!(code, 0, "{}", String::from_utf8_lossy(&e));
        logs.push(std::fs::read(out.join("train_log.csv")).unwrap());
    }
    let same = logs[0] == logs[1];
    r.record(
        10,
        same && !logs[0].is_empty(),
        "two identical prune runs write byte-identical logs",
        format!("{} bytes each, identical {same}", logs[0].len()),
    );
    lm.model.weights_hash() == before
}

fn main() {
    let mut r = Report { lines: Vec::new() };
    let start = Instant::now();
    threshold_law(&mut r);
    combinatorics(&mut r);
    export_round_trip(&mut r);
    oracle_optimality(&mut r);

    let lm = setup_lm();
    gradient_check(&mut r, &lm);
    let full = lm_run(&lm, AblationVariant::Full, &lm_config(0.5));
    let full40 = lm_run(&lm, AblationVariant::Full, &lm_config(0.6));
    density_and_baselines(&mut r, &lm, &[(0.5, &full), (0.4, &full40)]);
    let l2 = lm_run(&lm, AblationVariant::Lambda2Zero, &lm_config(0.5));
    let fa = lm_run(&lm, AblationVariant::FixedAlpha, &lm_config(0.5));
    let ft = lm_run(&lm, AblationVariant::FixedTau, &lm_config(0.5));
    ablation(&mut r, &full, &l2, &fa, &ft);
    let cli_hash_ok = cli_determinism(&mut r, &lm);
    let runs = [&full, &full40, &l2, &fa, &ft];
    let hashes = runs.iter().filter(|x| x.hash_ok).count();
    r.record(
        7,
        hashes == runs.len() && cli_hash_ok,
        "frozen weights: SHA-256 of all non-logit parameters unchanged by every prune run",
        format!("{hashes}/{} library runs, CLI runs {cli_hash_ok}", runs.len()),
    );

    r.lines.sort_by_key(|(_, l)| l.split(':').next().and_then(|h| h.rsplit(' ').next()).and_then(|n| n.parse::<u32>().ok()));
    println!("\nsummary ({:.0?}):", start.elapsed());
    for (_, l) in &r.lines {
        println!("{l}");
    }
    let failed = r.lines.iter().filter(|(p, _)| !p).count();
    println!("{} passed, {failed} failed", r.lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
