//! Compares the reverse-mode gradient of the full pruning objective with
//! central differences, on a small language model in f64.
//!
//! cargo run --release --example grad_check

use maskprune::autodiff::{grad_check_multi, GradCheckOptions, Tensor};
use maskprune::mask::MaskLogits;
use maskprune::model::{CalibrationStream, Corpus, ModelConfig, TinyCausalLM};
use maskprune::trainer::{objective_graph, LmTask, MaskTask, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> maskprune::Result<()> {
    let corpus = Corpus::load(concat!(env!("CARGO_MANIFEST_DIR"), "/data/corpus.txt"))?;
    let (train, _) = corpus.split(0.1)?;
    let config = ModelConfig {
        embed_dim: 32,
        n_blocks: 2,
        n_heads: 2,
        context_len: 32,
        ..ModelConfig::desk()
    };
    let model = TinyCausalLM::<f64>::new(config, 3)?;
    let stream = CalibrationStream::new(train, 2, 16, 0)?;
    let cfg = TrainConfig {
        batch_size: 2,
        seq_len: 16,
        ..TrainConfig::desk()
    };
    let task = LmTask { model: &model, stream: &stream };

    // small logits keep the masks away from saturation
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits: Vec<MaskLogits<f64>> = model
        .maskable_layers()
        .iter()
        .map(|l| {
            let w = model.layer_weights(l).clone();
            let p = Tensor::from_fn(w.shape().to_vec(), |_| rng.gen_range(-0.05..0.05));
            MaskLogits::new(l.layer_id, l.name.clone(), p, w)
        })
        .collect::<maskprune::Result<_>>()?;
    let points: Vec<Tensor<f64>> = logits.iter().map(|l| l.logits().clone()).collect();
    let coords: Vec<(usize, usize)> = (0..60)
        .map(|_| {
            let i = rng.gen_range(0..points.len());
            (i, rng.gen_range(0..points[i].numel()))
        })
        .collect();

    for step in [0, 1000, 1999] {
        let (a, t) = cfg.alpha_tau(step)?;
        let batch = task.batch(step);
        // the sigmoid sharpens like α/τ; keep the step about 0.1 wide in z
        let h = (0.1 * t / a).min(1e-4);
        let report = grad_check_multi(
            |g, vars| Ok(objective_graph(g, &task, &logits, vars, &batch, &cfg, step)?.objective.total),
            &points,
            &coords,
            GradCheckOptions {
                step: h,
                tolerance: 1e-4,
                // below ~1e-6 central differences are dominated by roundoff
                abs_floor: 1e-6,
                richardson: true,
            },
        );
        println!(
            "step {step:>4} (alpha {a:.1}, tau {t:.3}): {} coordinates, max rel error {:.2e}, passed {}",
            report.checked, report.max_rel_error, report.passed
        );
    }
    Ok(())
}
