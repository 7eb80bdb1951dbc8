//! End-to-end mask learning on a small language model: pretrain, warm-start
//! from Wanda, train the logits, finalize and compare against one-shot masks.
//!
//! cargo run --release --example prune_lm

use maskprune::baselines::{baseline_masks, collect_activation_norms, BaselineMethod, Grouping};
use maskprune::mask::finalize_mask;
use maskprune::model::{pretrain_dense, CalibrationStream, Corpus, EvalStream, MaskMode, ModelConfig, PretrainConfig, TinyCausalLM};
use maskprune::trainer::{initialize_lm_logits, train_masks, LmTask, TrainConfig};

fn main() -> maskprune::Result<()> {
    let corpus = Corpus::load(concat!(env!("CARGO_MANIFEST_DIR"), "/data/corpus.txt"))?;
    let (train, held) = corpus.split(0.1)?;
    let config = ModelConfig {
        embed_dim: 64,
        n_blocks: 2,
        n_heads: 2,
        context_len: 64,
        ..ModelConfig::desk()
    };
    let mut model = TinyCausalLM::<f32>::new(config, 0)?;
    pretrain_dense(
        &mut model,
        &CalibrationStream::new(train.clone(), 16, 64, 1)?,
        &PretrainConfig { steps: 300, ..Default::default() },
    )?;
    let eval = EvalStream::new(held, 8, 64)?;

    let cfg = TrainConfig {
        steps: 400,
        batch_size: 4,
        seq_len: 64,
        strength: 0.5,
        ..TrainConfig::desk()
    };
    let stream = CalibrationStream::new(train, cfg.batch_size, cfg.seq_len, cfg.seed)?;
    let before = model.weights_hash();
    let init = initialize_lm_logits(&model, &stream, &cfg)?;
    let out = train_masks(&LmTask { model: &model, stream: &stream }, &cfg, init)?;
    assert_eq!(before, model.weights_hash());
    for r in out.log.records.iter().step_by(50) {
        println!(
            "step {:>4}  lm {:.4}  density {:.4}  alpha {:>6.1}  tau {:.3}",
            r.step, r.lm_loss, r.soft_density, r.alpha, r.tau
        );
    }

    let learned = finalize_mask(&out.logits, cfg.density())?;
    let norms = collect_activation_norms(&model, &stream, cfg.norm_batches)?;
    let wanda = baseline_masks(&model, BaselineMethod::Wanda, Some(&norms), cfg.density(), Grouping::PerRow)?;
    let magnitude = baseline_masks(&model, BaselineMethod::Magnitude, None, cfg.density(), Grouping::PerRow)?;
    println!("dense     {:.3}", model.perplexity(&MaskMode::Dense, &eval)?);
    for (name, masks) in [("learned", &learned), ("wanda", &wanda), ("magnitude", &magnitude)] {
        println!("{name:<9} {:.3}", model.perplexity(&MaskMode::Binary(masks), &eval)?);
    }
    Ok(())
}
