//! Where does a global budget go? Learns masks under one global density and
//! reports the per-block split next to the uniform Wanda split.
//!
//! cargo run --release --example allocation

use maskprune::analysis::allocation_report;
use maskprune::baselines::{baseline_masks, collect_activation_norms, BaselineMethod, Grouping};
use maskprune::mask::finalize_mask;
use maskprune::model::{pretrain_dense, CalibrationStream, Corpus, ModelConfig, PretrainConfig, TinyCausalLM};
use maskprune::trainer::{initialize_lm_logits, train_masks, LmTask, TrainConfig};

fn main() -> maskprune::Result<()> {
    let corpus = Corpus::load(concat!(env!("CARGO_MANIFEST_DIR"), "/data/corpus.txt"))?;
    let (train, _) = corpus.split(0.1)?;
    let config = ModelConfig {
        embed_dim: 64,
        n_blocks: 3,
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

    let cfg = TrainConfig {
        steps: 300,
        batch_size: 4,
        seq_len: 64,
        strength: 0.5,
        target_sparsity: 0.6,
        ..TrainConfig::desk()
    };
    let stream = CalibrationStream::new(train, cfg.batch_size, cfg.seq_len, cfg.seed)?;
    let init = initialize_lm_logits(&model, &stream, &cfg)?;
    let out = train_masks(&LmTask { model: &model, stream: &stream }, &cfg, init)?;
    for s in &out.log.snapshots {
        let blocks: Vec<String> = s.per_block.iter().map(|d| format!("{d:.3}")).collect();
        println!("step {:>4}  global {:.3}  blocks [{}]  saturated {:.3}", s.step, s.global, blocks.join(", "), s.saturated);
    }

    let block: Vec<usize> = model.maskable_layers().iter().map(|l| l.block).collect();
    let learned = finalize_mask(&out.logits, cfg.density())?;
    let norms = collect_activation_norms(&model, &stream, cfg.norm_batches)?;
    let wanda = baseline_masks(&model, BaselineMethod::Wanda, Some(&norms), cfg.density(), Grouping::PerRow)?;
    for (name, masks) in [("learned", learned), ("wanda", wanda)] {
        let rep = allocation_report(&masks, |m| block[m.layer_id]);
        println!("\n{name}: min {:.4} max {:.4} std {:.4}", rep.min, rep.max, rep.std);
        print!("{}", String::from_utf8_lossy(&rep.to_csv()?));
    }
    Ok(())
}
