//! Pretrains a small byte-level model, then prunes it one-shot with
//! magnitude and Wanda scores at several densities.
//!
//! cargo run --release --example baselines

use maskprune::baselines::{baseline_masks, collect_activation_norms, BaselineMethod, Grouping};
use maskprune::model::{pretrain_dense, CalibrationStream, Corpus, EvalStream, MaskMode, ModelConfig, PretrainConfig, TinyCausalLM};

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
    let stream = CalibrationStream::new(train, 16, 64, 1)?;
    pretrain_dense(&mut model, &stream, &PretrainConfig { steps: 300, ..Default::default() })?;
    let eval = EvalStream::new(held, 8, 64)?;
    println!("dense perplexity {:.3}", model.perplexity(&MaskMode::Dense, &eval)?);

    let norms = collect_activation_norms(&model, &stream, 8)?;
    for density in [0.7, 0.5, 0.3] {
        for (name, method) in [("magnitude", BaselineMethod::Magnitude), ("wanda", BaselineMethod::Wanda)] {
            let masks = baseline_masks(&model, method, Some(&norms), density, Grouping::PerRow)?;
            let ppl = model.perplexity(&MaskMode::Binary(&masks), &eval)?;
            println!("density {density:.1} {name:<9} perplexity {ppl:.3}");
        }
    }
    Ok(())
}
