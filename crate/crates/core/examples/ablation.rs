//! Runs the five ablation variants on a small pretrained model and prints
//! the comparison table as CSV.
//!
//! cargo run --release --example ablation

use maskprune::model::{pretrain_dense, CalibrationStream, Corpus, EvalStream, ModelConfig, PretrainConfig, TinyCausalLM};
use maskprune::trainer::{ablation_csv, run_ablation, AblationVariant, TrainConfig};

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

    let base = TrainConfig {
        steps: 300,
        batch_size: 4,
        seq_len: 64,
        strength: 0.5,
        ..TrainConfig::desk()
    };
    let stream = CalibrationStream::new(train, base.batch_size, base.seq_len, base.seed)?;
    let eval = EvalStream::new(held, 8, 64)?;
    let rows = run_ablation(&AblationVariant::ALL, &base, &model, &stream, &eval)?;
    print!("{}", String::from_utf8_lossy(&ablation_csv(&rows)?));
    Ok(())
}
