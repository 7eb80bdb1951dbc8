//! Writes a half-density sparse checkpoint, reads it back and rebuilds the
//! dense weights from bitmap and values.
//!
//! cargo run --release --example export

use maskprune::baselines::{baseline_masks, BaselineMethod, Grouping};
use maskprune::model::{ModelConfig, TinyCausalLM};
use maskprune::sparse::{export_sparse, SparseCheckpoint};

fn main() -> maskprune::Result<()> {
    let model = TinyCausalLM::<f32>::new(ModelConfig::desk(), 0)?;
    let masks = baseline_masks(&model, BaselineMethod::Magnitude, None, 0.5, Grouping::PerRow)?;
    let dir = std::env::temp_dir().join("maskprune-export-example");
    std::fs::create_dir_all(&dir).map_err(|e| maskprune::Error::io(&dir, e))?;
    let path = dir.join("model.sparse");
    let written = export_sparse(&model, &masks, &path)?;
    let size = std::fs::metadata(&path).map_err(|e| maskprune::Error::io(&path, e))?.len();
    println!(
        "{}: {} layers, kept {} of {} weights, {size} bytes (dense f32 would be {})",
        path.display(),
        written.layers.len(),
        written.kept(),
        written.total(),
        written.total() * 4
    );

    let back = SparseCheckpoint::read(&path)?;
    for (layer, mask) in back.layers.iter().zip(&masks).take(6) {
        let dense = layer.to_dense();
        let w = model.param(&layer.name).expect("layer present").data();
        let exact = dense
            .iter()
            .zip(w)
            .zip(&mask.bits)
            .all(|((&d, &w), &b)| if b { d.to_bits() == w.to_bits() } else { d == 0.0 });
        println!("{:<16} {}x{} density {:.3} exact {exact}", layer.name, layer.rows, layer.cols, layer.density());
    }
    Ok(())
}
