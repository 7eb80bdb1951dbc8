//! Learns a 50% mask for a single 4×6 linear layer and ranks it against
//! every one of the C(24,12) masks with the same budget.
//!
//! cargo run --release --example prune_toy [data_seed]

use maskprune::autodiff::Tensor;
use maskprune::baselines::{wanda_mask, Grouping};
use maskprune::mask::{finalize_mask, BinaryMask};
use maskprune::trainer::{initialize_logits, train_masks, LinearTask, TrainConfig};

fn loss_of(task: &LinearTask<f64>, bits: &[bool]) -> f64 {
    let w = Tensor::new(
        task.w.shape().to_vec(),
        task.w.data().iter().zip(bits).map(|(&w, &b)| if b { w } else { 0.0 }).collect(),
    )
    .unwrap();
    task.loss_with(&w)
}

fn main() -> maskprune::Result<()> {
    let seed = std::env::args().nth(1).map_or(1, |s| s.parse().expect("data seed"));
    let task = LinearTask::<f64>::synthetic(4, 6, 64, seed);
    let cfg = TrainConfig {
        strength: 0.05,
        lambda1: 50.0,
        ..TrainConfig::default()
    };

    // every 12-of-24 subset, walked with Gosper's hack
    let mut losses = Vec::with_capacity(2_704_156);
    let mut m: u32 = (1 << 12) - 1;
    while m < 1 << 24 {
        let bits: Vec<bool> = (0..24).map(|i| m >> i & 1 == 1).collect();
        losses.push(loss_of(&task, &bits));
        let c = m & m.wrapping_neg();
        let r = m + c;
        m = (((r ^ m) >> 2) / c) | r;
    }
    losses.sort_by(f64::total_cmp);
    let (best, median) = (losses[0], losses[losses.len() / 2]);

    let norms = task.activation_norms();
    let wanda: BinaryMask = wanda_mask(&task.w, &norms.norms(0).unwrap(), 0.5, Grouping::PerRow)?;
    let init = initialize_logits(&task, &cfg, Some(&norms))?;
    let out = train_masks(&task, &cfg, init)?;
    let leap = &finalize_mask(&out.logits, 0.5)?[0];

    let report = |name: &str, bits: &[bool]| {
        let l = loss_of(&task, bits);
        let rank = losses.partition_point(|&v| v < l);
        println!("{name:<8} loss {l:.5}  ratio to best {:.4}  rank {rank}", l / best);
    };
    println!("{} masks: best {best:.5}, median {median:.5}", losses.len());
    report("wanda", &wanda.bits);
    report("learned", &leap.bits);
    Ok(())
}
