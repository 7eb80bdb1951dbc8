//! Empirical check of the hard-threshold law of the noisy mask: with a single
//! Gumbel draw, `P(M > 0.5) = 1 - exp(-exp(αP))` whatever the temperature.
//!
//! cargo run --release --example gumbel_law

use maskprune::autodiff::Tensor;
use maskprune::mask::{GumbelNoise, MaskLogits};

fn main() -> maskprune::Result<()> {
    let draws = 100_000;
    println!("{:>8} {:>8} {:>6} {:>10} {:>10} {:>8}", "alpha", "tau", "aP", "empirical", "law", "z");
    for (k, &(alpha, tau)) in [(25.0, 4.0), (187.5, 0.45), (350.0, 0.05)].iter().enumerate() {
        for (j, &ap) in [-1.5, 0.0, 1.0].iter().enumerate() {
            let p = ap / alpha;
            let ml = MaskLogits::new(0, "probe", Tensor::full([1, draws], p as f32), Tensor::full([1, draws], 1.0f32))?;
            let noise = GumbelNoise::for_step(&[1, draws], 7, k, j);
            let m = ml.soft_mask(alpha, tau, Some(&noise))?;
            let hits = m.data().iter().filter(|&&x| x > 0.5).count();
            let emp = hits as f64 / draws as f64;
            let law = 1.0 - (-(ap as f64).exp()).exp();
            let sd = (law * (1.0 - law) / draws as f64).sqrt();
            println!("{alpha:>8} {tau:>8} {ap:>6} {emp:>10.5} {law:>10.5} {:>8.2}", (emp - law) / sd);
        }
    }
    Ok(())
}
