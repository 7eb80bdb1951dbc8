//! How many unstructured masks a row admits, exactly and by entropy.
//!
//! cargo run --release --example patterns

use maskprune::analysis::{binary_entropy, count_patterns};

fn main() -> maskprune::Result<()> {
    for (n, k) in [(4, 2), (24, 12), (64, 32), (1024, 512), (4096, 2048), (4096, 1638)] {
        let r = count_patterns(n, k)?;
        let shown = if r.exact.len() > 24 {
            format!("{}...({} digits)", &r.exact[..12], r.decimal_digits)
        } else {
            r.exact.clone()
        };
        println!(
            "C({n},{k}) = {shown}\n  log2 exact {:.4}  n*H2 {:.4}  gap {:.4}  fits u64: {}",
            r.exact_log2,
            r.stirling_log2,
            r.stirling_log2 - r.exact_log2,
            r.representable
        );
    }
    for rho in [0.5, 0.4, 0.25, 0.1] {
        println!("H2({rho}) = {:.6}", binary_entropy(rho)?);
    }
    Ok(())
}
