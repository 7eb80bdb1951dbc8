//! Mask-pattern combinatorics and per-block allocation reports.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternCountReport {
    pub n: u64,
    pub k: u64,
    /// `C(n, k)` in decimal.
    pub exact: String,
    pub exact_log2: f64,
    pub decimal_digits: usize,
    /// `n·H2(k/n)`.
    pub stirling_log2: f64,
    /// Fits in a `u64` index.
    pub representable: bool,
}

/// Exact `C(n, k)` by the multiplicative formula; each partial product is
/// itself a binomial so every division is exact.
pub fn binomial(n: u64, k: u64) -> Result<BigUint> {
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds n = {n}")));
    }
    let k = k.min(n - k);
    let mut c = BigUint::one();
    for i in 0..k {
        c = c * (n - i) / (i + 1);
    }
    Ok(c)
}

/// `log2` of a big integer from its top 64 bits.
pub fn big_log2(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits <= 64 {
        return x.to_f64().unwrap().log2();
    }
    let shift = bits - 64;
    let top = (x >> shift).to_u64().unwrap();
    (top as f64).log2() + shift as f64
}

pub fn count_patterns(n: u64, k: u64) -> Result<PatternCountReport> {
    let c = binomial(n, k)?;
    let exact = c.to_string();
    let stirling_log2 = if n == 0 { 0.0 } else { n as f64 * binary_entropy(k as f64 / n as f64)? };
    Ok(PatternCountReport {
        n,
        k,
        exact_log2: big_log2(&c),
        decimal_digits: exact.len(),
        representable: c.bits() <= 64,
        stirling_log2,
        exact,
    })
}

/// `H2(ρ) = −ρ log2 ρ − (1−ρ) log2(1−ρ)`, zero at the endpoints.
pub fn binary_entropy(rho: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("entropy argument must lie in [0, 1], got {rho}")));
    }
    let term = |p: f64| if p == 0.0 { 0.0 } else { -p * p.log2() };
    Ok(term(rho) + term(1.0 - rho))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDensity {
    pub block: usize,
    pub kept: usize,
    pub total: usize,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub blocks: Vec<BlockDensity>,
    pub global: f64,
    pub kept: usize,
    pub total: usize,
    pub min: f64,
    pub max: f64,
    /// Population standard deviation across blocks.
    pub std: f64,
}

/// Per-block densities of finalized masks; `block_of` maps each mask to
/// its block.
pub fn allocation_report(masks: &[BinaryMask], block_of: impl Fn(&BinaryMask) -> usize) -> AllocationReport {
    let mut blocks: Vec<BlockDensity> = Vec::new();
    for m in masks {
        let b = block_of(m);
        if blocks.len() <= b {
            blocks.extend((blocks.len()..=b).map(|block| BlockDensity {
                block,
                kept: 0,
                total: 0,
                density: 0.0,
            }));
        }
        blocks[b].kept += m.kept();
        blocks[b].total += m.len();
    }
    blocks.retain(|b| b.total > 0);
    for b in &mut blocks {
        b.density = b.kept as f64 / b.total as f64;
    }
    let kept: usize = blocks.iter().map(|b| b.kept).sum();
    let total: usize = blocks.iter().map(|b| b.total).sum();
    let d: Vec<f64> = blocks.iter().map(|b| b.density).collect();
    let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
    AllocationReport {
        global: kept as f64 / total.max(1) as f64,
        kept,
        total,
        min: d.iter().copied().fold(f64::INFINITY, f64::min),
        max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        std: (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len().max(1) as f64).sqrt(),
        blocks,
    }
}

impl AllocationReport {
    /// `block,kept,total,density` rows followed by a `global` row.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["block", "kept", "total", "density"])?;
        for b in &self.blocks {
            w.write_record([b.block.to_string(), b.kept.to_string(), b.total.to_string(), b.density.to_string()])?;
        }
        w.write_record(["global".to_string(), self.kept.to_string(), self.total.to_string(), self.global.to_string()])?;
        w.into_inner().map_err(|e| Error::invalid(e.to_string()))
    }
}
