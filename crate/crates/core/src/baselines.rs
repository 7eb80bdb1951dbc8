//! One-shot magnitude and Wanda pruning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::{CalibrationStream, TinyCausalLM};

/// Comparison group for top-k selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Each output row keeps its own top-k.
    #[default]
    PerRow,
    /// One top-k over the whole matrix.
    PerLayer,
}

/// `⌊ρ·n⌉`, rounding halves up.
pub fn keep_count(n: usize, density: f64) -> usize {
    ((density * n as f64 + 0.5).floor() as usize).min(n)
}

fn check_density(density: f64) -> Result<()> {
    if density > 0.0 && density < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("density must lie in (0, 1), got {density}")))
    }
}

/// Keeps the highest `scores` in each group; equal scores prefer the lower
/// index.
pub fn top_k_mask(scores: &[f64], rows: usize, cols: usize, density: f64, grouping: Grouping) -> Result<Vec<bool>> {
    check_density(density)?;
    if scores.len() != rows * cols {
        return Err(Error::Shape {
            op: "top_k_mask",
            lhs: vec![rows, cols],
            rhs: vec![scores.len()],
        });
    }
    let mut keep = vec![false; scores.len()];
    let group = match grouping {
        Grouping::PerRow => cols,
        Grouping::PerLayer => rows * cols,
    };
    if group == 0 {
        return Ok(keep);
    }
    let k = keep_count(group, density);
    let mut idx: Vec<usize> = Vec::with_capacity(group);
    for start in (0..scores.len()).step_by(group) {
        idx.clear();
        idx.extend(start..start + group);
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        for &i in &idx[..k] {
            keep[i] = true;
        }
    }
    Ok(keep)
}

fn dims<T: Real>(w: &Tensor<T>) -> Result<(usize, usize)> {
    w.dims2().ok_or_else(|| Error::Shape {
        op: "baseline",
        lhs: w.shape().to_vec(),
        rhs: vec![],
    })
}

/// Keeps the largest `|W_ij|` in each row.
pub fn magnitude_mask<T: Real>(w: &Tensor<T>, density: f64, grouping: Grouping) -> Result<BinaryMask> {
    let (r, c) = dims(w)?;
    let scores: Vec<f64> = w.data().iter().map(|x| x.to_f64().unwrap().abs()).collect();
    BinaryMask::new(0, "", r, c, top_k_mask(&scores, r, c, density, grouping)?)
}

/// Keeps the largest `|W_ij|·‖x_j‖₂` in each row.
pub fn wanda_mask<T: Real>(w: &Tensor<T>, norms: &[f64], density: f64, grouping: Grouping) -> Result<BinaryMask> {
    let (r, c) = dims(w)?;
    if norms.len() != c {
        return Err(Error::Shape {
            op: "wanda_mask",
            lhs: vec![r, c],
            rhs: vec![norms.len()],
        });
    }
    let scores: Vec<f64> = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| x.to_f64().unwrap().abs() * norms[i % c])
        .collect();
    BinaryMask::new(0, "", r, c, top_k_mask(&scores, r, c, density, grouping)?)
}

/// Per-input-feature L2 norms of each prunable layer's input.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationNorms {
    sum_sq: BTreeMap<usize, Vec<f64>>,
}

impl ActivationNorms {
    /// Adds `rows × cols` activations observed at the input of `layer_id`.
    pub fn accumulate<T: Real>(&mut self, layer_id: usize, activations: &[T], cols: usize) {
        let acc = self.sum_sq.entry(layer_id).or_insert_with(|| vec![0.0; cols]);
        for row in activations.chunks(cols) {
            for (a, &x) in acc.iter_mut().zip(row) {
                let x = x.to_f64().unwrap();
                *a += x * x;
            }
        }
    }

    /// Combines norms gathered over disjoint token sets.
    pub fn merge(&mut self, other: &ActivationNorms) {
        for (id, v) in &other.sum_sq {
            let acc = self.sum_sq.entry(*id).or_insert_with(|| vec![0.0; v.len()]);
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
    }

    pub fn norms(&self, layer_id: usize) -> Option<Vec<f64>> {
        self.sum_sq.get(&layer_id).map(|v| v.iter().map(|s| s.sqrt()).collect())
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.sum_sq.keys().copied()
    }
}

/// Runs `n_batches` dense forward passes and accumulates input norms for
/// every prunable layer.
pub fn collect_activation_norms<T: Real>(
    model: &TinyCausalLM<T>,
    stream: &CalibrationStream,
    n_batches: usize,
) -> Result<ActivationNorms> {
    if n_batches == 0 {
        return Err(Error::invalid("need at least one calibration batch"));
    }
    let layers = model.maskable_layers();
    let mut norms = ActivationNorms::default();
    for step in 0..n_batches {
        let batch = stream.batch(step);
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let out = model.forward(&mut g, &batch, &vars)?;
        for (l, &x) in layers.iter().zip(&out.layer_inputs) {
            let t = g.value(x);
            let cols = t.dims2().map_or(t.numel(), |d| d.1);
            norms.accumulate(l.layer_id, t.data(), cols);
        }
    }
    Ok(norms)
}

/// Which one-shot baseline to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Magnitude,
    Wanda,
}

/// Baseline masks for every prunable layer. `norms` is required for Wanda.
pub fn baseline_masks<T: Real>(
    model: &TinyCausalLM<T>,
    method: BaselineMethod,
    norms: Option<&ActivationNorms>,
    density: f64,
    grouping: Grouping,
) -> Result<Vec<BinaryMask>> {
    model
        .maskable_layers()
        .iter()
        .map(|l| {
            let w = model.layer_weights(l);
            let mut m = match method {
                BaselineMethod::Magnitude => magnitude_mask(w, density, grouping)?,
                BaselineMethod::Wanda => {
                    let n = norms
                        .and_then(|n| n.norms(l.layer_id))
                        .ok_or_else(|| Error::invalid(format!("no activation norms for {}", l.name)))?;
                    wanda_mask(w, &n, density, grouping)?
                }
            };
            m.layer_id = l.layer_id;
            m.name = l.name.clone();
            Ok(m)
        })
        .collect()
}
