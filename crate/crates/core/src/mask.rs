//! Relaxed Bernoulli masks: Gumbel noise, the soft mask `σ((αP + g)/τ)`,
//! logit initialization, annealing schedules and finalization to a binary
//! mask at an exact global density.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Real, Tensor, Var};
use crate::baselines::{self, Grouping};
use crate::error::{Error, Result};

/// Clamp applied to uniform draws so the Gumbel transform stays finite.
pub const NOISE_EPS: f64 = 1e-9;

/// Learnable logits `P` for one prunable matrix, paired with its frozen weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits<T> {
    pub layer_id: usize,
    pub name: String,
    logits: Tensor<T>,
    weights: Tensor<T>,
}

impl<T: Real> MaskLogits<T> {
    pub fn new(layer_id: usize, name: impl Into<String>, logits: Tensor<T>, weights: Tensor<T>) -> Result<Self> {
        if logits.shape() != weights.shape() {
            return Err(Error::Shape {
                op: "mask_logits",
                lhs: logits.shape().to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        Ok(MaskLogits {
            layer_id,
            name: name.into(),
            logits: logits.with_grad(true),
            weights: weights.with_grad(false),
        })
    }

    pub fn logits(&self) -> &Tensor<T> {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [T] {
        self.logits.data_mut()
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    /// `N_i`, the number of prunable entries in this layer.
    pub fn param_count(&self) -> usize {
        self.weights.numel()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.weights.dims2().unwrap_or((1, self.weights.numel()))
    }

    /// Eager soft mask. `noise = None` gives the noise-free mask used for
    /// evaluation during training.
    pub fn soft_mask(&self, alpha: f64, tau: f64, noise: Option<&GumbelNoise<T>>) -> Result<Tensor<T>> {
        check_alpha_tau(alpha, tau)?;
        let a = T::from_f64_lossy(alpha / tau);
        let inv_tau = T::from_f64_lossy(1.0 / tau);
        match noise {
            None => Ok(self.logits.map(|p| sigmoid(p * a)).with_grad(false)),
            Some(n) => {
                if n.g.shape() != self.logits.shape() {
                    return Err(Error::Shape {
                        op: "soft_mask",
                        lhs: self.logits.shape().to_vec(),
                        rhs: n.g.shape().to_vec(),
                    });
                }
                let data = self
                    .logits
                    .data()
                    .iter()
                    .zip(n.g.data())
                    .map(|(&p, &g)| sigmoid(p * a + g * inv_tau))
                    .collect();
                Tensor::new(self.logits.shape().to_vec(), data)
            }
        }
    }

    /// Effective weights `M ⊙ W`.
    pub fn apply_mask(&self, mask: &Tensor<T>) -> Result<Tensor<T>> {
        if mask.shape() != self.weights.shape() {
            return Err(Error::Shape {
                op: "apply_mask",
                lhs: self.weights.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let data = self
            .weights
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&w, &m)| m * w)
            .collect();
        Tensor::new(self.weights.shape().to_vec(), data)
    }
}

fn check_alpha_tau(alpha: f64, tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("scale must be positive, got {alpha}")));
    }
    Ok(())
}

/// Records `σ((αP + g)/τ)` on the graph. Differentiable in `p`.
pub fn soft_mask_var<T: Real>(
    graph: &mut Graph<T>,
    p: Var,
    alpha: f64,
    tau: f64,
    noise: Option<&GumbelNoise<T>>,
) -> Result<Var> {
    check_alpha_tau(alpha, tau)?;
    let z = graph.scale(p, T::from_f64_lossy(alpha / tau));
    let z = match noise {
        Some(n) => {
            let inv_tau = T::from_f64_lossy(1.0 / tau);
            let g = graph.constant(n.g.map(|x| x * inv_tau));
            graph.add(z, g)?
        }
        None => z,
    };
    Ok(graph.sigmoid(z))
}

/// Records `M ⊙ W` on the graph.
pub fn apply_mask_var<T: Real>(graph: &mut Graph<T>, mask: Var, weights: Var) -> Result<Var> {
    if graph.value(mask).shape() != graph.value(weights).shape() {
        return Err(Error::Shape {
            op: "apply_mask",
            lhs: graph.value(weights).shape().to_vec(),
            rhs: graph.value(mask).shape().to_vec(),
        });
    }
    graph.mul(mask, weights)
}

/// Gumbel noise `g = −log(−log u)` with `u` clamped to `(ε, 1−ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise<T> {
    pub u: Vec<f64>,
    pub g: Tensor<T>,
    pub seed: u64,
}

#[inline]
pub fn gumbel_transform(u: f64) -> f64 {
    let u = u.clamp(NOISE_EPS, 1.0 - NOISE_EPS);
    -(-u.ln()).ln()
}

/// Draws Gumbel noise of the given shape from `rng`.
pub fn sample_gumbel<T: Real>(shape: &[usize], rng: &mut impl Rng, seed: u64) -> GumbelNoise<T> {
    let n: usize = shape.iter().product();
    let u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let g = Tensor::new(shape.to_vec(), u.iter().map(|&x| T::from_f64_lossy(gumbel_transform(x))).collect())
        .expect("shape matches draw count");
    GumbelNoise { u, g, seed }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the noise stream for one layer at one step.
pub fn noise_seed(global_seed: u64, layer_id: usize, step: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(global_seed) ^ layer_id as u64) ^ step as u64)
}

impl<T: Real> GumbelNoise<T> {
    /// Reproducible noise for `(global_seed, layer_id, step)`.
    pub fn for_step(shape: &[usize], global_seed: u64, layer_id: usize, step: usize) -> Self {
        let seed = noise_seed(global_seed, layer_id, step);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_gumbel(shape, &mut rng, seed)
    }
}

/// Logits from a per-row Wanda selection: kept entries get `+s`, the rest `−s`.
pub fn wanda_init<T: Real>(weights: &Tensor<T>, input_norms: &[f64], density: f64, strength: f64) -> Result<Tensor<T>> {
    if !(strength > 0.0) {
        return Err(Error::invalid(format!("mask strength must be positive, got {strength}")));
    }
    let keep = baselines::wanda_mask(weights, input_norms, density, Grouping::PerRow)?;
    let s = T::from_f64_lossy(strength);
    Tensor::new(
        weights.shape().to_vec(),
        keep.bits.iter().map(|&k| if k { s } else { -s }).collect(),
    )
}

/// Logits drawn independently as `±s` with equal probability.
pub fn random_init<T: Real>(shape: &[usize], strength: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
    if !(strength > 0.0) {
        return Err(Error::invalid(format!("mask strength must be positive, got {strength}")));
    }
    let s = T::from_f64_lossy(strength);
    Ok(Tensor::from_fn(shape.to_vec(), |_| if rng.gen::<bool>() { s } else { -s }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    Linear,
    Geometric,
}

/// Endpoint-parameterized annealing schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
    pub shape: ScheduleShape,
}

impl AnnealSchedule {
    pub fn new(start: f64, end: f64, total_steps: usize, shape: ScheduleShape) -> Result<Self> {
        if shape == ScheduleShape::Geometric && !(start > 0.0 && end > 0.0) {
            return Err(Error::invalid(format!(
                "geometric schedule needs positive endpoints, got {start} -> {end}"
            )));
        }
        Ok(AnnealSchedule {
            start,
            end,
            total_steps,
            shape,
        })
    }

    /// A schedule that stays at `value`.
    pub fn constant(value: f64, total_steps: usize) -> Self {
        AnnealSchedule {
            start: value,
            end: value,
            total_steps,
            shape: ScheduleShape::Linear,
        }
    }

    pub fn value(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid(format!(
                "schedule step {step} beyond total {}",
                self.total_steps
            )));
        }
        if self.total_steps == 0 || self.start == self.end {
            return Ok(self.start);
        }
        if step == self.total_steps {
            return Ok(self.end);
        }
        let frac = step as f64 / self.total_steps as f64;
        Ok(match self.shape {
            ScheduleShape::Linear => self.start + (self.end - self.start) * frac,
            ScheduleShape::Geometric => self.start * (self.end / self.start).powf(frac),
        })
    }
}

/// A finalized `{0,1}` mask for one layer, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub layer_id: usize,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(layer_id: usize, name: impl Into<String>, rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Shape {
                op: "binary_mask",
                lhs: vec![rows, cols],
                rhs: vec![bits.len()],
            });
        }
        Ok(BinaryMask {
            layer_id,
            name: name.into(),
            rows,
            cols,
            bits,
        })
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.kept() as f64 / self.bits.len() as f64
        }
    }

    pub fn row_kept(&self, row: usize) -> usize {
        self.bits[row * self.cols..(row + 1) * self.cols]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    /// The mask as a `{0,1}` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            [self.rows, self.cols],
            self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        )
        .expect("bits sized to rows*cols")
    }

    /// `W` with pruned entries replaced by exact zeros.
    pub fn apply<T: Real>(&self, weights: &Tensor<T>) -> Result<Tensor<T>> {
        if weights.numel() != self.bits.len() {
            return Err(Error::Shape {
                op: "binary_mask_apply",
                lhs: weights.shape().to_vec(),
                rhs: vec![self.rows, self.cols],
            });
        }
        let data = weights
            .data()
            .iter()
            .zip(&self.bits)
            .map(|(&w, &b)| if b { w } else { T::zero() })
            .collect();
        Tensor::new(weights.shape().to_vec(), data)
    }
}

/// Number of entries kept globally: `round(ρ·N)`.
pub fn global_keep_count(total: usize, density: f64) -> usize {
    ((density * total as f64).round() as usize).min(total)
}

/// Global top-k over raw logits across all layers. Ties are broken by
/// `(layer_id, row, col)`, lowest first. Noise, α and τ play no role.
pub fn finalize_mask<T: Real>(all_logits: &[MaskLogits<T>], density: f64) -> Result<Vec<BinaryMask>> {
    if !(density > 0.0 && density < 1.0) {
        return Err(Error::invalid(format!("density must lie in (0, 1), got {density}")));
    }
    let mut entries: Vec<(f64, usize, usize, usize)> = Vec::new();
    for (li, ml) in all_logits.iter().enumerate() {
        for (j, &p) in ml.logits.data().iter().enumerate() {
            entries.push((p.to_f64().unwrap_or(f64::NAN), ml.layer_id, j, li));
        }
    }
    let total = entries.len();
    let keep = global_keep_count(total, density);
    let order = |a: &(f64, usize, usize, usize), b: &(f64, usize, usize, usize)| {
        b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    let mut bits: Vec<Vec<bool>> = all_logits.iter().map(|m| vec![false; m.param_count()]).collect();
    if keep > 0 {
        if keep < total {
            entries.select_nth_unstable_by(keep - 1, order);
        }
        for &(_, _, j, li) in &entries[..keep] {
            bits[li][j] = true;
        }
    }
    all_logits
        .iter()
        .zip(bits)
        .map(|(ml, b)| {
            let (r, c) = ml.dims();
            BinaryMask::new(ml.layer_id, ml.name.clone(), r, c, b)
        })
        .collect()
}
