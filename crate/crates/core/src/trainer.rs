//! The mask-learning loop: annealed soft masks, the three-term objective and
//! Adam updates applied to the logits only.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::baselines::{collect_activation_norms, ActivationNorms};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::mask::{self, apply_mask_var, soft_mask_var, AnnealSchedule, GumbelNoise, MaskLogits, ScheduleShape};
use crate::model::{CalibrationStream, EvalStream, MaskMode, TinyCausalLM, TokenBatch};
use crate::objective::{total_loss_at, LossBreakdown, Objective, ObjectiveVars, WeightNorm};

// ---------------------------------------------------------------------------
// Adam

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments for one parameter tensor. Kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "adam: parameter/gradient length mismatch");
    assert_eq!(params.len(), state.m.len(), "adam: state length mismatch");
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i].to_f64().unwrap();
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let mut p = params[i].to_f64().unwrap();
        if cfg.weight_decay != 0.0 {
            p -= cfg.lr * cfg.weight_decay * p;
        }
        p -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
        params[i] = T::from_f64_lossy(p);
    }
}

/// Adam over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(sizes: &[usize], cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            states: sizes.iter().map(|&n| AdamState::new(n)).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step<T: Real>(&mut self, index: usize, params: &mut [T], grads: &[T]) {
        adam_step(params, grads, &mut self.states[index], &self.cfg);
    }

    /// Kept for symmetry with step-scoped optimizers; each state tracks its
    /// own step count.
    pub fn finish_step(&mut self) {}
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    #[default]
    Wanda,
    Random,
}

/// Every hyperparameter of mask learning. Defaults are the published values
/// (batch 256 × 4096 tokens); [`TrainConfig::desk`] shrinks the batch for the
/// toy model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub tau0: f64,
    pub tau_t: f64,
    pub alpha0: f64,
    pub alpha_t: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub strength: f64,
    pub weight_decay: f64,
    pub target_sparsity: f64,
    pub init_mode: InitMode,
    pub anneal_alpha: bool,
    pub anneal_tau: bool,
    pub alpha_shape: ScheduleShape,
    pub tau_shape: ScheduleShape,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_norm: WeightNorm,
    /// Steps between per-block density snapshots.
    pub snapshot_every: usize,
    /// Calibration batches used to gather Wanda activation norms.
    pub norm_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 256,
            seq_len: 4096,
            lr: 1e-2,
            tau0: 4.0,
            tau_t: 0.05,
            alpha0: 25.0,
            alpha_t: 350.0,
            lambda1: 3.0,
            lambda2: 10.0,
            strength: 3.0,
            weight_decay: 0.0,
            target_sparsity: 0.5,
            init_mode: InitMode::Wanda,
            anneal_alpha: true,
            anneal_tau: true,
            alpha_shape: ScheduleShape::Linear,
            tau_shape: ScheduleShape::Geometric,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_norm: WeightNorm::Mean,
            snapshot_every: 50,
            norm_batches: 8,
        }
    }
}

impl TrainConfig {
    /// Batch 16 × 128 tokens for the toy model; everything else unchanged.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 16,
            seq_len: 128,
            ..Default::default()
        }
    }

    /// Kept fraction `ρ = 1 − sparsity`.
    pub fn density(&self) -> f64 {
        1.0 - self.target_sparsity
    }

    pub fn validate(&self) -> Result<()> {
        if self.init_mode == InitMode::Wanda && self.norm_batches == 0 {
            return Err(Error::invalid("wanda initialization needs norm_batches > 0"));
        }
        if !(self.target_sparsity > 0.0 && self.target_sparsity < 1.0) {
            return Err(Error::invalid(format!(
                "target_sparsity must lie in (0, 1), got {}",
                self.target_sparsity
            )));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::invalid("batch_size and seq_len must be positive"));
        }
        if !(self.tau0 > 0.0 && self.tau_t > 0.0 && self.alpha0 > 0.0 && self.alpha_t > 0.0) {
            return Err(Error::invalid("alpha and tau endpoints must be positive"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || !(self.strength > 0.0) {
            return Err(Error::invalid("lambda1, lambda2 must be >= 0 and strength > 0"));
        }
        Ok(())
    }

    fn schedules(&self) -> Result<(AnnealSchedule, AnnealSchedule)> {
        let total = self.steps.saturating_sub(1);
        let alpha = if self.anneal_alpha {
            AnnealSchedule::new(self.alpha0, self.alpha_t, total, self.alpha_shape)?
        } else {
            AnnealSchedule::constant(self.alpha0, total)
        };
        let tau = if self.anneal_tau {
            AnnealSchedule::new(self.tau0, self.tau_t, total, self.tau_shape)?
        } else {
            AnnealSchedule::constant(self.tau0, total)
        };
        Ok((alpha, tau))
    }

    /// `(α, τ)` used at `step`.
    pub fn alpha_tau(&self, step: usize) -> Result<(f64, f64)> {
        let (a, t) = self.schedules()?;
        Ok((a.value(step)?, t.value(step)?))
    }

    /// `(α, τ)` at the end of the schedules.
    pub fn final_alpha_tau(&self) -> Result<(f64, f64)> {
        self.alpha_tau(self.steps.saturating_sub(1))
    }

    pub fn objective(&self) -> Objective {
        Objective {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            density: self.density(),
            weight_norm: self.weight_norm,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_file_over(&TrainConfig::default(), path)
    }

    /// Reads a flat JSON object and applies its keys on top of `base`.
    pub fn from_json_file_over(base: &TrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let overrides: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text)?;
        let mut merged = match serde_json::to_value(base)? {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        merged.extend(overrides);
        Ok(serde_json::from_value(serde_json::Value::Object(merged))?)
    }
}

// ---------------------------------------------------------------------------
// Tasks

/// A frozen network whose prunable matrices can be replaced by masked copies.
pub trait MaskTask<T: Real> {
    type Batch;

    /// Prunable layers as `(layer_id, block, name, weights)`.
    fn layers(&self) -> Vec<(usize, usize, String, &Tensor<T>)>;

    fn batch(&self, step: usize) -> Self::Batch;

    /// The task loss with `effective[i]` standing in for layer `i`.
    fn task_loss(&self, g: &mut Graph<T>, batch: &Self::Batch, effective: &[Var]) -> Result<Var>;
}

/// Next-token loss of a [`TinyCausalLM`] on a calibration stream.
pub struct LmTask<'a, T> {
    pub model: &'a TinyCausalLM<T>,
    pub stream: &'a CalibrationStream,
}

impl<T: Real> MaskTask<T> for LmTask<'_, T> {
    type Batch = TokenBatch;

    fn layers(&self) -> Vec<(usize, usize, String, &Tensor<T>)> {
        self.model
            .maskable_layers()
            .into_iter()
            .map(|l| {
                let w = self.model.layer_weights(&l);
                (l.layer_id, l.block, l.name, w)
            })
            .collect()
    }

    fn batch(&self, step: usize) -> TokenBatch {
        self.stream.batch(step)
    }

    fn task_loss(&self, g: &mut Graph<T>, batch: &TokenBatch, effective: &[Var]) -> Result<Var> {
        let vars = self.model.bind_with(g, effective)?;
        Ok(self.model.forward(g, batch, &vars)?.loss)
    }
}

/// One linear layer `y = W̃ x` fitted to fixed data by mean squared error.
/// Every batch is the whole data set.
#[derive(Clone, Debug)]
pub struct LinearTask<T> {
    /// Inputs, `[samples, in]`.
    pub x: Tensor<T>,
    /// Targets, `[samples, out]`.
    pub y: Tensor<T>,
    /// Frozen weights, `[out, in]`.
    pub w: Tensor<T>,
}

impl<T: Real> LinearTask<T> {
    pub fn new(x: Tensor<T>, y: Tensor<T>, w: Tensor<T>) -> Result<Self> {
        let dims = |t: &Tensor<T>| t.dims2().ok_or_else(|| Error::invalid(format!("expected a matrix, got {:?}", t.shape())));
        let (n, i) = dims(&x)?;
        let (o, i2) = dims(&w)?;
        let (n2, o2) = dims(&y)?;
        if i != i2 || n != n2 || o != o2 {
            return Err(Error::Shape {
                op: "linear_task",
                lhs: vec![n, i, o],
                rhs: vec![n2, i2, o2],
            });
        }
        Ok(LinearTask { x, y, w })
    }

    /// Reconstruction instance: `W ~ N(0,1)`, correlated inputs
    /// `X = Z·(I + 0.5·G)` with `Z, G ~ N(0,1)`, and `Y = X Wᵀ`, so the
    /// dense layer fits exactly and every mask is scored by how much of
    /// the output it preserves.
    pub fn synthetic(rows: usize, cols: usize, samples: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample::<f64, _>(normal)).collect() };
        let w = draw(rows * cols);
        let mix: Vec<f64> = draw(cols * cols)
            .into_iter()
            .enumerate()
            .map(|(i, g)| if i / cols == i % cols { 1.0 } else { 0.0 } + 0.5 * g)
            .collect();
        let z = draw(samples * cols);
        let x: Vec<f64> = (0..samples * cols)
            .map(|i| {
                let (s, j) = (i / cols, i % cols);
                (0..cols).map(|k| z[s * cols + k] * mix[k * cols + j]).sum()
            })
            .collect();
        let y: Vec<f64> = (0..samples * rows)
            .map(|i| {
                let (s, r) = (i / rows, i % rows);
                (0..cols).map(|j| w[r * cols + j] * x[s * cols + j]).sum()
            })
            .collect();
        let t = |shape: [usize; 2], v: Vec<f64>| Tensor::new(shape, v.into_iter().map(|v| T::from_f64(v).unwrap()).collect()).unwrap();
        LinearTask {
            x: t([samples, cols], x),
            y: t([samples, rows], y),
            w: t([rows, cols], w),
        }
    }

    /// Per-input L2 norms of `x`, the Wanda statistic for this layer.
    pub fn activation_norms(&self) -> ActivationNorms {
        let mut n = ActivationNorms::default();
        n.accumulate(0, self.x.data(), self.x.shape()[1]);
        n
    }

    /// Loss of an explicit weight matrix, computed without a graph.
    pub fn loss_with(&self, w: &Tensor<T>) -> f64 {
        let (n, i) = (self.x.shape()[0], self.x.shape()[1]);
        let o = self.w.shape()[0];
        let (x, y, w) = (self.x.data(), self.y.data(), w.data());
        let mut total = 0.0;
        for s in 0..n {
            for r in 0..o {
                let pred: f64 = (0..i).map(|j| w[r * i + j].to_f64().unwrap() * x[s * i + j].to_f64().unwrap()).sum();
                total += (pred - y[s * o + r].to_f64().unwrap()).powi(2);
            }
        }
        total / (n * o) as f64
    }
}

impl<T: Real> MaskTask<T> for LinearTask<T> {
    type Batch = ();

    fn layers(&self) -> Vec<(usize, usize, String, &Tensor<T>)> {
        vec![(0, 0, "linear".to_string(), &self.w)]
    }

    fn batch(&self, _step: usize) {}

    fn task_loss(&self, g: &mut Graph<T>, _batch: &(), effective: &[Var]) -> Result<Var> {
        let x = g.constant(self.x.clone());
        let neg_y = g.constant(self.y.map(|v| -v));
        let pred = g.matmul_nt(x, effective[0])?;
        let diff = g.add(pred, neg_y)?;
        let sq = g.mul(diff, diff)?;
        g.mean(sq)
    }
}

/// Initial logits for every layer of `task`: `±s` from a per-row Wanda
/// selection, or random signs.
pub fn initialize_logits<T: Real, K: MaskTask<T>>(
    task: &K,
    config: &TrainConfig,
    norms: Option<&ActivationNorms>,
) -> Result<Vec<MaskLogits<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mask::noise_seed(config.seed, usize::MAX - 1, 0));
    task.layers()
        .into_iter()
        .map(|(id, _, name, w)| {
            let p = match config.init_mode {
                InitMode::Wanda => {
                    let n = norms
                        .and_then(|n| n.norms(id))
                        .ok_or_else(|| Error::invalid(format!("no activation norms for layer {name}")))?;
                    mask::wanda_init(w, &n, config.density(), config.strength)?
                }
                InitMode::Random => mask::random_init(w.shape(), config.strength, &mut rng)?,
            };
            MaskLogits::new(id, name, p, w.clone())
        })
        .collect()
}

/// Initial logits for the language model, collecting activation norms when
/// the config asks for a Wanda start.
pub fn initialize_lm_logits<T: Real>(
    model: &TinyCausalLM<T>,
    stream: &CalibrationStream,
    config: &TrainConfig,
) -> Result<Vec<MaskLogits<T>>> {
    let norms = match config.init_mode {
        InitMode::Wanda => Some(collect_activation_norms(model, stream, config.norm_batches)?),
        InitMode::Random => None,
    };
    initialize_logits(&LmTask { model, stream }, config, norms.as_ref())
}

// ---------------------------------------------------------------------------
// Logging

/// Scalars recorded at every step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lm_loss: f64,
    pub sparsity_loss: f64,
    pub weight_loss: f64,
    pub total: f64,
    pub soft_density: f64,
    pub alpha: f64,
    pub tau: f64,
}

/// Noise-free soft density per block at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensitySnapshot {
    pub step: usize,
    pub global: f64,
    pub per_block: Vec<f64>,
    /// Fraction of entries within 0.05 of 0 or 1.
    pub saturated: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<DensitySnapshot>,
}

impl TrainLog {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.records.is_empty() {
            w.write_record(["step", "lm_loss", "sparsity_loss", "weight_loss", "total", "soft_density", "alpha", "tau"])?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_csv()?)
    }

    pub fn write_snapshots_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(&self.snapshots)?;
        write_atomic(path.as_ref(), &bytes)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<std::result::Result<Vec<StepRecord>, _>>()?;
        Ok(TrainLog {
            records,
            snapshots: Vec::new(),
        })
    }
}

// ---------------------------------------------------------------------------
// Training

/// Result of [`train_masks`].
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub logits: Vec<MaskLogits<T>>,
    pub log: TrainLog,
}

/// Everything the objective at one step depends on, recorded on a graph.
pub struct StepGraph {
    pub objective: ObjectiveVars,
    pub masks: Vec<Var>,
}

/// Records the full objective at `step` with `p_vars` standing in for the
/// logits. Noise is the reproducible stream for `(seed, layer, step)`.
pub fn objective_graph<T: Real, K: MaskTask<T>>(
    g: &mut Graph<T>,
    task: &K,
    logits: &[MaskLogits<T>],
    p_vars: &[Var],
    batch: &K::Batch,
    config: &TrainConfig,
    step: usize,
) -> Result<StepGraph> {
    let (alpha, tau) = config.alpha_tau(step)?;
    let mut masks = Vec::with_capacity(logits.len());
    let mut effective = Vec::with_capacity(logits.len());
    for (ml, &p) in logits.iter().zip(p_vars) {
        let noise = GumbelNoise::for_step(ml.logits().shape(), config.seed, ml.layer_id, step);
        let m = soft_mask_var(g, p, alpha, tau, Some(&noise))?;
        let w = g.constant(ml.weights().clone());
        effective.push(apply_mask_var(g, m, w)?);
        masks.push(m);
    }
    let lm = task.task_loss(g, batch, &effective)?;
    let objective = config.objective().assemble(g, lm, &masks, &effective)?;
    Ok(StepGraph { objective, masks })
}

fn snapshot<T: Real>(logits: &[MaskLogits<T>], blocks: &[usize], step: usize, alpha: f64, tau: f64) -> Result<DensitySnapshot> {
    let n_blocks = blocks.iter().copied().max().map_or(0, |b| b + 1);
    let mut mass = vec![0.0; n_blocks];
    let mut count = vec![0usize; n_blocks];
    let mut saturated = 0usize;
    for (ml, &b) in logits.iter().zip(blocks) {
        let m = ml.soft_mask(alpha, tau, None)?;
        for &x in m.data() {
            let x = x.to_f64().unwrap();
            mass[b] += x;
            if x <= 0.05 || x >= 0.95 {
                saturated += 1;
            }
        }
        count[b] += ml.param_count();
    }
    let total: usize = count.iter().sum();
    Ok(DensitySnapshot {
        step,
        global: mass.iter().sum::<f64>() / total.max(1) as f64,
        per_block: mass.iter().zip(&count).map(|(m, &c)| m / c.max(1) as f64).collect(),
        saturated: saturated as f64 / total.max(1) as f64,
    })
}

/// Noise-free soft density `(1/N) Σ σ(αP/τ)` at the given schedule point.
pub fn noise_free_density<T: Real>(logits: &[MaskLogits<T>], alpha: f64, tau: f64) -> Result<f64> {
    let blocks = vec![0; logits.len()];
    Ok(snapshot(logits, &blocks, 0, alpha, tau)?.global)
}

/// Optimizes the logits against the full objective. Only `P` changes; the
/// frozen weights are read through `task` and never written.
pub fn train_masks<T: Real, K: MaskTask<T>>(
    task: &K,
    config: &TrainConfig,
    logits: Vec<MaskLogits<T>>,
) -> Result<TrainOutcome<T>> {
    train_masks_observed(task, config, logits, |_, _| {})
}

/// [`train_masks`] that shows `observe` the logits at the start of every
/// step, before that step's update.
pub fn train_masks_observed<T: Real, K: MaskTask<T>>(
    task: &K,
    config: &TrainConfig,
    mut logits: Vec<MaskLogits<T>>,
    mut observe: impl FnMut(usize, &[MaskLogits<T>]),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let layers = task.layers();
    if layers.len() != logits.len() {
        return Err(Error::MissingMasks(format!(
            "{} layers but {} logit matrices",
            layers.len(),
            logits.len()
        )));
    }
    let blocks: Vec<usize> = layers.iter().map(|l| l.1).collect();
    let n_total: usize = logits.iter().map(MaskLogits::param_count).sum();
    let sizes: Vec<usize> = logits.iter().map(MaskLogits::param_count).collect();
    let mut opt = Adam::new(&sizes, config.adam());
    let mut log = TrainLog::default();

    for step in 0..config.steps {
        observe(step, &logits);
        let (alpha, tau) = config.alpha_tau(step)?;
        if config.snapshot_every > 0 && step % config.snapshot_every == 0 {
            log.snapshots.push(snapshot(&logits, &blocks, step, alpha, tau)?);
        }
        let batch = task.batch(step);
        let mut g = Graph::new();
        let p_vars: Vec<Var> = logits.iter().map(|ml| g.leaf(ml.logits().clone())).collect();
        let sg = objective_graph(&mut g, task, &logits, &p_vars, &batch, config, step)?;
        let o = sg.objective;
        let f = |v: Var| g.item(v).to_f64().unwrap_or(f64::NAN);
        let LossBreakdown {
            lm_loss,
            sparsity_loss,
            weight_loss,
            ..
        } = total_loss_at(f(o.lm), f(o.sparsity), f(o.weight), step)?;
        let mass: f64 = sg
            .masks
            .iter()
            .map(|&m| g.value(m).data().iter().map(|x| x.to_f64().unwrap()).sum::<f64>())
            .sum();
        log.records.push(StepRecord {
            step,
            lm_loss,
            sparsity_loss,
            weight_loss,
            total: f(o.total),
            soft_density: mass / n_total as f64,
            alpha,
            tau,
        });
        let mut grads = g.backward(o.total)?;
        for (i, (ml, &pv)) in logits.iter_mut().zip(&p_vars).enumerate() {
            let gr = grads.take(pv).expect("logits are trainable leaves");
            opt.step(i, ml.logits_mut(), &gr);
        }
    }
    if config.steps > 0 && config.snapshot_every > 0 {
        let (alpha, tau) = config.final_alpha_tau()?;
        log.snapshots.push(snapshot(&logits, &blocks, config.steps, alpha, tau)?);
    }
    Ok(TrainOutcome { logits, log })
}

// ---------------------------------------------------------------------------
// Ablations

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    Lambda2Zero,
    RandomInit,
    FixedAlpha,
    FixedTau,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::Lambda2Zero,
        AblationVariant::RandomInit,
        AblationVariant::FixedAlpha,
        AblationVariant::FixedTau,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::Lambda2Zero => "lambda2_zero",
            AblationVariant::RandomInit => "random_init",
            AblationVariant::FixedAlpha => "fixed_alpha",
            AblationVariant::FixedTau => "fixed_tau",
        }
    }

    /// The base config with exactly one field changed.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::Lambda2Zero => c.lambda2 = 0.0,
            AblationVariant::RandomInit => c.init_mode = InitMode::Random,
            AblationVariant::FixedAlpha => c.anneal_alpha = false,
            AblationVariant::FixedTau => c.anneal_tau = false,
        }
        c
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation variant '{s}'")))
    }
}

/// One row of an ablation comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub perplexity: f64,
    pub binary_density: f64,
    pub soft_density: f64,
    pub final_lm_loss: f64,
}

/// Trains, finalizes and evaluates one variant of the language-model run.
pub fn run_variant<T: Real>(
    variant: AblationVariant,
    base: &TrainConfig,
    model: &TinyCausalLM<T>,
    stream: &CalibrationStream,
    eval: &EvalStream,
) -> Result<(AblationRow, TrainOutcome<T>)> {
    let config = variant.apply(base);
    let init = initialize_lm_logits(model, stream, &config)?;
    let outcome = train_masks(&LmTask { model, stream }, &config, init)?;
    let masks = mask::finalize_mask(&outcome.logits, config.density())?;
    let perplexity = model.perplexity(&MaskMode::Binary(&masks), eval)?;
    let kept: usize = masks.iter().map(|m| m.kept()).sum();
    let total: usize = masks.iter().map(|m| m.len()).sum();
    let (alpha, tau) = config.final_alpha_tau()?;
    let row = AblationRow {
        variant: variant.name().to_string(),
        perplexity,
        binary_density: kept as f64 / total as f64,
        soft_density: noise_free_density(&outcome.logits, alpha, tau)?,
        final_lm_loss: outcome.log.records.last().map_or(f64::NAN, |r| r.lm_loss),
    };
    Ok((row, outcome))
}

/// Runs every listed variant and collects one comparison row each.
pub fn run_ablation<T: Real>(
    variants: &[AblationVariant],
    base: &TrainConfig,
    model: &TinyCausalLM<T>,
    stream: &CalibrationStream,
    eval: &EvalStream,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&v| run_variant(v, base, model, stream, eval).map(|r| r.0))
        .collect()
}

/// Comparison table as CSV.
pub fn ablation_csv(rows: &[AblationRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}
