//! A tiny byte-level decoder-only language model whose projection matrices
//! can be masked, plus the corpus streams used to train and evaluate it.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::mask::{self, apply_mask_var, soft_mask_var, BinaryMask, GumbelNoise, MaskLogits};
use crate::trainer::{Adam, AdamConfig};

const NORM_EPS: f64 = 1e-5;
const PROJ_NAMES: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"];
const PER_BLOCK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub mlp_ratio: usize,
}

impl ModelConfig {
    /// Byte vocabulary, 128-wide, 4 blocks of 4 heads, 128-token context.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: 256,
            embed_dim: 128,
            n_blocks: 4,
            n_heads: 4,
            context_len: 128,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.n_blocks == 0 || self.context_len == 0 {
            return Err(Error::invalid(format!("degenerate model config {self:?}")));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::invalid("mlp_ratio must be positive"));
        }
        Ok(())
    }
}

/// One prunable projection matrix of the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRef {
    pub layer_id: usize,
    pub block: usize,
    pub name: String,
    pub(crate) param: usize,
}

/// Decoder-only transformer with RMSNorm, GELU MLP and learned positions.
/// Embeddings, norms and the output head are never masked.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyCausalLM<T> {
    config: ModelConfig,
    params: Vec<(String, Tensor<T>)>,
}

/// `batch × seq` next-token prediction problem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TokenBatch {
    /// Builds a batch from windows of `seq + 1` tokens.
    pub fn from_windows(windows: &[&[usize]]) -> Result<Self> {
        let seq = windows.first().map_or(0, |w| w.len().saturating_sub(1));
        if seq == 0 || windows.iter().any(|w| w.len() != seq + 1) {
            return Err(Error::invalid("token windows must share a length of at least 2"));
        }
        let mut inputs = Vec::with_capacity(windows.len() * seq);
        let mut targets = Vec::with_capacity(windows.len() * seq);
        for w in windows {
            inputs.extend_from_slice(&w[..seq]);
            targets.extend_from_slice(&w[1..]);
        }
        Ok(TokenBatch {
            batch: windows.len(),
            seq,
            inputs,
            targets,
        })
    }

    pub fn tokens(&self) -> usize {
        self.inputs.len()
    }
}

/// Output of a graph forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub loss: Var,
    /// Input activations of each prunable layer, in `maskable_layers` order.
    pub layer_inputs: Vec<Var>,
}

/// How prunable layers are masked during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum MaskMode<'a, T> {
    /// Original weights.
    Dense,
    /// `σ((αP + g)/τ) ⊙ W` with explicit per-layer noise.
    Soft {
        logits: &'a [MaskLogits<T>],
        alpha: f64,
        tau: f64,
        noise: &'a [GumbelNoise<T>],
    },
    /// Soft mask with `g = 0`.
    NoiseFree {
        logits: &'a [MaskLogits<T>],
        alpha: f64,
        tau: f64,
    },
    /// Finalized `{0,1}` masks.
    Binary(&'a [BinaryMask]),
}

impl<T: Real> TinyCausalLM<T> {
    /// Random initialization: normal(0, 0.02), residual projections scaled
    /// by `1/sqrt(2·n_blocks)`, norm gains at 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let h = d * config.mlp_ratio;
        let std = 0.02;
        let resid = std / (2.0 * config.n_blocks as f64).sqrt();
        let mut normal = |shape: [usize; 2], s: f64| {
            let dist = Normal::new(0.0, s).expect("positive std");
            Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(&mut rng)))
        };
        let mut params = vec![
            ("tok_embed".to_string(), normal([config.vocab_size, d], std)),
            ("pos_embed".to_string(), normal([config.context_len, d], std)),
        ];
        for b in 0..config.n_blocks {
            let p = |n: &str| format!("blocks.{b}.{n}");
            params.push((p("attn_norm"), Tensor::full([d], T::one())));
            params.push((p("attn.q"), normal([d, d], std)));
            params.push((p("attn.k"), normal([d, d], std)));
            params.push((p("attn.v"), normal([d, d], std)));
            params.push((p("attn.o"), normal([d, d], resid)));
            params.push((p("mlp_norm"), Tensor::full([d], T::one())));
            params.push((p("mlp.up"), normal([h, d], std)));
            params.push((p("mlp.down"), normal([d, h], resid)));
        }
        params.push(("final_norm".to_string(), Tensor::full([d], T::one())));
        params.push(("head".to_string(), normal([config.vocab_size, d], std)));
        Ok(TinyCausalLM { config, params })
    }

    /// Rebuilds a model from named tensors, checking every expected shape.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let template = TinyCausalLM::<T>::new(config, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((tn, tt), (n, t)) in template.params.iter().zip(&params) {
            if tn != n || tt.shape() != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter mismatch: expected {tn} {:?}, got {n} {:?}",
                    tt.shape(),
                    t.shape()
                )));
            }
        }
        Ok(TinyCausalLM { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn cast<U: Real>(&self) -> TinyCausalLM<U> {
        TinyCausalLM {
            config: self.config,
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    fn block_base(b: usize) -> usize {
        2 + b * PER_BLOCK
    }

    /// Attention and MLP projections, block by block. Layer ids are dense
    /// from 0.
    pub fn maskable_layers(&self) -> Vec<LayerRef> {
        let mut out = Vec::new();
        for b in 0..self.config.n_blocks {
            let base = Self::block_base(b);
            for (j, &pos) in [1, 2, 3, 4, 6, 7].iter().enumerate() {
                out.push(LayerRef {
                    layer_id: b * PROJ_NAMES.len() + j,
                    block: b,
                    name: self.params[base + pos].0.clone(),
                    param: base + pos,
                });
            }
        }
        out
    }

    pub fn maskable_param_count(&self) -> usize {
        self.maskable_layers().iter().map(|l| self.params[l.param].1.numel()).sum()
    }

    pub fn layer_weights(&self, layer: &LayerRef) -> &Tensor<T> {
        &self.params[layer.param].1
    }

    /// SHA-256 over names, shapes and raw bytes of every parameter.
    pub fn weights_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(t.numel() * T::BYTES);
            t.data().iter().for_each(|&x| x.write_le(&mut buf));
            h.update(&buf);
        }
        h.finalize().into()
    }

    /// Records every parameter on the graph, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| g.leaf(t.clone().with_grad(trainable)))
            .collect()
    }

    /// Records frozen parameters, replacing each prunable matrix by the
    /// corresponding entry of `effective` (one per `maskable_layers` entry).
    pub fn bind_with(&self, g: &mut Graph<T>, effective: &[Var]) -> Result<Vec<Var>> {
        let layers = self.maskable_layers();
        if layers.len() != effective.len() {
            return Err(Error::MissingMasks(format!(
                "{} prunable layers but {} effective weights",
                layers.len(),
                effective.len()
            )));
        }
        let mut vars: Vec<Option<Var>> = vec![None; self.params.len()];
        for (l, &v) in layers.iter().zip(effective) {
            if g.value(v).shape() != self.params[l.param].1.shape() {
                return Err(Error::Shape {
                    op: "bind_with",
                    lhs: self.params[l.param].1.shape().to_vec(),
                    rhs: g.value(v).shape().to_vec(),
                });
            }
            vars[l.param] = Some(v);
        }
        Ok(vars
            .into_iter()
            .zip(&self.params)
            .map(|(v, (_, t))| v.unwrap_or_else(|| g.constant(t.clone())))
            .collect())
    }

    /// Forward pass over a token batch with the given parameter bindings.
    pub fn forward(&self, g: &mut Graph<T>, batch: &TokenBatch, vars: &[Var]) -> Result<Forward> {
        let c = &self.config;
        if batch.seq > c.context_len {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds context {}",
                batch.seq, c.context_len
            )));
        }
        if vars.len() != self.params.len() {
            return Err(Error::invalid("parameter bindings do not match the model"));
        }
        let eps = T::from_f64_lossy(NORM_EPS);
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let tok = g.embedding(vars[0], &batch.inputs)?;
        let pos = g.embedding(vars[1], &positions)?;
        let mut x = g.add(tok, pos)?;
        let mut layer_inputs = Vec::with_capacity(c.n_blocks * PROJ_NAMES.len());
        for b in 0..c.n_blocks {
            let v = &vars[Self::block_base(b)..Self::block_base(b) + PER_BLOCK];
            let h = g.rms_norm(x, v[0], eps)?;
            let q = g.matmul_nt(h, v[1])?;
            let k = g.matmul_nt(h, v[2])?;
            let vv = g.matmul_nt(h, v[3])?;
            let a = g.causal_attention(q, k, vv, batch.batch, batch.seq, c.n_heads)?;
            let o = g.matmul_nt(a, v[4])?;
            x = g.add(x, o)?;
            let h2 = g.rms_norm(x, v[5], eps)?;
            let up = g.matmul_nt(h2, v[6])?;
            let act = g.gelu(up);
            let down = g.matmul_nt(act, v[7])?;
            x = g.add(x, down)?;
            layer_inputs.extend([h, h, h, a, h2, act]);
        }
        let n = vars.len();
        let xf = g.rms_norm(x, vars[n - 2], eps)?;
        let logits = g.matmul_nt(xf, vars[n - 1])?;
        let loss = g.cross_entropy(logits, &batch.targets)?;
        Ok(Forward {
            logits,
            loss,
            layer_inputs,
        })
    }

    /// Builds the prunable-layer weights for `mode` on the graph. Returns
    /// `None` for dense mode.
    pub fn effective_weights(&self, g: &mut Graph<T>, mode: &MaskMode<'_, T>) -> Result<Option<Vec<Var>>> {
        let layers = self.maskable_layers();
        let check_len = |n: usize, what: &str| {
            if n == layers.len() {
                Ok(())
            } else {
                Err(Error::MissingMasks(format!("{what}: expected {} layers, got {n}", layers.len())))
            }
        };
        let out = match *mode {
            MaskMode::Dense => return Ok(None),
            MaskMode::Soft {
                logits,
                alpha,
                tau,
                noise,
            } => {
                check_len(logits.len(), "soft logits")?;
                check_len(noise.len(), "soft noise")?;
                let mut out = Vec::with_capacity(layers.len());
                for (ml, n) in logits.iter().zip(noise) {
                    let p = g.constant(ml.logits().clone());
                    let m = soft_mask_var(g, p, alpha, tau, Some(n))?;
                    let w = g.constant(ml.weights().clone());
                    out.push(apply_mask_var(g, m, w)?);
                }
                out
            }
            MaskMode::NoiseFree { logits, alpha, tau } => {
                check_len(logits.len(), "noise-free logits")?;
                let mut out = Vec::with_capacity(layers.len());
                for ml in logits {
                    let p = g.constant(ml.logits().clone());
                    let m = soft_mask_var(g, p, alpha, tau, None)?;
                    let w = g.constant(ml.weights().clone());
                    out.push(apply_mask_var(g, m, w)?);
                }
                out
            }
            MaskMode::Binary(masks) => {
                check_len(masks.len(), "binary masks")?;
                let mut out = Vec::with_capacity(layers.len());
                for (l, bm) in layers.iter().zip(masks) {
                    out.push(g.constant(bm.apply(self.layer_weights(l))?));
                }
                out
            }
        };
        Ok(Some(out))
    }

    /// Evaluates logits and mean next-token loss without recording gradients.
    pub fn forward_masked(&self, batch: &TokenBatch, mode: &MaskMode<'_, T>) -> Result<(Tensor<T>, f64)> {
        let mut g = Graph::new();
        let vars = match self.effective_weights(&mut g, mode)? {
            None => self.bind(&mut g, false),
            Some(eff) => self.bind_with(&mut g, &eff)?,
        };
        let out = self.forward(&mut g, batch, &vars)?;
        let loss = g.item(out.loss).to_f64().unwrap_or(f64::NAN);
        Ok((g.value(out.logits).clone(), loss))
    }

    /// `exp` of the mean next-token cross-entropy over every predicted token
    /// of `stream`.
    pub fn perplexity(&self, mode: &MaskMode<'_, T>, stream: &EvalStream) -> Result<f64> {
        Ok(self.eval_loss(mode, stream)?.exp())
    }

    /// Mean next-token cross-entropy over every predicted token of `stream`.
    pub fn eval_loss(&self, mode: &MaskMode<'_, T>, stream: &EvalStream) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in stream.batches()? {
            let (_, loss) = self.forward_masked(&batch, mode)?;
            total += loss * batch.tokens() as f64;
            count += batch.tokens();
        }
        if count == 0 {
            return Err(Error::invalid("empty evaluation stream"));
        }
        Ok(total / count as f64)
    }

    /// Applies `mask ⊙ W` permanently to each prunable layer.
    pub fn bake_masks(&self, masks: &[BinaryMask]) -> Result<Self> {
        let layers = self.maskable_layers();
        if masks.len() != layers.len() {
            return Err(Error::MissingMasks(format!(
                "expected {} masks, got {}",
                layers.len(),
                masks.len()
            )));
        }
        let mut out = self.clone();
        for (l, m) in layers.iter().zip(masks) {
            out.params[l.param].1 = m.apply(&self.params[l.param].1)?;
        }
        Ok(out)
    }

    /// One [`MaskLogits`] per prunable layer, all logits set from `init`.
    pub fn mask_logits(&self, mut init: impl FnMut(&LayerRef, &Tensor<T>) -> Result<Tensor<T>>) -> Result<Vec<MaskLogits<T>>> {
        self.maskable_layers()
            .iter()
            .map(|l| {
                let w = self.layer_weights(l);
                let p = init(l, w)?;
                MaskLogits::new(l.layer_id, l.name.clone(), p, w.clone())
            })
            .collect()
    }
}

/// Byte-level tokens of a text file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub tokens: Vec<usize>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Self {
        Corpus {
            tokens: text.bytes().map(usize::from).collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Corpus {
            tokens: bytes.into_iter().map(usize::from).collect(),
        })
    }

    /// Disjoint `(train, held_out)` split. The text is cut into chunks of
    /// [`SPLIT_CHUNK`] tokens and every `round(1/fraction)`-th chunk is held
    /// out, so both sides see the same mix of material.
    pub fn split(&self, held_out_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(held_out_fraction > 0.0 && held_out_fraction < 1.0) {
            return Err(Error::invalid(format!("held-out fraction {held_out_fraction} outside (0, 1)")));
        }
        let every = (1.0 / held_out_fraction).round().max(2.0) as usize;
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (i, chunk) in self.tokens.chunks(SPLIT_CHUNK).enumerate() {
            if i % every == every - 1 {
                held.extend_from_slice(chunk);
            } else {
                train.extend_from_slice(chunk);
            }
        }
        Ok((train, held))
    }
}

/// Chunk length used by [`Corpus::split`].
pub const SPLIT_CHUNK: usize = 512;

/// Random training windows. The batch for a step depends only on
/// `(seed, step)`.
#[derive(Clone, Debug)]
pub struct CalibrationStream {
    tokens: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl CalibrationStream {
    pub fn new(tokens: Vec<usize>, batch_size: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || seq_len == 0 {
            return Err(Error::invalid("batch_size and seq_len must be positive"));
        }
        if tokens.len() < seq_len + 1 {
            return Err(Error::invalid(format!(
                "corpus of {} tokens is shorter than one window of {}",
                tokens.len(),
                seq_len + 1
            )));
        }
        Ok(CalibrationStream {
            tokens,
            batch_size,
            seq_len,
            seed,
        })
    }

    pub fn batch(&self, step: usize) -> TokenBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(mask::noise_seed(self.seed, usize::MAX, step));
        let hi = self.tokens.len() - self.seq_len;
        let windows: Vec<&[usize]> = (0..self.batch_size)
            .map(|_| {
                let start = rng.gen_range(0..hi);
                &self.tokens[start..start + self.seq_len + 1]
            })
            .collect();
        TokenBatch::from_windows(&windows).expect("windows have equal length")
    }
}

/// Consecutive non-overlapping windows over a held-out token sequence.
#[derive(Clone, Debug)]
pub struct EvalStream {
    tokens: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl EvalStream {
    pub fn new(tokens: Vec<usize>, batch_size: usize, seq_len: usize) -> Result<Self> {
        if batch_size == 0 || seq_len == 0 {
            return Err(Error::invalid("batch_size and seq_len must be positive"));
        }
        Ok(EvalStream {
            tokens,
            batch_size,
            seq_len,
        })
    }

    pub fn window_count(&self) -> usize {
        if self.tokens.len() < 2 {
            0
        } else {
            (self.tokens.len() - 1) / self.seq_len
        }
    }

    pub fn batches(&self) -> Result<Vec<TokenBatch>> {
        let n = self.window_count();
        if n == 0 {
            return Err(Error::invalid("empty evaluation stream"));
        }
        let windows: Vec<&[usize]> = (0..n)
            .map(|i| &self.tokens[i * self.seq_len..i * self.seq_len + self.seq_len + 1])
            .collect();
        windows
            .chunks(self.batch_size)
            .map(TokenBatch::from_windows)
            .collect()
    }
}

/// Settings for dense pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Linear warmup length in steps; the rate then decays by cosine to 10%.
    pub warmup: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1500,
            lr: 3e-3,
            warmup: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

/// Trains every parameter with Adam on next-token loss. Aborts on a
/// non-finite loss, naming the step.
pub fn pretrain_dense<T: Real>(
    model: &mut TinyCausalLM<T>,
    stream: &CalibrationStream,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    let shapes: Vec<usize> = model.params.iter().map(|(_, t)| t.numel()).collect();
    let mut opt = Adam::new(&shapes, AdamConfig::default());
    let mut report = PretrainReport::default();
    for step in 0..cfg.steps {
        let batch = stream.batch(step);
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let out = model.forward(&mut g, &batch, &vars)?;
        let loss = g.item(out.loss).to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                term: "lm",
                value: loss,
                step,
            });
        }
        report.losses.push(loss);
        let mut grads = g.backward(out.loss)?;
        let lr = lr_at(cfg, step);
        opt.set_lr(lr);
        for (i, v) in vars.iter().enumerate() {
            let gr = grads.take(*v).expect("trainable leaf has a gradient");
            opt.step(i, model.params[i].1.data_mut(), &gr);
        }
        opt.finish_step();
    }
    Ok(report)
}

fn lr_at(cfg: &PretrainConfig, step: usize) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    let span = (cfg.steps - cfg.warmup).max(1) as f64;
    let frac = (step - cfg.warmup) as f64 / span;
    cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}
