//! Command-line front end. Each subcommand is a thin wrapper over the
//! library; every file it writes goes through an atomic rename.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{allocation_report, count_patterns};
use crate::baselines::{baseline_masks, collect_activation_norms, BaselineMethod, Grouping};
use crate::checkpoint::{load_logits, load_masks, load_model, save_logits, save_masks, save_model, write_atomic};
use crate::error::{Error, Result};
use crate::mask::{finalize_mask, GumbelNoise, ScheduleShape};
use crate::model::{pretrain_dense, CalibrationStream, Corpus, EvalStream, MaskMode, ModelConfig, PretrainConfig, TinyCausalLM};
use crate::objective::WeightNorm;
use crate::sparse::export_sparse;
use crate::trainer::{ablation_csv, initialize_lm_logits, run_variant, train_masks, AblationVariant, InitMode, LmTask, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "maskprune", version, about = "Learned unstructured pruning masks for small causal language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a dense model on a text corpus.
    Pretrain(PretrainArgs),
    /// Learn pruning masks for a dense checkpoint.
    Prune(PruneArgs),
    /// One-shot Wanda or magnitude masks.
    Baseline(BaselineArgs),
    /// Held-out perplexity under a mask mode.
    Eval(EvalArgs),
    /// Run the ablation grid.
    Ablate(AblateArgs),
    /// Per-block density report for a mask file.
    Alloc(AllocArgs),
    /// Count unstructured patterns C(n, k).
    Patterns(PatternsArgs),
    /// Write a bitmap + values sparse checkpoint.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// UTF-8 text file, tokenized as bytes.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Fraction of the corpus held out for evaluation.
    #[arg(long, default_value_t = 0.1)]
    pub held_out: f64,
}

impl DataArgs {
    fn split(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        Corpus::load(&self.corpus)?.split(self.held_out)
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output dense checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 700)]
    pub steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 128)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub n_blocks: usize,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 128)]
    pub context_len: usize,
    #[arg(long, default_value_t = 4)]
    pub mlp_ratio: usize,
}

/// Overrides for every [`TrainConfig`] field. Unset flags keep the value
/// from `--config` or the desk profile.
#[derive(Debug, Default, Args)]
pub struct TrainFlags {
    /// Flat JSON file of TrainConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub tau0: Option<f64>,
    #[arg(long)]
    pub tau_t: Option<f64>,
    #[arg(long)]
    pub alpha0: Option<f64>,
    #[arg(long)]
    pub alpha_t: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub strength: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Fraction of weights removed; density is `1 - sparsity`.
    #[arg(long, alias = "sparsity")]
    pub target_sparsity: Option<f64>,
    #[arg(long = "init", alias = "init-mode", value_enum)]
    pub init_mode: Option<InitArg>,
    #[arg(long)]
    pub anneal_alpha: Option<bool>,
    #[arg(long)]
    pub anneal_tau: Option<bool>,
    #[arg(long, value_enum)]
    pub alpha_shape: Option<ShapeArg>,
    #[arg(long, value_enum)]
    pub tau_shape: Option<ShapeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long, value_enum)]
    pub weight_norm: Option<WeightNormArg>,
    #[arg(long)]
    pub snapshot_every: Option<usize>,
    #[arg(long)]
    pub norm_batches: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InitArg {
    Wanda,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ShapeArg {
    Linear,
    Geometric,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum WeightNormArg {
    Sum,
    Mean,
}

impl TrainFlags {
    /// Desk profile, then the config file, then explicit flags.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::from_json_file_over(&TrainConfig::desk(), p)?,
            None => TrainConfig::desk(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(
            steps,
            batch_size,
            seq_len,
            lr,
            tau0,
            tau_t,
            alpha0,
            alpha_t,
            lambda1,
            lambda2,
            strength,
            weight_decay,
            target_sparsity,
            anneal_alpha,
            anneal_tau,
            seed,
            adam_beta1,
            adam_beta2,
            adam_eps,
            snapshot_every,
            norm_batches
        );
        if let Some(v) = self.init_mode {
            c.init_mode = match v {
                InitArg::Wanda => InitMode::Wanda,
                InitArg::Random => InitMode::Random,
            };
        }
        let shape = |s: ShapeArg| match s {
            ShapeArg::Linear => ScheduleShape::Linear,
            ShapeArg::Geometric => ScheduleShape::Geometric,
        };
        if let Some(v) = self.alpha_shape {
            c.alpha_shape = shape(v);
        }
        if let Some(v) = self.tau_shape {
            c.tau_shape = shape(v);
        }
        if let Some(v) = self.weight_norm {
            c.weight_norm = match v {
                WeightNormArg::Sum => WeightNorm::Sum,
                WeightNormArg::Mean => WeightNorm::Mean,
            };
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    /// Dense checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory receiving logits.bin, masks.bin, train_log.csv and snapshots.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Wanda,
    Magnitude,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GroupingArg {
    PerRow,
    PerLayer,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Output mask file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = GroupingArg::PerRow)]
    pub grouping: GroupingArg,
    /// Calibration settings shared with `prune`.
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Dense,
    Binary,
    NoiseFree,
    Soft,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Binary)]
    pub mode: ModeArg,
    /// Mask file for binary mode.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Logits file for soft and noise-free modes.
    #[arg(long)]
    pub logits: Option<PathBuf>,
    #[arg(long, default_value_t = 350.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    /// Noise seed for soft mode.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Variants to run; all five when omitted.
    #[arg(long = "variant")]
    pub variants: Vec<String>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct AllocArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    /// CSV output; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PatternsArgs {
    #[arg(long)]
    pub n: u64,
    #[arg(long)]
    pub k: u64,
    /// Print the full report as JSON instead of the bare count.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn eval_stream(held: Vec<usize>, batch: usize, seq: usize) -> Result<EvalStream> {
    EvalStream::new(held, batch, seq)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Trains masks and writes all artifacts of one prune run into `dir`.
fn prune_into(model: &TinyCausalLM<f32>, train: Vec<usize>, config: &TrainConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let stream = CalibrationStream::new(train, config.batch_size, config.seq_len, config.seed)?;
    let before = model.weights_hash();
    let init = initialize_lm_logits(model, &stream, config)?;
    let outcome = train_masks(&LmTask { model, stream: &stream }, config, init)?;
    if model.weights_hash() != before {
        return Err(Error::invalid("frozen weights changed during mask training"));
    }
    let masks = finalize_mask(&outcome.logits, config.density())?;
    save_logits(&outcome.logits, dir.join("logits.bin"))?;
    save_masks(&masks, config.density(), dir.join("masks.bin"))?;
    outcome.log.write_csv(dir.join("train_log.csv"))?;
    outcome.log.write_snapshots_json(dir.join("snapshots.json"))?;
    write_atomic(&dir.join("config.json"), &serde_json::to_vec_pretty(config)?)
}

/// Executes a parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => {
            let (train, held) = a.data.split()?;
            let config = ModelConfig {
                embed_dim: a.embed_dim,
                n_blocks: a.n_blocks,
                n_heads: a.n_heads,
                context_len: a.context_len,
                mlp_ratio: a.mlp_ratio,
                ..ModelConfig::desk()
            };
            let mut model = TinyCausalLM::<f32>::new(config, a.seed)?;
            let stream = CalibrationStream::new(train, a.batch_size, a.seq_len, a.seed)?;
            let cfg = PretrainConfig {
                steps: a.steps,
                lr: a.lr,
                warmup: a.warmup.min(a.steps),
            };
            let report = pretrain_dense(&mut model, &stream, &cfg)?;
            save_model(&model, &a.out)?;
            let ppl = model.perplexity(&MaskMode::Dense, &eval_stream(held, 8, a.seq_len)?)?;
            writeln!(
                out,
                "final train loss {:.4}, held-out perplexity {ppl:.4}",
                report.losses.last().copied().unwrap_or(f64::NAN)
            )
            .map_err(io_err)?;
        }
        Command::Prune(a) => {
            let config = a.train.resolve()?;
            let model: TinyCausalLM<f32> = load_model(&a.model)?;
            let (train, _) = a.data.split()?;
            prune_into(&model, train, &config, &a.out_dir)?;
            writeln!(out, "wrote {}", a.out_dir.display()).map_err(io_err)?;
        }
        Command::Baseline(a) => {
            let config = a.train.resolve()?;
            let model: TinyCausalLM<f32> = load_model(&a.model)?;
            let (train, _) = a.data.split()?;
            let grouping = match a.grouping {
                GroupingArg::PerRow => Grouping::PerRow,
                GroupingArg::PerLayer => Grouping::PerLayer,
            };
            let (method, norms) = match a.method {
                MethodArg::Magnitude => (BaselineMethod::Magnitude, None),
                MethodArg::Wanda => {
                    let stream = CalibrationStream::new(train, config.batch_size, config.seq_len, config.seed)?;
                    (BaselineMethod::Wanda, Some(collect_activation_norms(&model, &stream, config.norm_batches)?))
                }
            };
            let masks = baseline_masks(&model, method, norms.as_ref(), config.density(), grouping)?;
            save_masks(&masks, config.density(), &a.out)?;
            writeln!(out, "wrote {}", a.out.display()).map_err(io_err)?;
        }
        Command::Eval(a) => {
            let model: TinyCausalLM<f32> = load_model(&a.model)?;
            let (_, held) = a.data.split()?;
            let stream = eval_stream(held, a.batch_size, a.seq_len)?;
            let need = |p: &Option<PathBuf>, flag: &str| {
                p.clone()
                    .ok_or_else(|| Error::MissingMasks(format!("--mode {:?} needs {flag}", a.mode)))
            };
            let ppl = match a.mode {
                ModeArg::Dense => model.perplexity(&MaskMode::Dense, &stream)?,
                ModeArg::Binary => {
                    let (masks, _) = load_masks(&model, need(&a.masks, "--masks")?)?;
                    model.perplexity(&MaskMode::Binary(&masks), &stream)?
                }
                ModeArg::NoiseFree => {
                    let logits = load_logits(&model, need(&a.logits, "--logits")?)?;
                    model.perplexity(
                        &MaskMode::NoiseFree {
                            logits: &logits,
                            alpha: a.alpha,
                            tau: a.tau,
                        },
                        &stream,
                    )?
                }
                ModeArg::Soft => {
                    let logits = load_logits(&model, need(&a.logits, "--logits")?)?;
                    let noise: Vec<GumbelNoise<f32>> = logits
                        .iter()
                        .map(|l| GumbelNoise::for_step(l.logits().shape(), a.seed, l.layer_id, 0))
                        .collect();
                    model.perplexity(
                        &MaskMode::Soft {
                            logits: &logits,
                            alpha: a.alpha,
                            tau: a.tau,
                            noise: &noise,
                        },
                        &stream,
                    )?
                }
            };
            writeln!(out, "{ppl}").map_err(io_err)?;
        }
        Command::Ablate(a) => {
            let base = a.train.resolve()?;
            let variants: Vec<AblationVariant> = if a.variants.is_empty() {
                AblationVariant::ALL.to_vec()
            } else {
                a.variants.iter().map(|v| v.parse()).collect::<Result<_>>()?
            };
            let model: TinyCausalLM<f32> = load_model(&a.model)?;
            let (train, held) = a.data.split()?;
            let stream = CalibrationStream::new(train, base.batch_size, base.seq_len, base.seed)?;
            let eval = eval_stream(held, 8, base.seq_len)?;
            create_dir(&a.out_dir)?;
            let mut rows = Vec::new();
            for v in variants {
                let before = model.weights_hash();
                let (row, outcome) = run_variant(v, &base, &model, &stream, &eval)?;
                if model.weights_hash() != before {
                    return Err(Error::invalid("frozen weights changed during mask training"));
                }
                let dir = a.out_dir.join(v.name());
                create_dir(&dir)?;
                outcome.log.write_csv(dir.join("train_log.csv"))?;
                outcome.log.write_snapshots_json(dir.join("snapshots.json"))?;
                writeln!(out, "{}: perplexity {:.4}", row.variant, row.perplexity).map_err(io_err)?;
                rows.push(row);
            }
            write_atomic(&a.out_dir.join("ablation.csv"), &ablation_csv(&rows)?)?;
        }
        Command::Alloc(a) => {
            let model: TinyCausalLM<f32> = load_model(&a.model)?;
            let (masks, _) = load_masks(&model, &a.masks)?;
            let blocks: Vec<usize> = model.maskable_layers().iter().map(|l| l.block).collect();
            let report = allocation_report(&masks, |m| blocks[m.layer_id]);
            let csv = report.to_csv()?;
            match &a.out {
                Some(p) => write_atomic(p, &csv)?,
                None => out.write_all(&csv).map_err(io_err)?,
            }
        }
        Command::Patterns(a) => {
            let r = count_patterns(a.n, a.k)?;
            if a.json {
                writeln!(out, "{}", serde_json::to_string_pretty(&r)?).map_err(io_err)?;
            } else {
                writeln!(out, "{}", r.exact).map_err(io_err)?;
            }
        }
        Command::Export(a) => {
            let model: TinyCausalLM<f32> = load_model(&a.model)?;
            let (masks, _) = load_masks(&model, &a.masks)?;
            let ck = export_sparse(&model, &masks, &a.out)?;
            writeln!(out, "kept {} of {} weights", ck.kept(), ck.total()).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; usage and errors go to `err`.
pub fn main_with_args<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}
