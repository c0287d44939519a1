//! Command-line interface: operator generation, training, reconstruction,
//! evaluation, the memory-variant ablation sweep, analysis export, and the
//! built-in selftest.
//!
//! Option precedence, lowest to highest: built-in defaults → `--config`
//! TOML file → `MADUN_SEED` environment variable → command-line flags.
//! Every run writes `manifest-<command>.json` into the output directory
//! with the resolved configuration. Exit codes: 0 on success, 1 on
//! data/config/contract failures, 2 on usage errors.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{
    gate_norms_csv, gate_weight_norms, spectral_csv, spectral_density, SpectralCurve,
    DEFAULT_SPECTRAL_BINS,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{
    load_operator, read_mask, save_gaussian_operator, save_mri_operator, LoadedOperator, Manifest,
    RunConfig,
};
use crate::cs::{build_gaussian_operator, BlockGrid, GaussianOperator, MRIOperator};
use crate::error::{Error, Result};
use crate::metrics::{psnr, reconstruct_image, ssim, EvalReport, ImageScore};
use crate::model::{
    model_forward, model_forward_values, ClmVariant, ForwardSpec, HsmVariant, Measurements,
    ModelConfig, ModelParams, OperatorKind, OperatorRef,
};
use crate::pgm;
use crate::tensor::Tensor;
use crate::trainer::{make_dataset, train, Dataset, SamplePair, TrainConfig, TrainState};

/// Parses `argv` and executes; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version print to stdout and exit 0; genuine usage errors
            // (unknown subcommand or flag) print to stderr and exit 2.
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e);
            1
        }
    }
}

#[derive(Parser)]
#[command(
    name = "madun",
    version,
    about = "Memory-augmented deep unfolding for block-based compressive sensing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a sampling operator and write its descriptor file.
    GenOperator(GenOperatorCmd),
    /// Train a model with the two-phase schedule, checkpointing every epoch.
    Train(TrainCmd),
    /// Reconstruct PGM image(s) through a trained model.
    Reconstruct(ReconstructCmd),
    /// Score a checkpoint on a directory of PGM images.
    Evaluate(EvaluateCmd),
    /// Train all eight memory-variant combinations on a toy set and report.
    Ablate(AblateCmd),
    /// Export gate-norm and spectral-density CSVs from a checkpoint.
    Analyze(AnalyzeCmd),
    /// Run the built-in oracle and consistency checks.
    Selftest(SelftestCmd),
}

/// Flags shared by every subcommand. Any flag given here overrides the
/// corresponding config-file value.
#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config file with [model], [train], [paths] sections.
    #[arg(long)]
    config: Option<PathBuf>,

    // --- model overrides ---
    /// Stage count K.
    #[arg(long)]
    stages: Option<usize>,
    /// Feature channels C.
    #[arg(long)]
    channels: Option<usize>,
    /// HSM variant: none|star|circle|rb2.
    #[arg(long)]
    hsm: Option<String>,
    /// CLM variant: none|plus|concat|lstm.
    #[arg(long)]
    clm: Option<String>,
    /// Operator kind: gaussian|mri.
    #[arg(long)]
    operator_kind: Option<String>,
    /// Measurement ratio M/N in (0, 1].
    #[arg(long)]
    ratio: Option<f64>,

    // --- train overrides ---
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Phase-1 epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Phase-2 (whole-image fine-tune) epochs.
    #[arg(long)]
    phase2_epochs: Option<usize>,
    /// Sampling block edge.
    #[arg(long)]
    block: Option<usize>,
    /// Phase-2 composite edge.
    #[arg(long)]
    big_block: Option<usize>,
    /// Stride of the overlapping unfold inside phase-2 composites.
    #[arg(long)]
    phase2_stride: Option<usize>,
    /// RNG seed (flags beat the MADUN_SEED environment variable).
    #[arg(long)]
    seed: Option<u64>,
    /// Train the sampling matrix jointly with the model.
    #[arg(long)]
    learnable_phi: Option<bool>,

    // --- paths ---
    /// Training images directory (phase 1; default evaluate set).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Phase-2 source images directory (defaults to --data).
    #[arg(long)]
    phase2_data: Option<PathBuf>,
    /// Operator descriptor file.
    #[arg(long)]
    operator_file: Option<PathBuf>,
    /// Model checkpoint path.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// MRI sampling mask (8-bit PGM, nonzero = sampled).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Output directory for manifests, reports, and reconstructions.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    /// Defaults → config file → MADUN_SEED → these flags.
    ///
    /// Commands that never enter phase-2 training ignore its geometry
    /// (big_block/phase2_stride interactions) during validation.
    fn resolve_for(&self, trains: bool) -> Result<RunConfig> {
        let cfg = self.merged()?;
        let mut check = cfg.clone();
        if !trains {
            check.train.epochs_phase2 = 0;
        }
        check.validate()?;
        Ok(cfg)
    }

    fn resolve(&self) -> Result<RunConfig> {
        self.resolve_for(false)
    }

    fn merged(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(v) = self.stages {
            cfg.model.stages = v;
        }
        if let Some(v) = self.channels {
            cfg.model.channels = v;
        }
        if let Some(s) = &self.hsm {
            cfg.model.hsm = s.parse()?;
        }
        if let Some(s) = &self.clm {
            cfg.model.clm = s.parse()?;
        }
        if let Some(s) = &self.operator_kind {
            cfg.model.operator = s.parse()?;
        }
        if let Some(v) = self.ratio {
            cfg.model.ratio = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.batch {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs_phase1 = v;
        }
        if let Some(v) = self.phase2_epochs {
            cfg.train.epochs_phase2 = v;
        }
        if let Some(v) = self.block {
            cfg.train.block = v;
        }
        if let Some(v) = self.big_block {
            cfg.train.big_block = v;
        }
        if let Some(v) = self.phase2_stride {
            cfg.train.phase2_stride = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.learnable_phi {
            cfg.train.learnable_phi = v;
        }
        if self.data.is_some() {
            cfg.paths.data_dir = self.data.clone();
        }
        if self.phase2_data.is_some() {
            cfg.paths.phase2_dir = self.phase2_data.clone();
        }
        if self.operator_file.is_some() {
            cfg.paths.operator = self.operator_file.clone();
        }
        if self.checkpoint.is_some() {
            cfg.paths.checkpoint = self.checkpoint.clone();
        }
        if self.mask.is_some() {
            cfg.paths.mask = self.mask.clone();
        }
        if let Some(out) = &self.out {
            cfg.paths.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenOperatorCmd {
    #[command(flatten)]
    common: Common,
    /// Destination descriptor path (default: <out>/operator.json or
    /// [paths].operator).
    #[arg(long)]
    out_file: Option<PathBuf>,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    common: Common,
    /// Resume from the checkpoint path instead of initializing fresh.
    #[arg(long)]
    resume: bool,
    /// Apply the 8-fold dihedral augmentation to training blocks.
    #[arg(long)]
    augment: Option<bool>,
}

#[derive(Args)]
struct ReconstructCmd {
    #[command(flatten)]
    common: Common,
    /// Input PGM file or directory of PGM files.
    #[arg(long)]
    input: PathBuf,
    /// Overlapping-unfold stride for whole-image reconstruction.
    #[arg(long, default_value_t = 22)]
    stride: usize,
}

#[derive(Args)]
struct EvaluateCmd {
    #[command(flatten)]
    common: Common,
    /// Overlapping-unfold stride for whole-image reconstruction.
    #[arg(long, default_value_t = 22)]
    stride: usize,
}

#[derive(Args)]
struct AblateCmd {
    #[command(flatten)]
    common: Common,
    /// Number of training blocks in the toy corpus.
    #[arg(long, default_value_t = 20)]
    blocks: usize,
    /// Optimizer steps per variant (full-batch, so steps = epochs).
    #[arg(long, default_value_t = 150)]
    steps: usize,
}

#[derive(Args)]
struct AnalyzeCmd {
    #[command(flatten)]
    common: Common,
    /// PGM file or directory feeding the spectral curves (default: --data).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Radial frequency bins.
    #[arg(long, default_value_t = DEFAULT_SPECTRAL_BINS)]
    bins: usize,
}

#[derive(Args)]
struct SelftestCmd {
    #[command(flatten)]
    common: Common,
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenOperator(c) => cmd_gen_operator(c),
        Command::Train(c) => cmd_train(c),
        Command::Reconstruct(c) => cmd_reconstruct(c),
        Command::Evaluate(c) => cmd_evaluate(c),
        Command::Ablate(c) => cmd_ablate(c),
        Command::Analyze(c) => cmd_analyze(c),
        Command::Selftest(c) => cmd_selftest(c),
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// A single PGM file, or every `*.pgm` in a directory (sorted).
fn list_pgms(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "pgm").unwrap_or(false))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::data(format!(
                "no PGM images found in {}",
                path.display()
            )));
        }
        Ok(files)
    } else if path.exists() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(Error::data(format!("no such image: {}", path.display())))
    }
}

fn image_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn manifest_argv() -> Vec<String> {
    std::env::args().skip(1).collect()
}

/// Loads the inference view of a checkpoint: metadata, model parameters,
/// and the sampling matrix it was trained with.
fn load_model(path: &Path) -> Result<(CheckpointMeta, ModelParams<f64>, Tensor<f64>)> {
    let mut ckpt = load_checkpoint::<f64>(path)?;
    let config = ckpt.meta.config.clone();
    let mut params = ModelParams::<f64>::zeros(&config);
    let mut problems = Vec::new();
    params.walk_mut(|name, t| match ckpt.get(name) {
        Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
        Some(src) => problems.push(format!(
            "{} has shape {:?}, expected {:?}",
            name,
            src.shape(),
            t.shape()
        )),
        None => problems.push(format!("{} is missing", name)),
    });
    if !problems.is_empty() {
        return Err(Error::checkpoint(format!(
            "{}: {}",
            path.display(),
            problems.join("; ")
        )));
    }
    let phi = ckpt
        .take("phi")
        .ok_or_else(|| Error::checkpoint(format!("{}: tensor 'phi' is missing", path.display())))?;
    Ok((ckpt.meta, params, phi))
}

fn required_checkpoint(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.paths.checkpoint.clone().ok_or_else(|| {
        Error::config("a checkpoint is required (set --checkpoint or [paths].checkpoint)")
    })
}

/// Rebuilds the sampling operator a loaded model should run with. Gaussian
/// models carry their Φ in the checkpoint; MRI models need the mask (or an
/// operator descriptor) supplied alongside.
fn inference_operator(
    cfg: &RunConfig,
    meta: &CheckpointMeta,
    phi: Tensor<f64>,
) -> Result<LoadedOperator> {
    match meta.config.operator {
        OperatorKind::Gaussian => Ok(LoadedOperator::Gaussian(GaussianOperator::from_phi(
            phi,
            meta.config.ratio,
            meta.learn_phi,
            meta.seed,
        )?)),
        OperatorKind::Mri => {
            if let Some(file) = &cfg.paths.operator {
                match load_operator(file)? {
                    LoadedOperator::Mri(op) => Ok(LoadedOperator::Mri(op)),
                    LoadedOperator::Gaussian(_) => Err(Error::config(format!(
                        "{}: model expects an MRI operator but the descriptor is gaussian",
                        file.display()
                    ))),
                }
            } else if let Some(mask) = &cfg.paths.mask {
                Ok(LoadedOperator::Mri(MRIOperator::new(read_mask(mask)?)?))
            } else {
                Err(Error::config(
                    "an MRI model needs --mask or --operator-file to reconstruct",
                ))
            }
        }
    }
}

fn ssim_if_measurable(a: &Tensor<f64>, b: &Tensor<f64>) -> Option<f64> {
    if a.shape()[0] >= 11 && a.shape()[1] >= 11 {
        ssim(a, b).ok()
    } else {
        None
    }
}

// ---------------------------------------------------------------------------
// gen-operator
// ---------------------------------------------------------------------------

fn max_gram_deviation(op: &GaussianOperator<f64>) -> f64 {
    use crate::scalar::Scalar;
    let m = op.m();
    let phi = op.phi();
    let mut gram = vec![0.0f64; m * m];
    f64::gemm_nt(m, op.n(), m, 1.0, phi.data(), phi.data(), 0.0, &mut gram);
    let mut worst = 0.0f64;
    for r in 0..m {
        for c in 0..m {
            let want = if r == c { 1.0 } else { 0.0 };
            worst = worst.max((gram[r * m + c] - want).abs());
        }
    }
    worst
}

fn cmd_gen_operator(c: GenOperatorCmd) -> Result<()> {
    let cfg = c.common.resolve()?;
    let dest = c
        .out_file
        .or_else(|| cfg.paths.operator.clone())
        .unwrap_or_else(|| cfg.paths.output_dir.join("operator.json"));
    match cfg.model.operator {
        OperatorKind::Gaussian => {
            let n = cfg.train.block * cfg.train.block;
            let op = save_gaussian_operator(&dest, cfg.model.ratio, n, cfg.train.seed)?;
            println!(
                "gaussian operator: {}x{} (ratio {:.4}, seed {}), max|ΦΦᵀ−I| = {:.3e}",
                op.m(),
                op.n(),
                cfg.model.ratio,
                cfg.train.seed,
                max_gram_deviation(&op)
            );
        }
        OperatorKind::Mri => {
            let mask = cfg.paths.mask.clone().ok_or_else(|| {
                Error::config("generating an MRI operator needs --mask (8-bit PGM)")
            })?;
            let op = save_mri_operator(&dest, &mask)?;
            println!(
                "mri operator: {}x{} mask, sampling fraction {:.4}",
                op.height(),
                op.width(),
                op.sampling_fraction()
            );
        }
    }
    println!("wrote {}", dest.display());
    Manifest::new("gen-operator", &manifest_argv(), &cfg).write(&cfg.paths.output_dir)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(c: TrainCmd) -> Result<()> {
    let cfg = c.common.resolve_for(true)?;
    if cfg.model.operator != OperatorKind::Gaussian {
        return Err(Error::config(
            "training is defined for the gaussian operator; MRI models are evaluation-only",
        ));
    }
    let data_dir = cfg.paths.data_dir.clone().ok_or_else(|| {
        Error::config("training images are required (set --data or [paths].data_dir)")
    })?;
    let ckpt_path = cfg
        .paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.paths.output_dir.join("model.ckpt"));
    let augment = c.augment.unwrap_or(true);
    let n = cfg.train.block * cfg.train.block;

    let mut state = if c.resume {
        let state = TrainState::<f64>::from_checkpoint(load_checkpoint(&ckpt_path)?, &cfg.model)?;
        println!(
            "resuming from {} at epoch {}",
            ckpt_path.display(),
            state.epoch
        );
        state
    } else {
        let op = match &cfg.paths.operator {
            Some(file) => match load_operator(file)? {
                LoadedOperator::Gaussian(op) => {
                    if op.n() != n {
                        return Err(Error::config(format!(
                            "operator block size {} does not match configured block {}",
                            op.n(),
                            n
                        )));
                    }
                    if (op.ratio() - cfg.model.ratio).abs() > 1e-12 {
                        return Err(Error::config(format!(
                            "operator ratio {} does not match configured ratio {}",
                            op.ratio(),
                            cfg.model.ratio
                        )));
                    }
                    op
                }
                LoadedOperator::Mri(_) => {
                    return Err(Error::config(
                        "training requires a gaussian operator descriptor",
                    ))
                }
            },
            None => build_gaussian_operator(cfg.model.ratio, n, cfg.train.seed)?,
        };
        TrainState::new(&cfg.model, &cfg.train, op)
    };

    Manifest::new("train", &manifest_argv(), &cfg).write(&cfg.paths.output_dir)?;

    let phase1 = make_dataset(
        &data_dir,
        cfg.train.block,
        cfg.train.block,
        augment,
        cfg.train.seed,
        &state.op,
        None,
    )?;
    let phase2 = if cfg.train.epochs_phase2 > 0 {
        let dir = cfg.paths.phase2_dir.clone().unwrap_or(data_dir);
        let inner = BlockGrid::new(
            cfg.train.big_block,
            cfg.train.big_block,
            cfg.train.block,
            cfg.train.phase2_stride,
        )?;
        Some(make_dataset(
            &dir,
            cfg.train.big_block,
            cfg.train.big_block,
            augment,
            cfg.train.seed,
            &state.op,
            Some(&inner),
        )?)
    } else {
        None
    };
    println!(
        "training K={} C={} hsm={} clm={} ratio={:.3}: {} phase-1 pairs{}, {} epochs",
        cfg.model.stages,
        cfg.model.channels,
        cfg.model.hsm,
        cfg.model.clm,
        cfg.model.ratio,
        phase1.pairs.len(),
        phase2
            .as_ref()
            .map(|d| format!(" + {} composites", d.pairs.len()))
            .unwrap_or_default(),
        cfg.train.total_epochs(),
    );

    let total = cfg.train.total_epochs();
    train(
        &mut state,
        &cfg.model,
        &cfg.train,
        &phase1,
        phase2.as_ref(),
        |st| {
            save_checkpoint(&ckpt_path, &st.to_checkpoint(&cfg.model, &cfg.train))?;
            println!(
                "epoch {:>4}/{}  loss {:.6e}",
                st.epoch,
                total,
                st.loss_history.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        },
    )?;
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// reconstruct / evaluate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ReconstructionSidecar {
    image: String,
    reconstruction: String,
    psnr: f64,
    ssim: Option<f64>,
    stride: usize,
    ratio: f64,
    stages: usize,
    channels: usize,
    hsm: String,
    clm: String,
    checkpoint: String,
}

fn cmd_reconstruct(c: ReconstructCmd) -> Result<()> {
    let cfg = c.common.resolve()?;
    let ckpt_path = required_checkpoint(&cfg)?;
    let (meta, params, phi) = load_model(&ckpt_path)?;
    let op = inference_operator(&cfg, &meta, phi)?;
    let out_dir = &cfg.paths.output_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    for path in list_pgms(&c.input)? {
        let img = pgm::read_pgm(&path)?;
        let rec = reconstruct_image(&img, op.as_operator_ref(), &params, &meta.config, c.stride)?;
        let name = image_name(&path);
        let rec_path = out_dir.join(format!("{}.rec.pgm", name));
        pgm::write_pgm(&rec_path, &rec)?;
        let p = psnr(&img, &rec)?;
        let s = ssim_if_measurable(&img, &rec);
        let sidecar = ReconstructionSidecar {
            image: path.display().to_string(),
            reconstruction: rec_path.display().to_string(),
            psnr: p,
            ssim: s,
            stride: c.stride,
            ratio: meta.config.ratio,
            stages: meta.config.stages,
            channels: meta.config.channels,
            hsm: meta.config.hsm.to_string(),
            clm: meta.config.clm.to_string(),
            checkpoint: ckpt_path.display().to_string(),
        };
        let json_path = out_dir.join(format!("{}.rec.json", name));
        std::fs::write(
            &json_path,
            serde_json::to_string_pretty(&sidecar).expect("sidecar serialization"),
        )
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
        match s {
            Some(s) => println!("{}  psnr {:.4} dB  ssim {:.4}", name, p, s),
            None => println!("{}  psnr {:.4} dB", name, p),
        }
    }
    Manifest::new("reconstruct", &manifest_argv(), &cfg).write(out_dir)?;
    Ok(())
}

fn cmd_evaluate(c: EvaluateCmd) -> Result<()> {
    let cfg = c.common.resolve()?;
    let ckpt_path = required_checkpoint(&cfg)?;
    let data_dir = cfg.paths.data_dir.clone().ok_or_else(|| {
        Error::config("evaluation images are required (set --data or [paths].data_dir)")
    })?;
    let (meta, params, phi) = load_model(&ckpt_path)?;
    let op = inference_operator(&cfg, &meta, phi)?;

    let mut scores = Vec::new();
    for path in list_pgms(&data_dir)? {
        let img = pgm::read_pgm(&path)?;
        let rec = reconstruct_image(&img, op.as_operator_ref(), &params, &meta.config, c.stride)?;
        scores.push(ImageScore {
            name: image_name(&path),
            psnr: psnr(&img, &rec)?,
            ssim: ssim(&img, &rec)?,
        });
    }
    let report = EvalReport::new(
        scores,
        &meta.config,
        c.stride,
        &ckpt_path.display().to_string(),
    );
    print!("{}", report.to_table());

    let out_dir = &cfg.paths.output_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let json_path = out_dir.join("eval.json");
    std::fs::write(&json_path, report.to_json())
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    println!("report written to {}", json_path.display());
    Manifest::new("evaluate", &manifest_argv(), &cfg).write(out_dir)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

/// The ablation grid: the published six cases plus the two remaining
/// (hsm, clm ∈ {none, lstm}) combinations.
pub const ABLATION_CASES: [(&str, HsmVariant, ClmVariant); 8] = [
    ("(a)", HsmVariant::None, ClmVariant::None),
    ("(b)", HsmVariant::None, ClmVariant::Lstm),
    ("(c)", HsmVariant::Star, ClmVariant::None),
    ("(d)", HsmVariant::Circle, ClmVariant::None),
    ("(e)", HsmVariant::Rb2, ClmVariant::None),
    ("(f)", HsmVariant::Rb2, ClmVariant::Lstm),
    ("(g)", HsmVariant::Star, ClmVariant::Lstm),
    ("(h)", HsmVariant::Circle, ClmVariant::Lstm),
];

#[derive(Clone, Debug)]
pub struct AblateOptions {
    /// Full-batch optimizer steps per variant.
    pub steps: usize,
    pub lr: f64,
    pub stages: usize,
    pub channels: usize,
    pub ratio: f64,
    /// Shared seed: identical operator, init, and batch order per variant.
    pub seed: u64,
}

impl Default for AblateOptions {
    fn default() -> Self {
        Self {
            steps: 150,
            lr: 1e-3,
            stages: 3,
            channels: 8,
            ratio: 0.25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblateRow {
    pub case: String,
    pub hsm: String,
    pub clm: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Percent decrease of the smoothed loss from start to end.
    pub loss_decrease_pct: f64,
    /// Mean PSNR over the memorized training blocks.
    pub psnr: f64,
    /// Mean SSIM; absent when the blocks are smaller than the 11×11 window.
    pub ssim: Option<f64>,
}

/// Smooth synthetic luminance blocks (sums of low-frequency sinusoids,
/// min-max normalized to [0, 1]); deterministic in `seed`.
pub fn synthetic_blocks(count: usize, block: usize, seed: u64) -> Vec<Tensor<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let terms: Vec<(f64, f64, f64, f64)> = (0..4)
                .map(|_| {
                    (
                        rng.gen_range(0.3..1.0),
                        rng.gen_range(0.25..2.5),
                        rng.gen_range(0.25..2.5),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            let mut img = Tensor::from_fn(&[block, block], |idx| {
                let (i, j) = ((idx / block) as f64, (idx % block) as f64);
                terms
                    .iter()
                    .map(|(a, fi, fj, ph)| {
                        a * (std::f64::consts::TAU * (fi * i + fj * j) / block as f64 + ph).sin()
                    })
                    .sum::<f64>()
            });
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &v in img.data() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let span = (hi - lo).max(1e-9);
            for v in img.data_mut() {
                *v = (*v - lo) / span;
            }
            img
        })
        .collect()
}

/// Trains every ablation case on the same blocks with the same seed and
/// budget; `progress` sees each finished row.
pub fn ablation_sweep(
    blocks: &[Tensor<f64>],
    opts: &AblateOptions,
    mut progress: impl FnMut(&AblateRow),
) -> Result<Vec<AblateRow>> {
    if blocks.is_empty() {
        return Err(Error::data("ablation needs at least one block"));
    }
    let block = blocks[0].shape()[0];
    for b in blocks {
        if b.ndim() != 2 || b.shape() != [block, block] {
            return Err(Error::shape(
                "ablation_sweep",
                format!("[{0},{0}] blocks", block),
                format!("{:?}", b.shape()),
            ));
        }
    }
    let n = block * block;
    let op = build_gaussian_operator::<f64>(opts.ratio, n, opts.seed)?;
    let pairs: Vec<SamplePair<f64>> = blocks
        .iter()
        .map(|b| {
            let x = b.reshape(&[n])?;
            let y = op.sample(&x)?;
            Ok(SamplePair { y, x })
        })
        .collect::<Result<_>>()?;
    let dataset = Dataset { pairs, block };
    let rows_gt = Tensor::from_fn(&[blocks.len(), n], |i| blocks[i / n].data()[i % n]);

    let mut rows = Vec::with_capacity(ABLATION_CASES.len());
    for (label, hsm, clm) in ABLATION_CASES {
        let model_cfg = ModelConfig {
            stages: opts.stages,
            channels: opts.channels,
            hsm,
            clm,
            operator: OperatorKind::Gaussian,
            ratio: opts.ratio,
        };
        let train_cfg = TrainConfig {
            lr: opts.lr,
            batch_size: blocks.len(),
            epochs_phase1: opts.steps,
            epochs_phase2: 0,
            block,
            big_block: block,
            phase2_stride: block,
            seed: opts.seed,
            learnable_phi: false,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&model_cfg, &train_cfg, op.clone());
        train(&mut state, &model_cfg, &train_cfg, &dataset, None, |_| {
            Ok(())
        })?;

        // Full-batch training: one step per epoch, so the history is the
        // per-step loss curve. Smooth by averaging the first and last tenth.
        let losses = &state.loss_history;
        let window = (losses.len() / 10).max(1);
        let initial = losses[..window].iter().sum::<f64>() / window as f64;
        let fin = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;

        let out = model_forward_values(
            &state.params,
            &model_cfg,
            OperatorRef::Gaussian(&state.op),
            Measurements::GaussianFromBlocks(rows_gt.clone()),
        )?;
        let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
        let ssim_ok = block >= 11;
        for (r, gt) in blocks.iter().enumerate() {
            let rec = Tensor::from_fn(&[block, block], |i| {
                (out.data()[r * n + i] * 255.0).clamp(0.0, 255.0)
            });
            let reference = gt.map(|v| v * 255.0);
            psnr_sum += psnr(&reference, &rec)?;
            if ssim_ok {
                ssim_sum += ssim(&reference, &rec)?;
            }
        }
        let row = AblateRow {
            case: label.to_string(),
            hsm: hsm.to_string(),
            clm: clm.to_string(),
            initial_loss: initial,
            final_loss: fin,
            loss_decrease_pct: 100.0 * (1.0 - fin / initial),
            psnr: psnr_sum / blocks.len() as f64,
            ssim: ssim_ok.then(|| ssim_sum / blocks.len() as f64),
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Renders the sweep in the published table's shape: one row per case with
/// the memory-mechanism columns ticked.
pub fn ablation_table(rows: &[AblateRow]) -> String {
    let mut out = String::new();
    out.push_str("case  *HSM  oHSM  HSM  CLM  PSNR(dB)/SSIM    loss decrease\n");
    for r in rows {
        let tick = |on: bool| if on { "x" } else { "-" };
        let ssim = r
            .ssim
            .map(|s| format!("{:.4}", s))
            .unwrap_or_else(|| "--".to_string());
        out.push_str(&format!(
            "{:<4}  {:^4}  {:^4}  {:^3}  {:^3}  {:>7.2}/{}   {:>6.2}%\n",
            r.case,
            tick(r.hsm == "star"),
            tick(r.hsm == "circle"),
            tick(r.hsm == "rb2"),
            tick(r.clm == "lstm"),
            r.psnr,
            ssim,
            r.loss_decrease_pct
        ));
    }
    out
}

fn cmd_ablate(c: AblateCmd) -> Result<()> {
    let cfg = c.common.resolve()?;
    // Toy-scale defaults unless explicitly overridden; the sweep is a
    // qualitative comparison, not full training.
    let opts = AblateOptions {
        steps: c.steps,
        lr: c.common.lr.unwrap_or(1e-3),
        stages: c.common.stages.unwrap_or(3),
        channels: c.common.channels.unwrap_or(8),
        ratio: cfg.model.ratio,
        seed: cfg.train.seed,
    };
    let blocks: Vec<Tensor<f64>> = match &cfg.paths.data_dir {
        Some(dir) => {
            let ds = make_dataset(
                dir,
                cfg.train.block,
                cfg.train.block,
                false,
                cfg.train.seed,
                &build_gaussian_operator::<f64>(opts.ratio, cfg.train.block * cfg.train.block, opts.seed)?,
                None,
            )?;
            ds.pairs
                .into_iter()
                .take(c.blocks)
                .map(|p| p.x.reshape(&[cfg.train.block, cfg.train.block]))
                .collect::<Result<_>>()?
        }
        None => synthetic_blocks(c.blocks, cfg.train.block, cfg.train.seed),
    };
    println!(
        "ablation: {} blocks of {}px, {} steps, lr {:.1e}, K={}, C={}, ratio {:.3}, seed {}",
        blocks.len(),
        cfg.train.block,
        opts.steps,
        opts.lr,
        opts.stages,
        opts.channels,
        opts.ratio,
        opts.seed
    );
    let rows = ablation_sweep(&blocks, &opts, |row| {
        println!(
            "{} hsm={:<6} clm={:<4}  loss {:.4e} -> {:.4e} ({:.1}%)  psnr {:.2}",
            row.case,
            row.hsm,
            row.clm,
            row.initial_loss,
            row.final_loss,
            row.loss_decrease_pct,
            row.psnr
        );
    })?;
    print!("{}", ablation_table(&rows));

    let out_dir = &cfg.paths.output_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let json_path = out_dir.join("ablation.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&rows).expect("ablation serialization"),
    )
    .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    println!("report written to {}", json_path.display());
    Manifest::new("ablate", &manifest_argv(), &cfg).write(out_dir)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

/// Per-stage mean spectral curves of the model's memory features over a set
/// of images, plus the name of the feature analyzed (`h`, `z`, or `x`).
fn spectral_curves_for_images(
    images: &[PathBuf],
    params: &ModelParams<f64>,
    meta: &CheckpointMeta,
    op: &LoadedOperator,
    bins: usize,
) -> Result<(Vec<(usize, SpectralCurve)>, &'static str)> {
    let stages = meta.config.stages;
    let mut sums: Vec<Vec<f64>> = vec![vec![0.0; bins]; stages];
    let mut freqs: Vec<f64> = Vec::new();
    let mut slices = 0usize;
    let mut feature_name: Option<&'static str> = None;

    for path in images {
        let img = pgm::read_pgm(path)?;
        let unit = img.map(|v| v / 255.0);
        let (h, w) = (img.shape()[0], img.shape()[1]);

        let (measurements, op_ref) = match op {
            LoadedOperator::Gaussian(g) => {
                let block = (g.n() as f64).sqrt().round() as usize;
                if h < block || w < block {
                    return Err(Error::data(format!(
                        "{}: image {}x{} is smaller than the {}px sampling block",
                        path.display(),
                        h,
                        w,
                        block
                    )));
                }
                let (blocks, _) = crate::cs::extract_blocks(&unit, block, block)?;
                let n = block * block;
                let rows = Tensor::from_fn(&[blocks.len(), n], |i| blocks[i / n].data()[i % n]);
                (
                    Measurements::GaussianFromBlocks(rows),
                    OperatorRef::Gaussian(g),
                )
            }
            LoadedOperator::Mri(m) => {
                if m.height() != h || m.width() != w {
                    return Err(Error::shape(
                        "analyze",
                        format!("[{},{}] (mask size)", m.height(), m.width()),
                        format!("{:?}", img.shape()),
                    ));
                }
                let k = m.forward(&unit)?;
                let phity = m.adjoint::<f64>(&k)?.reshape(&[1, h * w])?;
                (Measurements::MriAdjoint(phity), OperatorRef::Mri(m))
            }
        };

        let mut tape = crate::tape::Tape::new();
        let result = model_forward(
            &mut tape,
            params,
            &meta.config,
            ForwardSpec {
                op: op_ref,
                measurements,
                grid: None,
                trainable: false,
                learn_phi: false,
                record_trajectory: true,
            },
        )?;

        for (k, trace) in result.trajectory.iter().enumerate() {
            let (feature, name) = if let Some(hf) = &trace.h {
                (hf, "h")
            } else if let Some(zf) = &trace.z {
                (zf, "z")
            } else {
                (&trace.x, "x")
            };
            match feature_name {
                None => feature_name = Some(name),
                Some(prev) if prev != name => {
                    return Err(Error::contract(format!(
                        "inconsistent memory features across stages ({prev} vs {name})"
                    )))
                }
                _ => {}
            }
            // Feature is [R, C, E, E] (or [1, C, H, W] whole-image): take the
            // radial spectrum of each batch row and accumulate.
            let (r_count, c_ch, eh, ew) = (
                feature.shape()[0],
                feature.shape()[1],
                feature.shape()[2],
                feature.shape()[3],
            );
            let plane = c_ch * eh * ew;
            for r in 0..r_count {
                let one = Tensor::from_fn(&[1, c_ch, eh, ew], |i| feature.data()[r * plane + i]);
                let curve = spectral_density(&one, bins)?;
                if freqs.is_empty() {
                    freqs = curve.bins.iter().map(|(f, _)| *f).collect();
                }
                for (b, (_, p)) in curve.bins.iter().enumerate() {
                    sums[k][b] += p;
                }
                if k == 0 {
                    slices += 1;
                }
            }
        }
    }
    if slices == 0 {
        return Err(Error::data("no feature maps produced; check the image set"));
    }
    let curves = sums
        .into_iter()
        .enumerate()
        .map(|(k, sum)| {
            (
                k + 1,
                SpectralCurve {
                    bins: freqs
                        .iter()
                        .zip(sum)
                        .map(|(&f, p)| (f, p / slices as f64))
                        .collect(),
                },
            )
        })
        .collect();
    Ok((curves, feature_name.unwrap_or("x")))
}

fn cmd_analyze(c: AnalyzeCmd) -> Result<()> {
    let cfg = c.common.resolve()?;
    let ckpt_path = required_checkpoint(&cfg)?;
    let (meta, params, phi) = load_model(&ckpt_path)?;
    let out_dir = &cfg.paths.output_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    if meta.config.clm == ClmVariant::Lstm {
        let norms = gate_weight_norms(&params)?;
        let csv = gate_norms_csv(
            &norms,
            &format!("checkpoint: {}", ckpt_path.display()),
        );
        let path = out_dir.join("gate_norms.csv");
        std::fs::write(&path, csv).map_err(|e| Error::io(path.display().to_string(), e))?;
        println!("gate norms written to {}", path.display());
    } else {
        println!(
            "note: clm={} has no ConvLSTM gates; skipping gate norms",
            meta.config.clm
        );
    }

    let input = c
        .input
        .clone()
        .or_else(|| cfg.paths.data_dir.clone())
        .ok_or_else(|| {
            Error::config("analysis images are required (set --input or [paths].data_dir)")
        })?;
    let images = list_pgms(&input)?;
    let op = inference_operator(&cfg, &meta, phi)?;
    let (curves, feature) = spectral_curves_for_images(&images, &params, &meta, &op, c.bins)?;
    let names: Vec<String> = images.iter().map(|p| image_name(p)).collect();
    let csv = spectral_csv(
        &curves,
        &format!(
            "checkpoint: {}\nfeature: {}\nimages: {}",
            ckpt_path.display(),
            feature,
            names.join(", ")
        ),
    );
    let path = out_dir.join("spectral.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(path.display().to_string(), e))?;
    println!(
        "spectral curves ({} stages, feature '{}') written to {}",
        curves.len(),
        feature,
        path.display()
    );
    Manifest::new("analyze", &manifest_argv(), &cfg).write(out_dir)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

fn cmd_selftest(c: SelftestCmd) -> Result<()> {
    let cfg = c.common.resolve()?;
    let checks: Vec<(&str, fn() -> Result<()>)> = vec![
        ("gaussian orthonormality", selftest_orthonormality),
        ("sampling adjointness", selftest_adjointness),
        ("conv-lstm oracle", selftest_conv_lstm),
        ("end-to-end gradients", selftest_gradients),
        ("block pipeline roundtrip", selftest_block_pipeline),
        ("metric oracles", selftest_metrics),
        ("spectral energy", selftest_spectral),
        ("checkpoint bitwise roundtrip", selftest_checkpoint),
    ];
    let total = checks.len();
    let mut failures = Vec::new();
    for (name, check) in checks {
        match check() {
            Ok(()) => println!("ok   {}", name),
            Err(e) => {
                println!("FAIL {}: {}", name, e);
                failures.push(name);
            }
        }
    }
    Manifest::new("selftest", &manifest_argv(), &cfg).write(&cfg.paths.output_dir)?;
    if failures.is_empty() {
        println!("selftest: {}/{} checks passed", total, total);
        Ok(())
    } else {
        Err(Error::data(format!(
            "selftest: {}/{} checks failed ({})",
            failures.len(),
            total,
            failures.join(", ")
        )))
    }
}

fn selftest_orthonormality() -> Result<()> {
    let op = build_gaussian_operator::<f64>(0.25, 1089, 1)?;
    let dev = max_gram_deviation(&op);
    if dev > 1e-5 {
        return Err(Error::data(format!("max|ΦΦᵀ−I| = {:e} exceeds 1e-5", dev)));
    }
    Ok(())
}

fn selftest_adjointness() -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let op = build_gaussian_operator::<f64>(0.4, 81, 2)?;
    for _ in 0..20 {
        let x = Tensor::from_fn(&[81], |_| rng.gen_range(-1.0..1.0));
        let y = Tensor::from_fn(&[op.m()], |_| rng.gen_range(-1.0..1.0));
        let lhs: f64 = op
            .sample(&x)?
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(op.adjoint(&y)?.data())
            .map(|(a, b)| a * b)
            .sum();
        if (lhs - rhs).abs() > 1e-6 * lhs.abs().max(1.0) {
            return Err(Error::data(format!(
                "gaussian adjointness violated: {lhs} vs {rhs}"
            )));
        }
    }

    let mask = Tensor::from_fn(&[8, 8], |i| ((i / 8 + i % 8) % 2) as f64);
    let mri = MRIOperator::new(mask)?;
    for _ in 0..20 {
        let x = Tensor::from_fn(&[8, 8], |_| rng.gen_range(-1.0..1.0));
        let k = crate::cs::ComplexImage {
            height: 8,
            width: 8,
            data: (0..64)
                .map(|_| {
                    num_complex::Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                })
                .collect(),
        };
        let fx = mri.forward(&x)?;
        let aty: Tensor<f64> = mri.adjoint(&k)?;
        let lhs: f64 = fx
            .data
            .iter()
            .zip(&k.data)
            .map(|(a, b)| (a * b.conj()).re)
            .sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
        if (lhs - rhs).abs() > 1e-6 * lhs.abs().max(1.0) {
            return Err(Error::data(format!(
                "mri adjointness violated: {lhs} vs {rhs}"
            )));
        }
    }
    Ok(())
}

fn selftest_conv_lstm() -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let c = 2usize;
    let (hh, ww) = (4usize, 4usize);

    // Analytic zero-weight case: i = f = o = 1/2, c = c_prev/2,
    // h = tanh(c_prev/2)/2.
    let zero = crate::model::ConvLstmParams::<f64>::zeros(c);
    let s = Tensor::from_fn(&[1, c, hh, ww], |_| rng.gen_range(-1.0..1.0));
    let h_prev = Tensor::from_fn(&[1, c, hh, ww], |_| rng.gen_range(-1.0..1.0));
    let c_prev = Tensor::from_fn(&[1, c, hh, ww], |_| rng.gen_range(-1.0..1.0));
    let (h, cc) = crate::model::conv_lstm_cell(&s, &h_prev, &c_prev, &zero)?;
    for i in 0..h.numel() {
        let want_c = 0.5 * c_prev.data()[i];
        let want_h = 0.5 * want_c.tanh();
        if cc.data()[i] != want_c || h.data()[i] != want_h {
            return Err(Error::data("zero-weight ConvLSTM mismatch".to_string()));
        }
    }

    // Random cases against a direct scalar loop.
    for case in 0..3 {
        let mut p = crate::model::ConvLstmParams::<f64>::zeros(c);
        for t in [
            &mut p.w_si, &mut p.w_hi, &mut p.w_sf, &mut p.w_hf, &mut p.w_sc, &mut p.w_hc,
            &mut p.w_so, &mut p.w_ho,
        ] {
            *t = Tensor::from_fn(t.shape(), |_| rng.gen_range(-0.5..0.5));
        }
        for t in [&mut p.b_i, &mut p.b_f, &mut p.b_c, &mut p.b_o] {
            *t = Tensor::from_fn(t.shape(), |_| rng.gen_range(-0.5..0.5));
        }
        let s = Tensor::from_fn(&[1, c, hh, ww], |_| rng.gen_range(-1.0..1.0));
        let h_prev = Tensor::from_fn(&[1, c, hh, ww], |_| rng.gen_range(-1.0..1.0));
        let c_prev = Tensor::from_fn(&[1, c, hh, ww], |_| rng.gen_range(-1.0..1.0));
        let (h, cc) = crate::model::conv_lstm_cell(&s, &h_prev, &c_prev, &p)?;

        let conv = |w: &Tensor<f64>, x: &Tensor<f64>, co: usize, i: usize, j: usize| -> f64 {
            let mut acc = 0.0;
            for ci in 0..c {
                for di in 0..3 {
                    for dj in 0..3 {
                        let (si, sj) = (i as isize + di - 1, j as isize + dj - 1);
                        if si < 0 || sj < 0 || si >= hh as isize || sj >= ww as isize {
                            continue;
                        }
                        acc += w.at(&[co, ci, di as usize, dj as usize])
                            * x.at(&[0, ci, si as usize, sj as usize]);
                    }
                }
            }
            acc
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for co in 0..c {
            for i in 0..hh {
                for j in 0..ww {
                    let ig = sig(conv(&p.w_si, &s, co, i, j)
                        + conv(&p.w_hi, &h_prev, co, i, j)
                        + p.b_i.at(&[co]));
                    let fg = sig(conv(&p.w_sf, &s, co, i, j)
                        + conv(&p.w_hf, &h_prev, co, i, j)
                        + p.b_f.at(&[co]));
                    let cand = (conv(&p.w_sc, &s, co, i, j)
                        + conv(&p.w_hc, &h_prev, co, i, j)
                        + p.b_c.at(&[co]))
                    .tanh();
                    let og = sig(conv(&p.w_so, &s, co, i, j)
                        + conv(&p.w_ho, &h_prev, co, i, j)
                        + p.b_o.at(&[co]));
                    let want_c = fg * c_prev.at(&[0, co, i, j]) + ig * cand;
                    let want_h = og * want_c.tanh();
                    if (cc.at(&[0, co, i, j]) - want_c).abs() > 1e-6
                        || (h.at(&[0, co, i, j]) - want_h).abs() > 1e-6
                    {
                        return Err(Error::data(format!(
                            "ConvLSTM oracle mismatch in case {case}"
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

fn selftest_gradients() -> Result<()> {
    use rand::{Rng, SeedableRng};
    for (hsm, clm) in [
        (HsmVariant::Rb2, ClmVariant::Lstm),
        (HsmVariant::None, ClmVariant::Plus),
    ] {
        let config = ModelConfig {
            stages: 2,
            channels: 2,
            hsm,
            clm,
            operator: OperatorKind::Gaussian,
            ratio: 0.25,
        };
        let op = build_gaussian_operator::<f64>(0.25, 81, 4)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let blocks = Tensor::from_fn(&[1, 81], |_| rng.gen_range(0.0..1.0));
        let template = ModelParams::<f64>::init(&config, 6);

        let loss = |point: &Tensor<f64>| -> Result<(f64, Tensor<f64>)> {
            let mut params = template.clone();
            params.unflatten(point)?;
            let mut tape = crate::tape::Tape::new();
            let result = model_forward(
                &mut tape,
                &params,
                &config,
                ForwardSpec {
                    op: OperatorRef::Gaussian(&op),
                    measurements: Measurements::GaussianFromBlocks(blocks.clone()),
                    grid: None,
                    trainable: true,
                    learn_phi: false,
                    record_trajectory: false,
                },
            )?;
            let gt = tape.constant(blocks.clone());
            let l = tape.l1_mean(result.x_final, gt)?;
            tape.backward(l)?;
            let mut flat = Vec::with_capacity(point.numel());
            for (_, id) in &result.params {
                match tape.grad(*id) {
                    Some(g) => flat.extend_from_slice(g.data()),
                    None => flat.extend(std::iter::repeat(0.0).take(tape.value(*id).numel())),
                }
            }
            Ok((tape.value(l).data()[0], Tensor::new(&[flat.len()], flat)?))
        };
        let report =
            crate::gradcheck::grad_check(&loss, &template.flatten(), 1e-6, 1e-4)?;
        if !report.passed() {
            return Err(Error::data(format!(
                "gradient check failed for hsm={hsm} clm={clm}: max rel err {:.3e}",
                report.max_rel_error
            )));
        }
    }
    Ok(())
}

fn selftest_block_pipeline() -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let img: Tensor<f64> = Tensor::from_fn(&[99, 99], |_| rng.gen_range(0.0..1.0));
    for stride in [11usize, 22, 33] {
        let (blocks, grid) = crate::cs::extract_blocks(&img, 33, stride)?;
        let back = crate::cs::fold_average(&blocks, &grid)?;
        for (a, b) in img.data().iter().zip(back.data()) {
            if (a - b).abs() > 1e-6 {
                return Err(Error::data(format!(
                    "extract/fold roundtrip broke at stride {stride}"
                )));
            }
        }
    }
    Ok(())
}

fn selftest_metrics() -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    let img = Tensor::from_fn(&[32, 32], |_| rng.gen_range(0.0_f64..256.0).floor());
    let shifted = img.map(|v| v + 16.0);
    let p = psnr(&img, &shifted)?;
    if (p - 24.0486).abs() > 1e-3 {
        return Err(Error::data(format!("psnr(ref, ref+16) = {p}, want 24.0486")));
    }
    if ssim(&img, &img)? != 1.0 {
        return Err(Error::data("ssim(x, x) != 1".to_string()));
    }
    Ok(())
}

fn selftest_spectral() -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let feature = Tensor::from_fn(&[1, 1, 16, 16], |_| rng.gen_range(-1.0..1.0));
    let curve = spectral_density(&feature, 32)?;
    let counts = crate::analysis::bin_counts(16, 32);
    let binned: f64 = curve
        .bins
        .iter()
        .zip(&counts)
        .map(|((_, p), &n)| p * n as f64)
        .sum();
    let energy: f64 = feature.data().iter().map(|v| v * v).sum();
    if (binned - energy).abs() > 1e-5 * energy {
        return Err(Error::data(format!(
            "Parseval violated: {binned} vs {energy}"
        )));
    }
    let flat = Tensor::<f64>::full(&[1, 1, 16, 16], 2.0);
    let dc = spectral_density(&flat, 32)?;
    if !(dc.bins[0].1 > 0.0 && dc.bins[1..].iter().all(|(_, p)| p.abs() < 1e-20)) {
        return Err(Error::data("constant input leaked out of bin 0".to_string()));
    }
    Ok(())
}

fn selftest_checkpoint() -> Result<()> {
    let dir = std::env::temp_dir().join(format!("madun-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let path = dir.join("roundtrip.ckpt");
    let config = ModelConfig {
        stages: 1,
        channels: 2,
        hsm: HsmVariant::Rb2,
        clm: ClmVariant::Lstm,
        operator: OperatorKind::Gaussian,
        ratio: 0.25,
    };
    let train_cfg = TrainConfig {
        block: 9,
        ..TrainConfig::default()
    };
    let op = build_gaussian_operator::<f64>(0.25, 81, 10)?;
    let state = TrainState::new(&config, &train_cfg, op);
    save_checkpoint(&path, &state.to_checkpoint(&config, &train_cfg))?;
    let back = TrainState::<f64>::from_checkpoint(load_checkpoint(&path)?, &config)?;
    let same = state.params.flatten().data() == back.params.flatten().data()
        && state.op.phi().data() == back.op.phi().data();
    let _ = std::fs::remove_dir_all(&dir);
    if !same {
        return Err(Error::data("checkpoint roundtrip not bitwise".to_string()));
    }
    Ok(())
}
