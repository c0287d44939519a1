//! Run configuration: a TOML file with `[model]`, `[train]`, and `[paths]`
//! sections merged with environment and command-line overrides, operator
//! descriptor files, and the per-run manifest.
//!
//! Precedence, lowest to highest: built-in defaults → config file →
//! `MADUN_SEED` environment variable → command-line flags. The fully
//! resolved configuration is echoed into every output artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cs::{build_gaussian_operator, GaussianOperator, MRIOperator};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pgm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

/// File-system locations of a run's inputs and outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Phase-1 training images (PGM directory); also the default evaluate set.
    pub data_dir: Option<PathBuf>,
    /// Phase-2 composite source images; defaults to `data_dir`.
    pub phase2_dir: Option<PathBuf>,
    /// Operator descriptor file (see [`OperatorFile`]).
    pub operator: Option<PathBuf>,
    /// Model checkpoint to write (train) or read (reconstruct/evaluate/analyze).
    pub checkpoint: Option<PathBuf>,
    /// MRI sampling mask (8-bit PGM; nonzero marks a sampled k-space location).
    pub mask: Option<PathBuf>,
    /// Where manifests, reports, and reconstructions are written.
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: None,
            phase2_dir: None,
            operator: None,
            checkpoint: None,
            mask: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Fully resolved run configuration.
///
/// Defaults are desk scale (K = 9, C = 16, 200 phase-1 epochs); the
/// published full-scale regime (K = 25, C = 32, 400-image corpus) remains
/// reachable through the same knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                stages: 9,
                channels: 16,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// The raw file schema: every key optional so partial files inherit the
/// defaults they do not mention. Unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: ModelSection,
    train: TrainSection,
    paths: PathsSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    stages: Option<usize>,
    channels: Option<usize>,
    hsm: Option<crate::model::HsmVariant>,
    clm: Option<crate::model::ClmVariant>,
    operator: Option<crate::model::OperatorKind>,
    ratio: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSection {
    lr: Option<f64>,
    batch_size: Option<usize>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    epochs_phase1: Option<usize>,
    epochs_phase2: Option<usize>,
    block: Option<usize>,
    big_block: Option<usize>,
    phase2_stride: Option<usize>,
    seed: Option<u64>,
    learnable_phi: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PathsSection {
    data_dir: Option<PathBuf>,
    phase2_dir: Option<PathBuf>,
    operator: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    mask: Option<PathBuf>,
    output_dir: Option<PathBuf>,
}

macro_rules! merge {
    ($dst:expr, $src:expr; $($field:ident),+ $(,)?) => {
        $(if let Some(v) = $src.$field { $dst.$field = v; })+
    };
}

impl RunConfig {
    /// Loads defaults, merges the optional TOML file, then applies the
    /// `MADUN_SEED` environment override. Flag overrides are applied by the
    /// caller afterwards (flags beat the environment).
    pub fn load(file: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let parsed: FileConfig = toml::from_str(&text)
                .map_err(|e| Error::config(format!("{}: {}", path.display(), e.message())))?;
            merge!(cfg.model, parsed.model; stages, channels, hsm, clm, operator, ratio);
            merge!(cfg.train, parsed.train; lr, batch_size, beta1, beta2, epochs_phase1,
                   epochs_phase2, block, big_block, phase2_stride, seed, learnable_phi);
            let p = parsed.paths;
            if p.data_dir.is_some() {
                cfg.paths.data_dir = p.data_dir;
            }
            if p.phase2_dir.is_some() {
                cfg.paths.phase2_dir = p.phase2_dir;
            }
            if p.operator.is_some() {
                cfg.paths.operator = p.operator;
            }
            if p.checkpoint.is_some() {
                cfg.paths.checkpoint = p.checkpoint;
            }
            if p.mask.is_some() {
                cfg.paths.mask = p.mask;
            }
            if let Some(out) = p.output_dir {
                cfg.paths.output_dir = out;
            }
        }
        if let Ok(seed) = std::env::var("MADUN_SEED") {
            cfg.train.seed = seed.trim().parse().map_err(|_| {
                Error::config(format!("MADUN_SEED must be an unsigned integer, got '{seed}'"))
            })?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

/// Everything needed to reproduce a run bit-for-bit: the exact invocation,
/// the resolved configuration (seed included), and format versions.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: RunConfig,
    pub seed: u64,
    pub crate_version: String,
    pub checkpoint_format_version: u32,
    pub unix_time: u64,
}

impl Manifest {
    pub fn new(command: &str, argv: &[String], config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            config: config.clone(),
            seed: config.train.seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format_version: crate::checkpoint::VERSION,
            unix_time: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    /// Writes `manifest-<command>.json` into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = dir.join(format!("manifest-{}.json", self.command));
        let json = serde_json::to_string_pretty(self).expect("manifest serialization");
        std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    }
}

/// SHA-256 over a tensor's little-endian f64 payload, hex encoded.
pub fn tensor_digest<T: Scalar>(t: &Tensor<T>) -> String {
    let mut hasher = Sha256::new();
    for v in t.data() {
        hasher.update(v.to_f64_val().to_le_bytes());
    }
    let out = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in out {
        hex.push_str(&format!("{:02x}", b));
    }
    hex
}

/// On-disk operator descriptor.
///
/// Gaussian operators are regenerated deterministically from
/// `(ratio, n, seed)`; the stored digest pins the exact matrix so silent
/// generator drift is caught at load time. MRI descriptors bind a mask file
/// by path (relative paths resolve against the descriptor's directory) and
/// by content digest. A Φ trained jointly with the model travels in the
/// model checkpoint, not here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OperatorFile {
    Gaussian {
        ratio: f64,
        n: usize,
        seed: u64,
        phi_sha256: String,
    },
    Mri {
        mask: PathBuf,
        mask_sha256: String,
    },
}

/// A loaded sampling operator (always f64; cast at the call site if needed).
#[derive(Clone, Debug)]
pub enum LoadedOperator {
    Gaussian(GaussianOperator<f64>),
    Mri(MRIOperator),
}

impl LoadedOperator {
    pub fn as_operator_ref(&self) -> crate::model::OperatorRef<'_, f64> {
        match self {
            LoadedOperator::Gaussian(op) => crate::model::OperatorRef::Gaussian(op),
            LoadedOperator::Mri(op) => crate::model::OperatorRef::Mri(op),
        }
    }
}

/// Builds and saves a Gaussian operator descriptor; returns the operator.
pub fn save_gaussian_operator(
    path: &Path,
    ratio: f64,
    n: usize,
    seed: u64,
) -> Result<GaussianOperator<f64>> {
    let op = build_gaussian_operator::<f64>(ratio, n, seed)?;
    let file = OperatorFile::Gaussian {
        ratio,
        n,
        seed,
        phi_sha256: tensor_digest(op.phi()),
    };
    write_operator_file(path, &file)?;
    Ok(op)
}

/// Reads an MRI sampling mask from an 8-bit PGM: any nonzero pixel marks a
/// sampled k-space location.
pub fn read_mask(path: &Path) -> Result<Tensor<f64>> {
    Ok(pgm::read_pgm(path)?.map(|v| if v != 0.0 { 1.0 } else { 0.0 }))
}

/// Binds an MRI mask into an operator descriptor; returns the operator.
pub fn save_mri_operator(path: &Path, mask_path: &Path) -> Result<MRIOperator> {
    let mask = read_mask(mask_path)?;
    let op = MRIOperator::new(mask)?;
    let file = OperatorFile::Mri {
        mask: mask_path.to_path_buf(),
        mask_sha256: tensor_digest(op.mask()),
    };
    write_operator_file(path, &file)?;
    Ok(op)
}

fn write_operator_file(path: &Path, file: &OperatorFile) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let json = serde_json::to_string_pretty(file).expect("operator serialization");
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads an operator descriptor, rebuilding the operator and verifying its
/// content digest.
pub fn load_operator(path: &Path) -> Result<LoadedOperator> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: OperatorFile = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("{}: not an operator file: {}", path.display(), e)))?;
    match file {
        OperatorFile::Gaussian {
            ratio,
            n,
            seed,
            phi_sha256,
        } => {
            let op = build_gaussian_operator::<f64>(ratio, n, seed)?;
            let got = tensor_digest(op.phi());
            if got != phi_sha256 {
                return Err(Error::data(format!(
                    "{}: regenerated Φ does not match the stored digest \
                     (file {}, regenerated {})",
                    path.display(),
                    phi_sha256,
                    got
                )));
            }
            Ok(LoadedOperator::Gaussian(op))
        }
        OperatorFile::Mri { mask, mask_sha256 } => {
            let mask_path = if mask.is_relative() {
                path.parent().unwrap_or_else(|| Path::new(".")).join(&mask)
            } else {
                mask.clone()
            };
            let mask_img = read_mask(&mask_path)?;
            let op = MRIOperator::new(mask_img)?;
            let got = tensor_digest(op.mask());
            if got != mask_sha256 {
                return Err(Error::data(format!(
                    "{}: mask {} does not match the stored digest",
                    path.display(),
                    mask_path.display()
                )));
            }
            Ok(LoadedOperator::Mri(op))
        }
    }
}

/// Serializes tests that read or mutate the process environment
/// (`MADUN_SEED`); environment variables are process-global state.
#[cfg(test)]
pub(crate) fn env_lock() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}
