//! End-to-end training: dataset assembly from PGM corpora, Adam, the
//! two-phase block-size schedule, optional learnable sampling matrix, and
//! checkpoint-resumable state.
//!
//! Phase 1 trains on independent b×b blocks; phase 2 fine-tunes on larger
//! composites processed in whole-image mode (overlapping unfold → per-block
//! sampling → fold-average initialization), matching how full images are
//! reconstructed at test time.
//!
//! All randomness is derived from the config seed. The per-epoch sample
//! order and augmentation stream use the epoch index as a ChaCha stream
//! selector, so a run resumed from an epoch-boundary checkpoint replays
//! exactly the same batches as an uninterrupted run.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::cs::{extract_blocks, BlockGrid, GaussianOperator};
use crate::error::{Error, Result};
use crate::model::{
    model_forward, ForwardSpec, Measurements, ModelConfig, ModelParams, OperatorKind, OperatorRef,
};
use crate::pgm::read_pgm;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Constant learning rate.
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Epochs on small independent blocks.
    pub epochs_phase1: usize,
    /// Fine-tune epochs on large composites in whole-image mode.
    pub epochs_phase2: usize,
    /// Block edge for phase 1 (and the sampling block everywhere).
    pub block: usize,
    /// Composite edge for phase 2.
    pub big_block: usize,
    /// Stride of the overlapping unfold inside phase-2 composites.
    pub phase2_stride: usize,
    pub seed: u64,
    /// Treat Φ as a trainable parameter.
    pub learnable_phi: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            epochs_phase1: 200,
            epochs_phase2: 10,
            block: 33,
            big_block: 99,
            phase2_stride: 22,
            seed: 0,
            learnable_phi: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate {} must be > 0", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{} = {} outside [0, 1)", name, b)));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if self.block == 0 {
            return Err(Error::config("block size must be >= 1"));
        }
        // Phase-2 geometry only constrains runs that will enter phase 2.
        if self.epochs_phase2 > 0 {
            if self.big_block < self.block {
                return Err(Error::config(format!(
                    "block sizes ({}, {}) must satisfy block <= big_block",
                    self.block, self.big_block
                )));
            }
            if self.phase2_stride == 0 || self.phase2_stride > self.block {
                return Err(Error::config(format!(
                    "phase-2 stride {} outside 1..={}",
                    self.phase2_stride, self.block
                )));
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_phase1 + self.epochs_phase2
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam moment buffers over the flattened parameter vector (model parameters
/// in walk order, then Φ when it is learnable).
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub step: usize,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_len: usize) -> Self {
        Self {
            step: 0,
            m: Tensor::zeros(&[param_len]),
            v: Tensor::zeros(&[param_len]),
        }
    }
}

/// One bias-corrected Adam update (ε = 1e-8), in place on the flat
/// parameter vector.
pub fn adam_step<T: Scalar>(
    params: &mut Tensor<T>,
    grads: &Tensor<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.shape() != grads.shape() || params.shape() != state.m.shape() {
        return Err(Error::shape(
            "adam_step",
            format!("{:?} aligned params/grads/moments", state.m.shape()),
            format!("params {:?}, grads {:?}", params.shape(), grads.shape()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let corr1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let corr2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(1e-8);
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (i, (p, &g)) in params.data_mut().iter_mut().zip(grads.data()).enumerate() {
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / corr1;
        let v_hat = v[i] / corr2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// One training pair: the vectorized ground-truth block `x` and its
/// measurements `y` under the operator at dataset-build time (`[M]` for a
/// sampling-sized block, `[L, M]` per inner block for larger composites).
#[derive(Clone, Debug)]
pub struct SamplePair<T: Scalar> {
    pub y: Tensor<T>,
    pub x: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Dataset<T: Scalar> {
    pub pairs: Vec<SamplePair<T>>,
    /// Edge length of the (square) ground-truth blocks.
    pub block: usize,
}

/// Builds (y, x) training pairs from every `*.pgm` file in `dir`.
///
/// Blocks of `block`×`block` luminance are extracted on a stride-`stride`
/// grid, scaled to [0, 1], optionally expanded by the 8 dihedral transforms,
/// vectorized in raster order, measured through `op`, and shuffled
/// deterministically by `seed`. When `block` exceeds the operator's block
/// size, `inner` must supply the grid used for per-block sampling and `y`
/// holds one measurement row per inner block.
pub fn make_dataset<T: Scalar>(
    dir: &Path,
    block: usize,
    stride: usize,
    augment: bool,
    seed: u64,
    op: &GaussianOperator<T>,
    inner: Option<&BlockGrid>,
) -> Result<Dataset<T>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "pgm").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::data(format!(
            "no PGM images found in {}",
            dir.display()
        )));
    }

    match inner {
        None if block * block != op.n() => {
            return Err(Error::contract(format!(
                "block {}² does not match operator N = {} and no inner grid was given",
                block,
                op.n()
            )))
        }
        Some(g) if g.height() != block || g.width() != block || g.block_len() != op.n() => {
            return Err(Error::contract(
                "inner grid does not tile the dataset block with operator-sized blocks",
            ))
        }
        _ => {}
    }

    let mut undersized = Vec::new();
    let mut raw_blocks = Vec::new();
    for path in &files {
        let img = read_pgm(path)?;
        let (h, w) = (img.shape()[0], img.shape()[1]);
        if h < block || w < block {
            undersized.push(format!("{} ({}x{})", path.display(), h, w));
            continue;
        }
        let scaled = img.map(|v| v / 255.0);
        let (blocks, _) = extract_blocks(&scaled, block, stride)?;
        raw_blocks.extend(blocks);
    }
    if !undersized.is_empty() {
        return Err(Error::data(format!(
            "images smaller than the {}px block: {}",
            block,
            undersized.join(", ")
        )));
    }

    let mut pairs = Vec::with_capacity(raw_blocks.len() * if augment { 8 } else { 1 });
    for b in &raw_blocks {
        let variants = if augment { 8 } else { 1 };
        for idx in 0..variants {
            let v = crate::cs::augment(b, idx)?;
            let x = v.cast::<T>().reshape(&[block * block])?;
            let y = match inner {
                None => op.sample(&x)?,
                Some(grid) => {
                    let mut rows = Tensor::zeros(&[grid.num_blocks(), grid.block_len()]);
                    grid.unfold_into(x.data(), rows.data_mut());
                    op.sample(&rows)?
                }
            };
            pairs.push(SamplePair { y, x });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    Ok(Dataset { pairs, block })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Everything that evolves during training; checkpoints freeze exactly this.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub params: ModelParams<T>,
    pub op: GaussianOperator<T>,
    pub adam: AdamState<T>,
    /// Completed epochs (absolute across both phases).
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    /// Mean training loss of each completed epoch.
    pub loss_history: Vec<f64>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(
        model_cfg: &ModelConfig,
        train_cfg: &TrainConfig,
        op: GaussianOperator<T>,
    ) -> Self {
        let params = ModelParams::init(model_cfg, train_cfg.seed);
        let mut len = params.param_count();
        if train_cfg.learnable_phi {
            len += op.phi().numel();
        }
        Self {
            params,
            op,
            adam: AdamState::new(len),
            epoch: 0,
            step: 0,
            loss_history: Vec::new(),
        }
    }

    /// Flattens state into the persistent checkpoint form.
    pub fn to_checkpoint(
        &self,
        model_cfg: &ModelConfig,
        train_cfg: &TrainConfig,
    ) -> Checkpoint<T> {
        let mut tensors = Vec::new();
        self.params.walk(|name, t| tensors.push((name, t.clone())));
        tensors.push(("phi".to_string(), self.op.phi().clone()));
        tensors.push(("adam.m".to_string(), self.adam.m.clone()));
        tensors.push(("adam.v".to_string(), self.adam.v.clone()));
        Checkpoint {
            meta: CheckpointMeta {
                config: model_cfg.clone(),
                dtype: T::DTYPE.name().to_string(),
                epoch: self.epoch,
                step: self.step,
                seed: train_cfg.seed,
                learn_phi: train_cfg.learnable_phi,
                loss_history: self.loss_history.clone(),
            },
            tensors,
        }
    }

    /// Rebuilds training state from a checkpoint. The checkpoint's model
    /// config must equal the run's; a mismatch (different K, C, variants,
    /// operator, or ratio) is a config error.
    pub fn from_checkpoint(
        mut ckpt: Checkpoint<T>,
        model_cfg: &ModelConfig,
    ) -> Result<Self> {
        if ckpt.meta.config != *model_cfg {
            return Err(Error::config(format!(
                "checkpoint was trained with config {:?} but this run uses {:?}",
                ckpt.meta.config, model_cfg
            )));
        }
        let mut params = ModelParams::<T>::zeros(model_cfg);
        let mut missing = Vec::new();
        params.walk_mut(|name, t| match ckpt.get(name) {
            Some(src) if src.shape() == t.shape() => {
                t.data_mut().copy_from_slice(src.data());
            }
            Some(src) => missing.push(format!(
                "{} (shape {:?}, expected {:?})",
                name,
                src.shape(),
                t.shape()
            )),
            None => missing.push(name.to_string()),
        });
        if !missing.is_empty() {
            return Err(Error::checkpoint(format!(
                "missing or misshapen tensors: {}",
                missing.join(", ")
            )));
        }
        let phi = ckpt
            .take("phi")
            .ok_or_else(|| Error::checkpoint("missing tensor 'phi'"))?;
        let op = GaussianOperator::from_phi(
            phi,
            model_cfg.ratio,
            ckpt.meta.learn_phi,
            ckpt.meta.seed,
        )?;
        let m = ckpt
            .take("adam.m")
            .ok_or_else(|| Error::checkpoint("missing tensor 'adam.m'"))?;
        let v = ckpt
            .take("adam.v")
            .ok_or_else(|| Error::checkpoint("missing tensor 'adam.v'"))?;
        if m.shape() != v.shape() {
            return Err(Error::checkpoint("optimizer moment shapes disagree"));
        }
        Ok(Self {
            params,
            op,
            adam: AdamState {
                step: ckpt.meta.step,
                m,
                v,
            },
            epoch: ckpt.meta.epoch,
            step: ckpt.meta.step,
            loss_history: ckpt.meta.loss_history.clone(),
        })
    }
}

/// Assembles a batch of pairs into stacked tensors: ground-truth rows
/// `[B, n²]` and measurement rows (`[B, M]`, or `[B·L, M]` for composites).
fn stack_batch<T: Scalar>(pairs: &[&SamplePair<T>]) -> (Tensor<T>, Tensor<T>) {
    let b = pairs.len();
    let xn = pairs[0].x.numel();
    let mut xs = Vec::with_capacity(b * xn);
    for p in pairs {
        xs.extend_from_slice(p.x.data());
    }
    let y_shape = pairs[0].y.shape().to_vec();
    let yn = pairs[0].y.numel();
    let mut ys = Vec::with_capacity(b * yn);
    for p in pairs {
        ys.extend_from_slice(p.y.data());
    }
    let y_rows = if y_shape.len() == 2 { b * y_shape[0] } else { b };
    let y_cols = *y_shape.last().unwrap();
    (
        Tensor::new(&[b, xn], xs).expect("stacked x"),
        Tensor::new(&[y_rows, y_cols], ys).expect("stacked y"),
    )
}

/// Runs training from `state.epoch` up to the configured total epoch count,
/// invoking `on_epoch` after each completed epoch (for checkpointing and
/// logging). Phase 1 uses `phase1` in block mode; once the phase-1 epochs
/// are exhausted, `phase2` composites are trained in whole-image mode.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    phase1: &Dataset<T>,
    phase2: Option<&Dataset<T>>,
    mut on_epoch: impl FnMut(&TrainState<T>) -> Result<()>,
) -> Result<()> {
    if model_cfg.operator != OperatorKind::Gaussian {
        return Err(Error::config(
            "training is defined for the gaussian operator; MRI models are evaluation-only",
        ));
    }
    if cfg.epochs_phase2 > 0 && phase2.is_none() && state.epoch < cfg.total_epochs() {
        return Err(Error::contract(
            "phase-2 epochs configured but no phase-2 dataset provided",
        ));
    }

    let phase2_grid = match phase2 {
        Some(ds) => Some(Arc::new(BlockGrid::new(
            ds.block,
            ds.block,
            cfg.block,
            cfg.phase2_stride,
        )?)),
        None => None,
    };

    while state.epoch < cfg.total_epochs() {
        let epoch = state.epoch;
        let in_phase1 = epoch < cfg.epochs_phase1;
        let (dataset, grid) = if in_phase1 {
            (phase1, None)
        } else {
            (
                phase2.expect("checked above"),
                Some(phase2_grid.clone().expect("built above")),
            )
        };
        if dataset.pairs.is_empty() {
            return Err(Error::data("training dataset is empty"));
        }

        // Epoch-keyed stream: resuming at an epoch boundary replays the
        // identical order an uninterrupted run would have used.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..dataset.pairs.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut row_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SamplePair<T>> = chunk.iter().map(|&i| &dataset.pairs[i]).collect();
            let (xs, ys) = stack_batch(&batch);
            let measurements = if cfg.learnable_phi {
                // Sampling runs on the tape so Φ receives gradients through
                // both y = Φx and the Φᵀ initialization.
                match &grid {
                    None => Measurements::GaussianFromBlocks(xs.clone()),
                    Some(g) => {
                        let l = g.num_blocks();
                        let n = g.block_len();
                        let mut rows = Tensor::zeros(&[batch.len() * l, n]);
                        for (bi, p) in batch.iter().enumerate() {
                            g.unfold_into(
                                p.x.data(),
                                &mut rows.data_mut()[bi * l * n..(bi + 1) * l * n],
                            );
                        }
                        Measurements::GaussianFromBlocks(rows)
                    }
                }
            } else {
                Measurements::GaussianY(ys)
            };

            let mut tape = Tape::new();
            let result = model_forward(
                &mut tape,
                &state.params,
                model_cfg,
                ForwardSpec {
                    op: OperatorRef::Gaussian(&state.op),
                    measurements,
                    grid: grid.clone(),
                    trainable: true,
                    learn_phi: cfg.learnable_phi,
                    record_trajectory: false,
                },
            )?;
            let gt = match &grid {
                None => tape.constant(xs),
                Some(g) => {
                    let img = xs.reshape(&[batch.len(), 1, g.height(), g.width()])?;
                    tape.constant(img)
                }
            };
            let loss = tape.l1_mean(result.x_final, gt)?;
            let loss_val = tape.value(loss).data()[0].to_f64_val();
            if !loss_val.is_finite() {
                return Err(Error::data(format!(
                    "training diverged: loss {} at epoch {}, step {}",
                    loss_val,
                    epoch,
                    state.step + 1
                )));
            }
            tape.backward(loss)?;

            // Flat gradient in walk order (+ Φ), matching the Adam buffers.
            let mut grads = Vec::with_capacity(state.adam.m.numel());
            for (name, id) in &result.params {
                let g = tape.grad(*id).ok_or_else(|| {
                    Error::contract(format!("no gradient for parameter '{}'", name))
                })?;
                grads.extend_from_slice(g.data());
            }
            if cfg.learnable_phi {
                let phi_id = result.phi.expect("gaussian forward provides phi");
                let g = tape
                    .grad(phi_id)
                    .ok_or_else(|| Error::contract("no gradient for phi"))?;
                grads.extend_from_slice(g.data());
            }
            let grads = Tensor::new(&[grads.len()], grads)?;

            let mut flat = state.params.flatten();
            if cfg.learnable_phi {
                let mut d = flat.into_data();
                d.extend_from_slice(state.op.phi().data());
                flat = Tensor::new(&[d.len()], d)?;
            }
            adam_step(&mut flat, &grads, &mut state.adam, cfg)?;
            if cfg.learnable_phi {
                let split = state.params.param_count();
                let phi_data = flat.data()[split..].to_vec();
                let phi = Tensor::new(&[state.op.m(), state.op.n()], phi_data)?;
                state.op.set_phi(phi)?;
                flat = Tensor::new(&[split], flat.data()[..split].to_vec())?;
            }
            state.params.unflatten(&flat)?;

            state.step += 1;
            let rows = batch.len();
            loss_sum += loss_val * rows as f64;
            row_count += rows;
        }

        state
            .loss_history
            .push(loss_sum / row_count.max(1) as f64);
        state.epoch += 1;
        on_epoch(state)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cs::build_gaussian_operator;
    use crate::model::{ClmVariant, HsmVariant};
    use crate::pgm::write_pgm;
    use rand::Rng;

    fn toy_model_cfg() -> ModelConfig {
        ModelConfig {
            stages: 2,
            channels: 4,
            hsm: HsmVariant::Rb2,
            clm: ClmVariant::Lstm,
            operator: OperatorKind::Gaussian,
            ratio: 0.25,
        }
    }

    fn toy_train_cfg() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            epochs_phase1: 2,
            epochs_phase2: 0,
            block: 9,
            big_block: 15,
            phase2_stride: 6,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn write_noise_image(path: &Path, h: usize, w: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_fn(&[h, w], |_| rng.gen_range(0.0_f64..256.0).floor());
        write_pgm(path, &img).unwrap();
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let cfg = TrainConfig::default();
        let mut params = Tensor::new(&[3], vec![0.5f64, -1.0, 2.0]).unwrap();
        let before = params.data().to_vec();
        let grads = Tensor::zeros(&[3]);
        let mut state = AdamState::new(3);
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        }
        assert_eq!(params.data(), &before[..]);
    }

    #[test]
    fn adam_matches_independent_scalar_oracle() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 0.05;
        let mut param = Tensor::new(&[1], vec![1.0f64]).unwrap();
        let mut state = AdamState::new(1);
        // Scalar reference maintained independently.
        let (mut m, mut v, mut p_ref) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=50 {
            let g = 0.3 + 0.01 * t as f64;
            let grads = Tensor::new(&[1], vec![g]).unwrap();
            adam_step(&mut param, &grads, &mut state, &cfg).unwrap();
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            p_ref -= cfg.lr * mh / (vh.sqrt() + 1e-8);
            assert!(
                (param.data()[0] - p_ref).abs() < 1e-12,
                "step {t}: {} vs {}",
                param.data()[0],
                p_ref
            );
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_almost_lr() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 0.01;
        let mut param = Tensor::new(&[2], vec![0.0f64, 0.0]).unwrap();
        let grads = Tensor::new(&[2], vec![4.0f64, -0.02]).unwrap();
        let mut state = AdamState::new(2);
        adam_step(&mut param, &grads, &mut state, &cfg).unwrap();
        // First update is −lr·g/(|g| + ε) ≈ −lr·sign(g) regardless of |g|.
        assert!((param.data()[0] + cfg.lr).abs() < 1e-8);
        assert!((param.data()[1] - cfg.lr).abs() < 1e-5);
    }

    #[test]
    fn make_dataset_counts_and_contents() {
        let dir = tempfile::tempdir().unwrap();
        let op = build_gaussian_operator::<f64>(0.25, 81, 1).unwrap();

        // One exactly-block-sized image → one pair, x = raster/255.
        let img_path = dir.path().join("a.pgm");
        write_noise_image(&img_path, 9, 9, 10);
        let ds = make_dataset(dir.path(), 9, 9, false, 0, &op, None).unwrap();
        assert_eq!(ds.pairs.len(), 1);
        let img = read_pgm(&img_path).unwrap();
        let want: Vec<f64> = img.data().iter().map(|v| v / 255.0).collect();
        assert_eq!(ds.pairs[0].x.data(), &want[..]);
        let y_want = op.sample(&ds.pairs[0].x).unwrap();
        assert_eq!(ds.pairs[0].y.data(), y_want.data());

        // Augmentation multiplies the pair count by 8.
        let ds8 = make_dataset(dir.path(), 9, 9, true, 0, &op, None).unwrap();
        assert_eq!(ds8.pairs.len(), 8);

        // A 27×27 image at stride 9 adds a 3×3 grid of blocks.
        write_noise_image(&dir.path().join("b.pgm"), 27, 27, 11);
        let ds9 = make_dataset(dir.path(), 9, 9, false, 0, &op, None).unwrap();
        assert_eq!(ds9.pairs.len(), 1 + 9);
    }

    #[test]
    fn make_dataset_shuffle_is_seeded() {
        let dir = tempfile::tempdir().unwrap();
        let op = build_gaussian_operator::<f64>(0.25, 81, 1).unwrap();
        write_noise_image(&dir.path().join("a.pgm"), 27, 27, 12);
        let a = make_dataset(dir.path(), 9, 9, false, 5, &op, None).unwrap();
        let b = make_dataset(dir.path(), 9, 9, false, 5, &op, None).unwrap();
        let c = make_dataset(dir.path(), 9, 9, false, 6, &op, None).unwrap();
        let key = |d: &Dataset<f64>| -> Vec<f64> { d.pairs.iter().map(|p| p.x.data()[0]).collect() };
        assert_eq!(key(&a), key(&b));
        assert_ne!(key(&a), key(&c));
    }

    #[test]
    fn make_dataset_rejects_empty_and_undersized() {
        let dir = tempfile::tempdir().unwrap();
        let op = build_gaussian_operator::<f64>(0.25, 81, 1).unwrap();
        let err = make_dataset(dir.path(), 9, 9, false, 0, &op, None).unwrap_err();
        assert!(matches!(err, Error::Data(_)));

        write_noise_image(&dir.path().join("small.pgm"), 5, 9, 13);
        let err = make_dataset(dir.path(), 9, 9, false, 0, &op, None).unwrap_err();
        match err {
            Error::Data(msg) => assert!(msg.contains("small.pgm"), "{msg}"),
            other => panic!("expected data error, got {other}"),
        }
    }

    #[test]
    fn make_dataset_composite_measures_per_inner_block() {
        let dir = tempfile::tempdir().unwrap();
        let op = build_gaussian_operator::<f64>(0.25, 81, 1).unwrap();
        write_noise_image(&dir.path().join("a.pgm"), 15, 15, 14);
        let inner = BlockGrid::new(15, 15, 9, 6).unwrap();
        let ds = make_dataset(dir.path(), 15, 15, false, 0, &op, Some(&inner)).unwrap();
        assert_eq!(ds.pairs.len(), 1);
        assert_eq!(ds.pairs[0].y.shape(), &[4, op.m()]);
        assert_eq!(ds.pairs[0].x.numel(), 225);
    }

    /// A tiny in-memory dataset of random blocks (no files involved).
    fn synthetic_dataset(op: &GaussianOperator<f64>, count: usize, seed: u64) -> Dataset<f64> {
        let n = op.n();
        let block = (n as f64).sqrt() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = (0..count)
            .map(|_| {
                let x = Tensor::from_fn(&[n], |_| rng.gen_range(0.0..1.0));
                let y = op.sample(&x).unwrap();
                SamplePair { y, x }
            })
            .collect();
        Dataset { pairs, block }
    }

    #[test]
    fn lr_zero_keeps_loss_history_constant_and_phi_frozen() {
        let model_cfg = toy_model_cfg();
        let mut cfg = toy_train_cfg();
        cfg.lr = 0.0;
        cfg.epochs_phase1 = 3;
        let op = build_gaussian_operator::<f64>(0.25, 81, 2).unwrap();
        let phi_before = op.phi().clone();
        let ds = synthetic_dataset(&op, 8, 20);
        let mut state = TrainState::new(&model_cfg, &cfg, op);
        train(&mut state, &model_cfg, &cfg, &ds, None, |_| Ok(())).unwrap();
        assert_eq!(state.loss_history.len(), 3);
        // The per-epoch shuffle reorders the summation, so "constant" holds
        // to within reassociation error of the batch means.
        let first = state.loss_history[0];
        for &l in &state.loss_history {
            assert!((l - first).abs() <= 1e-12 * first.max(1.0), "{l} vs {first}");
        }
        assert_eq!(state.op.phi().data(), phi_before.data());
    }

    #[test]
    fn loss_decreases_on_a_toy_problem() {
        let model_cfg = toy_model_cfg();
        let mut cfg = toy_train_cfg();
        cfg.epochs_phase1 = 10;
        let op = build_gaussian_operator::<f64>(0.25, 81, 2).unwrap();
        let ds = synthetic_dataset(&op, 8, 21);
        let mut state = TrainState::new(&model_cfg, &cfg, op);
        train(&mut state, &model_cfg, &cfg, &ds, None, |_| Ok(())).unwrap();
        let first = state.loss_history[0];
        let last = *state.loss_history.last().unwrap();
        assert!(
            last < 0.7 * first,
            "loss did not decrease: {} -> {}",
            first,
            last
        );
    }

    #[test]
    fn training_loss_matches_independent_scalar_recomputation() {
        // lr = 0 keeps parameters fixed, so epoch 0's recorded loss must
        // equal a scalar-loop L1 over an independently computed forward.
        let model_cfg = toy_model_cfg();
        let mut cfg = toy_train_cfg();
        cfg.lr = 0.0;
        cfg.epochs_phase1 = 1;
        cfg.batch_size = 64; // single batch
        let op = build_gaussian_operator::<f64>(0.25, 81, 2).unwrap();
        let ds = synthetic_dataset(&op, 6, 22);
        let mut state = TrainState::new(&model_cfg, &cfg, op);
        let params = state.params.clone();
        train(&mut state, &model_cfg, &cfg, &ds, None, |_| Ok(())).unwrap();

        let mut xs = Vec::new();
        for p in &ds.pairs {
            xs.extend_from_slice(p.x.data());
        }
        let xs = Tensor::new(&[6, 81], xs).unwrap();
        let mut ys = Vec::new();
        for p in &ds.pairs {
            ys.extend_from_slice(p.y.data());
        }
        let ys = Tensor::new(&[6, state.op.m()], ys).unwrap();
        let pred = crate::model::model_forward_values(
            &params,
            &model_cfg,
            OperatorRef::Gaussian(&state.op),
            Measurements::GaussianY(ys),
        )
        .unwrap();
        let mut total = 0.0;
        for (p, x) in pred.data().iter().zip(xs.data()) {
            total += (p - x).abs();
        }
        let want = total / pred.numel() as f64;
        assert!(
            (state.loss_history[0] - want).abs() < 1e-6,
            "{} vs {}",
            state.loss_history[0],
            want
        );
    }

    #[test]
    fn learnable_phi_receives_updates() {
        let model_cfg = toy_model_cfg();
        let mut cfg = toy_train_cfg();
        cfg.learnable_phi = true;
        cfg.epochs_phase1 = 1;
        let op = build_gaussian_operator::<f64>(0.25, 81, 2).unwrap();
        let phi_before = op.phi().clone();
        let ds = synthetic_dataset(&op, 4, 23);
        let mut state = TrainState::new(&model_cfg, &cfg, op);
        train(&mut state, &model_cfg, &cfg, &ds, None, |_| Ok(())).unwrap();
        assert_ne!(state.op.phi().data(), phi_before.data());
    }

    #[test]
    fn fixed_seed_reproduces_identical_history() {
        let model_cfg = toy_model_cfg();
        let cfg = toy_train_cfg();
        let run = || {
            let op = build_gaussian_operator::<f64>(0.25, 81, 2).unwrap();
            let ds = synthetic_dataset(&op, 8, 24);
            let mut state = TrainState::new(&model_cfg, &cfg, op);
            train(&mut state, &model_cfg, &cfg, &ds, None, |_| Ok(())).unwrap();
            (state.loss_history.clone(), state.params.flatten())
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1, h2);
        assert_eq!(p1.data(), p2.data());
    }

    #[test]
    fn resume_from_checkpoint_is_bitwise_identical() {
        let model_cfg = toy_model_cfg();
        let mut cfg = toy_train_cfg();
        cfg.epochs_phase1 = 4;
        let make = || {
            let op = build_gaussian_operator::<f64>(0.25, 81, 2).unwrap();
            let ds = synthetic_dataset(&op, 8, 25);
            (TrainState::new(&model_cfg, &cfg, op), ds)
        };

        // Uninterrupted run.
        let (mut full, ds) = make();
        train(&mut full, &model_cfg, &cfg, &ds, None, |_| Ok(())).unwrap();

        // Interrupted at epoch 2, persisted, reloaded, resumed.
        let (mut half, ds2) = make();
        let mut cfg_half = cfg.clone();
        cfg_half.epochs_phase1 = 2;
        train(&mut half, &model_cfg, &cfg_half, &ds2, None, |_| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.ckpt");
        crate::checkpoint::save_checkpoint(&path, &half.to_checkpoint(&model_cfg, &cfg)).unwrap();
        let ckpt = crate::checkpoint::load_checkpoint::<f64>(&path).unwrap();
        let mut resumed = TrainState::from_checkpoint(ckpt, &model_cfg).unwrap();
        train(&mut resumed, &model_cfg, &cfg, &ds2, None, |_| Ok(())).unwrap();

        assert_eq!(full.loss_history, resumed.loss_history);
        let (a, b) = (full.params.flatten(), resumed.params.flatten());
        let bits = |t: &Tensor<f64>| -> Vec<u64> { t.data().iter().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(bits(&full.adam.m), bits(&resumed.adam.m));
    }

    #[test]
    fn checkpoint_config_mismatch_is_rejected() {
        let model_cfg = toy_model_cfg();
        let cfg = toy_train_cfg();
        let op = build_gaussian_operator::<f64>(0.25, 81, 2).unwrap();
        let state = TrainState::new(&model_cfg, &cfg, op);
        let ckpt = state.to_checkpoint(&model_cfg, &cfg);
        let mut other = model_cfg.clone();
        other.stages = 5;
        let err = TrainState::from_checkpoint(ckpt, &other).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn phase_two_trains_in_whole_image_mode() {
        let model_cfg = toy_model_cfg();
        let mut cfg = toy_train_cfg();
        cfg.epochs_phase1 = 1;
        cfg.epochs_phase2 = 1;
        cfg.batch_size = 2;
        let op = build_gaussian_operator::<f64>(0.25, 81, 2).unwrap();
        let ds1 = synthetic_dataset(&op, 4, 26);

        // Composite pairs: 15×15 blocks measured through the phase-2 grid.
        let grid = BlockGrid::new(15, 15, 9, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let pairs = (0..2)
            .map(|_| {
                let x = Tensor::from_fn(&[225], |_| rng.gen_range(0.0..1.0));
                let mut rows = Tensor::zeros(&[grid.num_blocks(), 81]);
                grid.unfold_into(x.data(), rows.data_mut());
                let y = op.sample(&rows).unwrap();
                SamplePair { y, x }
            })
            .collect();
        let ds2 = Dataset { pairs, block: 15 };

        cfg.big_block = 15;
        let mut state = TrainState::new(&model_cfg, &cfg, op);
        train(&mut state, &model_cfg, &cfg, &ds1, Some(&ds2), |_| Ok(())).unwrap();
        assert_eq!(state.loss_history.len(), 2);
        assert!(state.loss_history.iter().all(|l| l.is_finite()));

        // Learnable Φ exercises the unfold path for sampling gradients too.
        cfg.learnable_phi = true;
        let op2 = build_gaussian_operator::<f64>(0.25, 81, 2).unwrap();
        let mut state2 = TrainState::new(&model_cfg, &cfg, op2);
        train(&mut state2, &model_cfg, &cfg, &ds1, Some(&ds2), |_| Ok(())).unwrap();
        assert_eq!(state2.loss_history.len(), 2);
    }

    #[test]
    fn missing_phase_two_dataset_is_a_contract_error() {
        let model_cfg = toy_model_cfg();
        let mut cfg = toy_train_cfg();
        cfg.epochs_phase1 = 1;
        cfg.epochs_phase2 = 1;
        let op = build_gaussian_operator::<f64>(0.25, 81, 2).unwrap();
        let ds = synthetic_dataset(&op, 4, 28);
        let mut state = TrainState::new(&model_cfg, &cfg, op);
        let err = train(&mut state, &model_cfg, &cfg, &ds, None, |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn divergence_guard_reports_non_finite_loss() {
        let model_cfg = toy_model_cfg();
        let cfg = toy_train_cfg();
        let op = build_gaussian_operator::<f64>(0.25, 81, 2).unwrap();
        let ds = synthetic_dataset(&op, 4, 29);
        let mut state = TrainState::new(&model_cfg, &cfg, op);
        // Poison one weight so the forward pass overflows immediately.
        state.params.stages[0].conv_in.weight.data_mut()[0] = f64::INFINITY;
        let err = train(&mut state, &model_cfg, &cfg, &ds, None, |_| Ok(())).unwrap_err();
        match err {
            Error::Data(msg) => assert!(msg.contains("diverged"), "{msg}"),
            other => panic!("expected divergence error, got {other}"),
        }
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.beta2 = 1.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.phase2_stride = 99;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
