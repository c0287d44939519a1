//! Reconstruction quality: whole-image recovery through overlapping blocks,
//! PSNR, SSIM, and the evaluation report.
//!
//! Metrics operate on 8-bit luminance scale (`[0, 255]` as `f64`); the
//! reconstruction path converts to the model's unit scale internally and
//! back on output.

use std::sync::Arc;

use serde::Serialize;

use crate::cs::BlockGrid;
use crate::error::{Error, Result};
use crate::model::{
    model_forward, ForwardSpec, Measurements, ModelConfig, ModelParams, OperatorRef,
};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB with a 255 peak. Returns `+∞` when the
/// images are identical.
pub fn psnr(reference: &Tensor<f64>, test: &Tensor<f64>) -> Result<f64> {
    if reference.shape() != test.shape() {
        return Err(Error::shape(
            "psnr",
            format!("{:?}", reference.shape()),
            format!("{:?}", test.shape()),
        ));
    }
    let mut mse = 0.0;
    for (a, b) in reference.data().iter().zip(test.data()) {
        let d = a - b;
        mse += d * d;
    }
    mse /= reference.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 255.0;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid (no padding) separable Gaussian filtering: `[H, W] -> [H-10, W-10]`.
fn gaussian_filter(img: &Tensor<f64>) -> Tensor<f64> {
    let k = gaussian_kernel();
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    // Rows first.
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * img.data()[r * w + c + t];
            }
            rows[r * wo + c] = acc;
        }
    }
    let mut out = Tensor::zeros(&[ho, wo]);
    for r in 0..ho {
        for c in 0..wo {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * rows[(r + t) * wo + c];
            }
            out.data_mut()[r * wo + c] = acc;
        }
    }
    out
}

/// Mean structural similarity with the standard 11×11 Gaussian window
/// (σ = 1.5), K1 = 0.01, K2 = 0.03 on a 255 dynamic range.
pub fn ssim(reference: &Tensor<f64>, test: &Tensor<f64>) -> Result<f64> {
    if reference.shape() != test.shape() {
        return Err(Error::shape(
            "ssim",
            format!("{:?}", reference.shape()),
            format!("{:?}", test.shape()),
        ));
    }
    if reference.ndim() != 2 {
        return Err(Error::shape(
            "ssim",
            "[H,W]",
            format!("{:?}", reference.shape()),
        ));
    }
    let (h, w) = (reference.shape()[0], reference.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::data(format!(
            "ssim needs images of at least {0}x{0}, got {1}x{2}",
            SSIM_WINDOW, h, w
        )));
    }
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);

    let xx = reference.zip_map(reference, |a, b| a * b)?;
    let yy = test.zip_map(test, |a, b| a * b)?;
    let xy = reference.zip_map(test, |a, b| a * b)?;
    let mu_x = gaussian_filter(reference);
    let mu_y = gaussian_filter(test);
    let sxx = gaussian_filter(&xx);
    let syy = gaussian_filter(&yy);
    let sxy = gaussian_filter(&xy);

    let mut acc = 0.0;
    for i in 0..mu_x.numel() {
        let (mx, my) = (mu_x.data()[i], mu_y.data()[i]);
        let var_x = sxx.data()[i] - mx * mx;
        let var_y = syy.data()[i] - my * my;
        let cov = sxy.data()[i] - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
        acc += num / den;
    }
    Ok(acc / mu_x.numel() as f64)
}

/// Reconstructs a full grayscale image (`[H, W]`, values in `[0, 255]`) by
/// simulating measurements and running the model.
///
/// Gaussian operators use the overlapping-unfold protocol: the image is cut
/// into operator-sized blocks at `stride`, each block is sampled, and every
/// stage folds its per-block corrections back to image size. MRI operators
/// reconstruct at mask size directly (stride is ignored). The output is
/// clipped to `[0, 255]`.
pub fn reconstruct_image<T: Scalar>(
    image: &Tensor<f64>,
    op: OperatorRef<'_, T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
    stride: usize,
) -> Result<Tensor<f64>> {
    if image.ndim() != 2 {
        return Err(Error::shape(
            "reconstruct_image",
            "[H,W]",
            format!("{:?}", image.shape()),
        ));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let unit = image.map(|v| v / 255.0).cast::<T>();

    let mut tape = Tape::new();
    let (x_id, out_shape): (_, Vec<usize>) = match op {
        OperatorRef::Gaussian(g) => {
            let block = (g.n() as f64).sqrt().round() as usize;
            if h < block || w < block {
                return Err(Error::data(format!(
                    "image {}x{} is smaller than the {}px sampling block",
                    h, w, block
                )));
            }
            let grid = Arc::new(BlockGrid::new(h, w, block, stride)?);
            let mut rows = Tensor::zeros(&[grid.num_blocks(), g.n()]);
            grid.unfold_into(unit.data(), rows.data_mut());
            let result = model_forward(
                &mut tape,
                params,
                config,
                ForwardSpec {
                    op: OperatorRef::Gaussian(g),
                    measurements: Measurements::GaussianFromBlocks(rows),
                    grid: Some(grid),
                    trainable: false,
                    learn_phi: false,
                    record_trajectory: false,
                },
            )?;
            (result.x_final, vec![1, 1, h, w])
        }
        OperatorRef::Mri(m) => {
            if m.height() != h || m.width() != w {
                return Err(Error::shape(
                    "reconstruct_image",
                    format!("[{},{}] (mask size)", m.height(), m.width()),
                    format!("[{},{}]", h, w),
                ));
            }
            let k = m.forward(&unit)?;
            let phity = m.adjoint::<T>(&k)?.reshape(&[1, h * w])?;
            let result = model_forward(
                &mut tape,
                params,
                config,
                ForwardSpec {
                    op: OperatorRef::Mri(m),
                    measurements: Measurements::MriAdjoint(phity),
                    grid: None,
                    trainable: false,
                    learn_phi: false,
                    record_trajectory: false,
                },
            )?;
            (result.x_final, vec![1, h * w])
        }
    };
    debug_assert_eq!(tape.shape(x_id), &out_shape[..]);
    let out = tape.value(x_id);
    let mut img = Tensor::zeros(&[h, w]);
    for (dst, &src) in img.data_mut().iter_mut().zip(out.data()) {
        *dst = (src.to_f64_val() * 255.0).clamp(0.0, 255.0);
    }
    Ok(img)
}

/// Per-image scores plus dataset means and the configuration echo.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub ratio: f64,
    pub hsm: String,
    pub clm: String,
    pub stages: usize,
    pub channels: usize,
    pub stride: usize,
    pub checkpoint: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

impl EvalReport {
    pub fn new(
        images: Vec<ImageScore>,
        config: &ModelConfig,
        stride: usize,
        checkpoint: &str,
    ) -> Self {
        let n = images.len().max(1) as f64;
        let mean_psnr = images.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|s| s.ssim).sum::<f64>() / n;
        Self {
            images,
            mean_psnr,
            mean_ssim,
            ratio: config.ratio,
            hsm: config.hsm.to_string(),
            clm: config.clm.to_string(),
            stages: config.stages,
            channels: config.channels,
            stride,
            checkpoint: checkpoint.to_string(),
        }
    }

    /// JSON form (note: serde_json renders a `+∞` PSNR as `null`).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let name_w = self
            .images
            .iter()
            .map(|s| s.name.len())
            .chain(["image".len(), "mean".len()])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        out.push_str(&format!(
            "{:<name_w$}  {:>9}  {:>7}\n",
            "image", "psnr(dB)", "ssim"
        ));
        for s in &self.images {
            out.push_str(&format!(
                "{:<name_w$}  {:>9.4}  {:>7.4}\n",
                s.name, s.psnr, s.ssim
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:>9.4}  {:>7.4}\n",
            "mean", self.mean_psnr, self.mean_ssim
        ));
        out
    }
}
