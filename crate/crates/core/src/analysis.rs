//! Memory-analysis instruments: per-stage ConvLSTM gate weight norms and
//! radial spectral-density curves of memory features, plus CSV emission for
//! external plotting.

use crate::dft::dct2;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default number of radial frequency bins.
pub const DEFAULT_SPECTRAL_BINS: usize = 32;

/// Mean Frobenius norms of one stage's three ConvLSTM gates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateNorms {
    /// 1-based stage index.
    pub stage: usize,
    pub input: f64,
    pub forget: f64,
    pub output: f64,
}

fn frobenius<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.data()
        .iter()
        .map(|v| {
            let f = v.to_f64_val();
            f * f
        })
        .sum::<f64>()
        .sqrt()
}

/// Per-stage gate weight norms: for gate g ∈ {input, forget, output}, the
/// mean of the Frobenius norms of its stage-feature and hidden-state kernels
/// (`W_sg`, `W_hg`). A pure function of the parameters; requires the
/// ConvLSTM memory (every other cross-layer variant has no gates).
pub fn gate_weight_norms<T: Scalar>(params: &ModelParams<T>) -> Result<Vec<GateNorms>> {
    let mut out = Vec::with_capacity(params.stages.len());
    for (k, stage) in params.stages.iter().enumerate() {
        let lstm = stage.lstm.as_ref().ok_or_else(|| {
            Error::contract(format!(
                "gate_weight_norms needs the ConvLSTM memory, but stage {} has no gates \
                 (model was built with a different cross-layer variant)",
                k + 1
            ))
        })?;
        out.push(GateNorms {
            stage: k + 1,
            input: 0.5 * (frobenius(&lstm.w_si) + frobenius(&lstm.w_hi)),
            forget: 0.5 * (frobenius(&lstm.w_sf) + frobenius(&lstm.w_hf)),
            output: 0.5 * (frobenius(&lstm.w_so) + frobenius(&lstm.w_ho)),
        });
    }
    Ok(out)
}

/// A radially binned power spectrum: `(normalized frequency, mean power)`
/// pairs with strictly increasing frequencies in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct SpectralCurve {
    pub bins: Vec<(f64, f64)>,
}

/// Radial spectral density of a `[1, C, H, W]` feature map (H = W).
///
/// Each channel is transformed with the orthonormal 2-D DCT-II; the squared
/// coefficients are assigned to radial-frequency bins by
/// `r(u, v) = √(u² + v²) / √(2·(H−1)²)` with inclusive lower bin edges, then
/// averaged within each bin and across channels. By Parseval the energy is
/// conserved: `Σ_b power_b · count_b` equals the channel-averaged input
/// energy `Σ feature² / C`.
pub fn spectral_density<T: Scalar>(feature: &Tensor<T>, bins: usize) -> Result<SpectralCurve> {
    if feature.ndim() != 4 || feature.shape()[0] != 1 {
        return Err(Error::contract(format!(
            "spectral_density expects a [1,C,H,W] feature map, got {:?}",
            feature.shape()
        )));
    }
    let (c, h, w) = (feature.shape()[1], feature.shape()[2], feature.shape()[3]);
    if h != w {
        return Err(Error::contract(format!(
            "spectral_density needs square feature maps, got {}x{}",
            h, w
        )));
    }
    if h < 2 {
        return Err(Error::contract(
            "spectral_density needs at least 2x2 feature maps",
        ));
    }
    if bins == 0 {
        return Err(Error::contract("spectral_density needs at least one bin"));
    }

    // Radial bin of each (u, v) coefficient; shared across channels.
    let denom = ((2 * (h - 1) * (h - 1)) as f64).sqrt();
    let mut bin_of = vec![0usize; h * h];
    let mut counts = vec![0usize; bins];
    for u in 0..h {
        for v in 0..h {
            let r = ((u * u + v * v) as f64).sqrt() / denom;
            let b = ((r * bins as f64).floor() as usize).min(bins - 1);
            bin_of[u * h + v] = b;
            counts[b] += 1;
        }
    }

    let mut power = vec![0.0f64; bins];
    let plane = h * w;
    for ch in 0..c {
        let start = ch * plane;
        let img = Tensor::from_fn(&[h, w], |i| feature.data()[start + i].to_f64_val());
        let coef = dct2(&img)?;
        for (i, &x) in coef.data().iter().enumerate() {
            power[bin_of[i]] += x * x;
        }
    }

    let curve = (0..bins)
        .map(|b| {
            let freq = (b as f64 + 0.5) / bins as f64;
            let mean = if counts[b] == 0 {
                0.0
            } else {
                power[b] / (counts[b] * c) as f64
            };
            (freq, mean)
        })
        .collect();
    Ok(SpectralCurve { bins: curve })
}

/// Number of DCT coefficients falling into each radial bin for an `h×h` map.
/// Exposed so energy checks can weight the mean powers back into sums.
pub fn bin_counts(h: usize, bins: usize) -> Vec<usize> {
    let denom = ((2 * (h - 1) * (h - 1)) as f64).sqrt();
    let mut counts = vec![0usize; bins];
    for u in 0..h {
        for v in 0..h {
            let r = ((u * u + v * v) as f64).sqrt() / denom;
            counts[((r * bins as f64).floor() as usize).min(bins - 1)] += 1;
        }
    }
    counts
}

/// CSV for gate norms: one row per stage/gate pair.
pub fn gate_norms_csv(norms: &[GateNorms], comment: &str) -> String {
    let mut out = String::new();
    if !comment.is_empty() {
        for line in comment.lines() {
            out.push_str(&format!("# {}\n", line));
        }
    }
    out.push_str("stage,gate,norm\n");
    for n in norms {
        out.push_str(&format!("{},input,{:.12e}\n", n.stage, n.input));
        out.push_str(&format!("{},forget,{:.12e}\n", n.stage, n.forget));
        out.push_str(&format!("{},output,{:.12e}\n", n.stage, n.output));
    }
    out
}

/// CSV for per-stage spectral curves: one row per stage/frequency pair.
pub fn spectral_csv(curves: &[(usize, SpectralCurve)], comment: &str) -> String {
    let mut out = String::new();
    if !comment.is_empty() {
        for line in comment.lines() {
            out.push_str(&format!("# {}\n", line));
        }
    }
    out.push_str("stage,frequency,power\n");
    for (stage, curve) in curves {
        for (freq, power) in &curve.bins {
            out.push_str(&format!("{},{:.6},{:.12e}\n", stage, freq, power));
        }
    }
    out
}
