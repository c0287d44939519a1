//! The unfolded K-stage reconstruction network.
//!
//! Every stage runs a gradient-descent module (GDM) followed by a learned
//! proximal mapping. The proximal path is a Conv → RB → RB → Conv residual
//! stack; two optional memory mechanisms thread extra state through it:
//!
//! - HSM: a C-channel feature `z` handed from stage to stage, concatenated
//!   with the 1-channel image at the stage input. Variants differ in where
//!   `z` is tapped: `star` = first conv output, `circle` = RB1 output,
//!   `rb2` = RB2 output.
//! - CLM: a ConvLSTM hidden/cell pair `(h, c)` threaded across all stages
//!   between RB1 and RB2 (`lstm`), or cheaper stand-ins that add (`plus`) or
//!   concat-merge (`concat`) the previous stage's pre-RB2 feature.
//!
//! `hsm = rb2, clm = lstm` is the full network; `hsm = none, clm = none` is
//! the plain proximal mapping.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cs::{BlockGrid, GaussianOperator, MRIOperator};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HsmVariant {
    None,
    Star,
    Circle,
    Rb2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClmVariant {
    None,
    Plus,
    Concat,
    Lstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    Gaussian,
    Mri,
}

impl fmt::Display for HsmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HsmVariant::None => "none",
            HsmVariant::Star => "star",
            HsmVariant::Circle => "circle",
            HsmVariant::Rb2 => "rb2",
        })
    }
}

impl FromStr for HsmVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(HsmVariant::None),
            "star" => Ok(HsmVariant::Star),
            "circle" => Ok(HsmVariant::Circle),
            "rb2" => Ok(HsmVariant::Rb2),
            other => Err(Error::config(format!(
                "unknown hsm variant '{}' (expected none|star|circle|rb2)",
                other
            ))),
        }
    }
}

impl fmt::Display for ClmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClmVariant::None => "none",
            ClmVariant::Plus => "plus",
            ClmVariant::Concat => "concat",
            ClmVariant::Lstm => "lstm",
        })
    }
}

impl FromStr for ClmVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ClmVariant::None),
            "plus" => Ok(ClmVariant::Plus),
            "concat" => Ok(ClmVariant::Concat),
            "lstm" => Ok(ClmVariant::Lstm),
            other => Err(Error::config(format!(
                "unknown clm variant '{}' (expected none|plus|concat|lstm)",
                other
            ))),
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OperatorKind::Gaussian => "gaussian",
            OperatorKind::Mri => "mri",
        })
    }
}

impl FromStr for OperatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(OperatorKind::Gaussian),
            "mri" => Ok(OperatorKind::Mri),
            other => Err(Error::config(format!(
                "unknown operator kind '{}' (expected gaussian|mri)",
                other
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Stage count K.
    pub stages: usize,
    /// Feature channels C.
    pub channels: usize,
    pub hsm: HsmVariant,
    pub clm: ClmVariant,
    pub operator: OperatorKind,
    /// Measurement ratio M/N (for MRI: the mask's sampling fraction, informational).
    pub ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stages: 25,
            channels: 32,
            hsm: HsmVariant::Rb2,
            clm: ClmVariant::Lstm,
            operator: OperatorKind::Gaussian,
            ratio: 0.25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 {
            return Err(Error::config("stage count K must be >= 1"));
        }
        if self.channels < 1 {
            return Err(Error::config("channel count C must be >= 1"));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::config(format!("ratio {} outside (0, 1]", self.ratio)));
        }
        Ok(())
    }

    /// Input channels of each stage's first conv: the 1-channel image, plus
    /// the C-channel HSM feature when that mechanism is on.
    pub fn stage_in_channels(&self) -> usize {
        match self.hsm {
            HsmVariant::None => 1,
            _ => self.channels + 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    fn zeros(c_out: usize, c_in: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[c_out, c_in, 3, 3]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    fn kaiming(c_out: usize, c_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (c_in * 9) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Self {
            weight: Tensor::from_fn(&[c_out, c_in, 3, 3], |_| {
                T::from_f64(rng.gen_range(-bound..bound))
            }),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResidualBlockParams<T: Scalar> {
    pub conv_a: ConvParams<T>,
    pub conv_b: ConvParams<T>,
}

impl<T: Scalar> ResidualBlockParams<T> {
    fn zeros(c: usize) -> Self {
        Self {
            conv_a: ConvParams::zeros(c, c),
            conv_b: ConvParams::zeros(c, c),
        }
    }

    fn kaiming(c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv_a: ConvParams::kaiming(c, c, rng),
            conv_b: ConvParams::kaiming(c, c, rng),
        }
    }
}

/// ConvLSTM gate parameters: per gate, one kernel on the stage feature (s)
/// and one on the previous hidden state (h), plus one bias.
#[derive(Clone, Debug)]
pub struct ConvLstmParams<T: Scalar> {
    pub w_si: Tensor<T>,
    pub w_hi: Tensor<T>,
    pub w_sf: Tensor<T>,
    pub w_hf: Tensor<T>,
    pub w_sc: Tensor<T>,
    pub w_hc: Tensor<T>,
    pub w_so: Tensor<T>,
    pub w_ho: Tensor<T>,
    pub b_i: Tensor<T>,
    pub b_f: Tensor<T>,
    pub b_c: Tensor<T>,
    pub b_o: Tensor<T>,
}

impl<T: Scalar> ConvLstmParams<T> {
    pub fn zeros(c: usize) -> Self {
        let k = || Tensor::zeros(&[c, c, 3, 3]);
        let b = || Tensor::zeros(&[c]);
        Self {
            w_si: k(),
            w_hi: k(),
            w_sf: k(),
            w_hf: k(),
            w_sc: k(),
            w_hc: k(),
            w_so: k(),
            w_ho: k(),
            b_i: b(),
            b_f: b(),
            b_c: b(),
            b_o: b(),
        }
    }

    fn kaiming(c: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut k = || ConvParams::<T>::kaiming(c, c, rng).weight;
        let w_si = k();
        let w_hi = k();
        let w_sf = k();
        let w_hf = k();
        let w_sc = k();
        let w_hc = k();
        let w_so = k();
        let w_ho = k();
        let b = || Tensor::zeros(&[c]);
        Self {
            w_si,
            w_hi,
            w_sf,
            w_hf,
            w_sc,
            w_hc,
            w_so,
            w_ho,
            b_i: b(),
            b_f: b(),
            b_c: b(),
            b_o: b(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageParams<T: Scalar> {
    /// Learnable GDM step size ρ (single element).
    pub rho: Tensor<T>,
    /// First conv of the stage: 1 → C (`hsm = none`) or C+1 → C.
    pub conv_in: ConvParams<T>,
    pub rb1: ResidualBlockParams<T>,
    pub rb2: ResidualBlockParams<T>,
    /// Final conv back to the image: C → 1.
    pub conv_out: ConvParams<T>,
    /// CLM `concat` merge conv: 2C → C.
    pub merge: Option<ConvParams<T>>,
    /// CLM `lstm` cell parameters.
    pub lstm: Option<ConvLstmParams<T>>,
}

#[derive(Clone, Debug)]
pub struct ModelParams<T: Scalar> {
    /// HSM feature initializer `z⁰ = Conv0(Φᵀy)`: 1 → C. Present iff hsm ≠ none.
    pub conv0: Option<ConvParams<T>>,
    pub stages: Vec<StageParams<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Deterministic initialization: ρ = 1 everywhere, Kaiming-uniform conv
    /// kernels, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let c_in = config.stage_in_channels();
        let conv0 = match config.hsm {
            HsmVariant::None => None,
            _ => Some(ConvParams::kaiming(c, 1, &mut rng)),
        };
        let stages = (0..config.stages)
            .map(|_| StageParams {
                rho: Tensor::scalar(T::one()),
                conv_in: ConvParams::kaiming(c, c_in, &mut rng),
                rb1: ResidualBlockParams::kaiming(c, &mut rng),
                rb2: ResidualBlockParams::kaiming(c, &mut rng),
                conv_out: ConvParams::kaiming(1, c, &mut rng),
                merge: match config.clm {
                    ClmVariant::Concat => Some(ConvParams::kaiming(c, 2 * c, &mut rng)),
                    _ => None,
                },
                lstm: match config.clm {
                    ClmVariant::Lstm => Some(ConvLstmParams::kaiming(c, &mut rng)),
                    _ => None,
                },
            })
            .collect();
        Self { conv0, stages }
    }

    /// All-zero weights (ρ = 1): useful for fixed-point and degeneration tests.
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config.channels;
        let c_in = config.stage_in_channels();
        let conv0 = match config.hsm {
            HsmVariant::None => None,
            _ => Some(ConvParams::zeros(c, 1)),
        };
        let stages = (0..config.stages)
            .map(|_| StageParams {
                rho: Tensor::scalar(T::one()),
                conv_in: ConvParams::zeros(c, c_in),
                rb1: ResidualBlockParams::zeros(c),
                rb2: ResidualBlockParams::zeros(c),
                conv_out: ConvParams::zeros(1, c),
                merge: match config.clm {
                    ClmVariant::Concat => Some(ConvParams::zeros(c, 2 * c)),
                    _ => None,
                },
                lstm: match config.clm {
                    ClmVariant::Lstm => Some(ConvLstmParams::zeros(c)),
                    _ => None,
                },
            })
            .collect();
        Self { conv0, stages }
    }

    /// Visits every tensor in a fixed, documented order. This order defines
    /// checkpoint layout, optimizer slot indexing, and leaf registration.
    pub fn walk(&self, mut f: impl FnMut(String, &Tensor<T>)) {
        fn conv<T: Scalar>(name: &str, p: &ConvParams<T>, f: &mut impl FnMut(String, &Tensor<T>)) {
            f(format!("{name}.w"), &p.weight);
            f(format!("{name}.b"), &p.bias);
        }
        if let Some(c0) = &self.conv0 {
            conv("conv0", c0, &mut f);
        }
        for (k, s) in self.stages.iter().enumerate() {
            let p = format!("stage{k}");
            f(format!("{p}.rho"), &s.rho);
            conv(&format!("{p}.conv_in"), &s.conv_in, &mut f);
            conv(&format!("{p}.rb1.a"), &s.rb1.conv_a, &mut f);
            conv(&format!("{p}.rb1.b"), &s.rb1.conv_b, &mut f);
            if let Some(m) = &s.merge {
                conv(&format!("{p}.merge"), m, &mut f);
            }
            if let Some(l) = &s.lstm {
                f(format!("{p}.lstm.w_si"), &l.w_si);
                f(format!("{p}.lstm.w_hi"), &l.w_hi);
                f(format!("{p}.lstm.w_sf"), &l.w_sf);
                f(format!("{p}.lstm.w_hf"), &l.w_hf);
                f(format!("{p}.lstm.w_sc"), &l.w_sc);
                f(format!("{p}.lstm.w_hc"), &l.w_hc);
                f(format!("{p}.lstm.w_so"), &l.w_so);
                f(format!("{p}.lstm.w_ho"), &l.w_ho);
                f(format!("{p}.lstm.b_i"), &l.b_i);
                f(format!("{p}.lstm.b_f"), &l.b_f);
                f(format!("{p}.lstm.b_c"), &l.b_c);
                f(format!("{p}.lstm.b_o"), &l.b_o);
            }
            conv(&format!("{p}.rb2.a"), &s.rb2.conv_a, &mut f);
            conv(&format!("{p}.rb2.b"), &s.rb2.conv_b, &mut f);
            conv(&format!("{p}.conv_out"), &s.conv_out, &mut f);
        }
    }

    /// Mutable visit in exactly the same order as [`ModelParams::walk`].
    pub fn walk_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        fn conv<T: Scalar>(
            name: &str,
            p: &mut ConvParams<T>,
            f: &mut impl FnMut(&str, &mut Tensor<T>),
        ) {
            f(&format!("{name}.w"), &mut p.weight);
            f(&format!("{name}.b"), &mut p.bias);
        }
        if let Some(c0) = &mut self.conv0 {
            conv("conv0", c0, &mut f);
        }
        for (k, s) in self.stages.iter_mut().enumerate() {
            let p = format!("stage{k}");
            f(&format!("{p}.rho"), &mut s.rho);
            conv(&format!("{p}.conv_in"), &mut s.conv_in, &mut f);
            conv(&format!("{p}.rb1.a"), &mut s.rb1.conv_a, &mut f);
            conv(&format!("{p}.rb1.b"), &mut s.rb1.conv_b, &mut f);
            if let Some(m) = &mut s.merge {
                conv(&format!("{p}.merge"), m, &mut f);
            }
            if let Some(l) = &mut s.lstm {
                f(&format!("{p}.lstm.w_si"), &mut l.w_si);
                f(&format!("{p}.lstm.w_hi"), &mut l.w_hi);
                f(&format!("{p}.lstm.w_sf"), &mut l.w_sf);
                f(&format!("{p}.lstm.w_hf"), &mut l.w_hf);
                f(&format!("{p}.lstm.w_sc"), &mut l.w_sc);
                f(&format!("{p}.lstm.w_hc"), &mut l.w_hc);
                f(&format!("{p}.lstm.w_so"), &mut l.w_so);
                f(&format!("{p}.lstm.w_ho"), &mut l.w_ho);
                f(&format!("{p}.lstm.b_i"), &mut l.b_i);
                f(&format!("{p}.lstm.b_f"), &mut l.b_f);
                f(&format!("{p}.lstm.b_c"), &mut l.b_c);
                f(&format!("{p}.lstm.b_o"), &mut l.b_o);
            }
            conv(&format!("{p}.rb2.a"), &mut s.rb2.conv_a, &mut f);
            conv(&format!("{p}.rb2.b"), &mut s.rb2.conv_b, &mut f);
            conv(&format!("{p}.conv_out"), &mut s.conv_out, &mut f);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.walk(|_, t| n += t.numel());
        n
    }

    /// Flattens all parameters into one vector (walk order).
    pub fn flatten(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.param_count());
        self.walk(|_, t| data.extend_from_slice(t.data()));
        Tensor::new(&[data.len()], data).expect("flat parameter vector")
    }

    /// Overwrites all parameters from a flat vector (walk order).
    pub fn unflatten(&mut self, flat: &Tensor<T>) -> Result<()> {
        if flat.numel() != self.param_count() {
            return Err(Error::shape(
                "ModelParams::unflatten",
                format!("[{}]", self.param_count()),
                format!("{:?}", flat.shape()),
            ));
        }
        let mut off = 0;
        self.walk_mut(|_, t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat.data()[off..off + n]);
            off += n;
        });
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        fn conv<T: Scalar, U: Scalar>(p: &ConvParams<T>) -> ConvParams<U> {
            ConvParams {
                weight: p.weight.cast(),
                bias: p.bias.cast(),
            }
        }
        ModelParams {
            conv0: self.conv0.as_ref().map(conv),
            stages: self
                .stages
                .iter()
                .map(|s| StageParams {
                    rho: s.rho.cast(),
                    conv_in: conv(&s.conv_in),
                    rb1: ResidualBlockParams {
                        conv_a: conv(&s.rb1.conv_a),
                        conv_b: conv(&s.rb1.conv_b),
                    },
                    rb2: ResidualBlockParams {
                        conv_a: conv(&s.rb2.conv_a),
                        conv_b: conv(&s.rb2.conv_b),
                    },
                    conv_out: conv(&s.conv_out),
                    merge: s.merge.as_ref().map(conv),
                    lstm: s.lstm.as_ref().map(|l| ConvLstmParams {
                        w_si: l.w_si.cast(),
                        w_hi: l.w_hi.cast(),
                        w_sf: l.w_sf.cast(),
                        w_hf: l.w_hf.cast(),
                        w_sc: l.w_sc.cast(),
                        w_hc: l.w_hc.cast(),
                        w_so: l.w_so.cast(),
                        w_ho: l.w_ho.cast(),
                        b_i: l.b_i.cast(),
                        b_f: l.b_f.cast(),
                        b_c: l.b_c.cast(),
                        b_o: l.b_o.cast(),
                    }),
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Tape-side forward
// ---------------------------------------------------------------------------

struct ConvIds {
    w: TensorId,
    b: TensorId,
}

struct RbIds {
    a: ConvIds,
    b: ConvIds,
}

struct LstmIds {
    w_si: TensorId,
    w_hi: TensorId,
    w_sf: TensorId,
    w_hf: TensorId,
    w_sc: TensorId,
    w_hc: TensorId,
    w_so: TensorId,
    w_ho: TensorId,
    b_i: TensorId,
    b_f: TensorId,
    b_c: TensorId,
    b_o: TensorId,
}

struct StageIds {
    rho: TensorId,
    conv_in: ConvIds,
    rb1: RbIds,
    rb2: RbIds,
    conv_out: ConvIds,
    merge: Option<ConvIds>,
    lstm: Option<LstmIds>,
}

struct ParamIds {
    conv0: Option<ConvIds>,
    stages: Vec<StageIds>,
    named: Vec<(String, TensorId)>,
}

/// Places every parameter tensor on the tape (in walk order) and mirrors the
/// parameter structure with tape ids.
fn register_params<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    trainable: bool,
) -> ParamIds {
    fn leaf<T: Scalar>(
        tape: &mut Tape<T>,
        named: &mut Vec<(String, TensorId)>,
        trainable: bool,
        name: String,
        t: &Tensor<T>,
    ) -> TensorId {
        let id = if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        };
        named.push((name, id));
        id
    }
    fn conv<T: Scalar>(
        tape: &mut Tape<T>,
        named: &mut Vec<(String, TensorId)>,
        trainable: bool,
        name: &str,
        p: &ConvParams<T>,
    ) -> ConvIds {
        ConvIds {
            w: leaf(tape, named, trainable, format!("{name}.w"), &p.weight),
            b: leaf(tape, named, trainable, format!("{name}.b"), &p.bias),
        }
    }
    let mut named = Vec::new();
    let tr = trainable;
    let conv0 = params
        .conv0
        .as_ref()
        .map(|c0| conv(tape, &mut named, tr, "conv0", c0));
    let mut stages = Vec::with_capacity(params.stages.len());
    for (k, s) in params.stages.iter().enumerate() {
        let p = format!("stage{k}");
        let rho = leaf(tape, &mut named, tr, format!("{p}.rho"), &s.rho);
        let conv_in = conv(tape, &mut named, tr, &format!("{p}.conv_in"), &s.conv_in);
        let rb1 = RbIds {
            a: conv(tape, &mut named, tr, &format!("{p}.rb1.a"), &s.rb1.conv_a),
            b: conv(tape, &mut named, tr, &format!("{p}.rb1.b"), &s.rb1.conv_b),
        };
        let merge = s
            .merge
            .as_ref()
            .map(|m| conv(tape, &mut named, tr, &format!("{p}.merge"), m));
        let lstm = s.lstm.as_ref().map(|l| LstmIds {
            w_si: leaf(tape, &mut named, tr, format!("{p}.lstm.w_si"), &l.w_si),
            w_hi: leaf(tape, &mut named, tr, format!("{p}.lstm.w_hi"), &l.w_hi),
            w_sf: leaf(tape, &mut named, tr, format!("{p}.lstm.w_sf"), &l.w_sf),
            w_hf: leaf(tape, &mut named, tr, format!("{p}.lstm.w_hf"), &l.w_hf),
            w_sc: leaf(tape, &mut named, tr, format!("{p}.lstm.w_sc"), &l.w_sc),
            w_hc: leaf(tape, &mut named, tr, format!("{p}.lstm.w_hc"), &l.w_hc),
            w_so: leaf(tape, &mut named, tr, format!("{p}.lstm.w_so"), &l.w_so),
            w_ho: leaf(tape, &mut named, tr, format!("{p}.lstm.w_ho"), &l.w_ho),
            b_i: leaf(tape, &mut named, tr, format!("{p}.lstm.b_i"), &l.b_i),
            b_f: leaf(tape, &mut named, tr, format!("{p}.lstm.b_f"), &l.b_f),
            b_c: leaf(tape, &mut named, tr, format!("{p}.lstm.b_c"), &l.b_c),
            b_o: leaf(tape, &mut named, tr, format!("{p}.lstm.b_o"), &l.b_o),
        });
        let rb2 = RbIds {
            a: conv(tape, &mut named, tr, &format!("{p}.rb2.a"), &s.rb2.conv_a),
            b: conv(tape, &mut named, tr, &format!("{p}.rb2.b"), &s.rb2.conv_b),
        };
        let conv_out = conv(tape, &mut named, tr, &format!("{p}.conv_out"), &s.conv_out);
        stages.push(StageIds {
            rho,
            conv_in,
            rb1,
            rb2,
            conv_out,
            merge,
            lstm,
        });
    }
    ParamIds {
        conv0,
        stages,
        named,
    }
}

fn conv_on<T: Scalar>(tape: &mut Tape<T>, x: TensorId, ids: &ConvIds) -> Result<TensorId> {
    tape.conv2d(x, ids.w, Some(ids.b))
}

/// `s + Conv_b(ReLU(Conv_a(s)))` on the tape.
fn residual_block_on<T: Scalar>(tape: &mut Tape<T>, s: TensorId, rb: &RbIds) -> Result<TensorId> {
    let a = conv_on(tape, s, &rb.a)?;
    let r = tape.relu(a);
    let b = conv_on(tape, r, &rb.b)?;
    tape.add(s, b)
}

/// One ConvLSTM step on the tape; returns (h, c).
fn conv_lstm_on<T: Scalar>(
    tape: &mut Tape<T>,
    l: &LstmIds,
    s: TensorId,
    h_prev: TensorId,
    c_prev: TensorId,
) -> Result<(TensorId, TensorId)> {
    let gate = |tape: &mut Tape<T>, ws: TensorId, wh: TensorId, b: TensorId| -> Result<TensorId> {
        let from_s = tape.conv2d(s, ws, Some(b))?;
        let from_h = tape.conv2d(h_prev, wh, None)?;
        tape.add(from_s, from_h)
    };
    let i_pre = gate(tape, l.w_si, l.w_hi, l.b_i)?;
    let f_pre = gate(tape, l.w_sf, l.w_hf, l.b_f)?;
    let g_pre = gate(tape, l.w_sc, l.w_hc, l.b_c)?;
    let o_pre = gate(tape, l.w_so, l.w_ho, l.b_o)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Inter-stage memory carried through the proximal stack.
struct StateIds {
    z: Option<TensorId>,
    h: Option<TensorId>,
    c: Option<TensorId>,
}

/// The proximal mapping of one stage, with both memory mechanisms dispatched
/// per config. Returns the next image estimate and updates the state in place.
fn proximal_on<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &StageIds,
    config: &ModelConfig,
    r_img: TensorId,
    state: &mut StateIds,
) -> Result<TensorId> {
    // Stage input: image channel, plus the HSM feature when enabled.
    let s_in = match config.hsm {
        HsmVariant::None => conv_on(tape, r_img, &ids.conv_in)?,
        _ => {
            let z = state
                .z
                .ok_or_else(|| Error::contract("hsm variant requires a carried z state"))?;
            let cat = tape.concat_channels(&[r_img, z])?;
            conv_on(tape, cat, &ids.conv_in)?
        }
    };
    let mut z_new = match config.hsm {
        HsmVariant::Star => Some(s_in),
        _ => None,
    };
    let s1 = residual_block_on(tape, s_in, &ids.rb1)?;
    if config.hsm == HsmVariant::Circle {
        z_new = Some(s1);
    }
    // CLM between the residual blocks.
    let s2 = match config.clm {
        ClmVariant::None => s1,
        ClmVariant::Plus => {
            let h = state
                .h
                .ok_or_else(|| Error::contract("clm=plus requires a carried h state"))?;
            let s2 = tape.add(s1, h)?;
            state.h = Some(s2);
            s2
        }
        ClmVariant::Concat => {
            let h = state
                .h
                .ok_or_else(|| Error::contract("clm=concat requires a carried h state"))?;
            let merge = ids
                .merge
                .as_ref()
                .ok_or_else(|| Error::contract("clm=concat requires merge conv parameters"))?;
            let cat = tape.concat_channels(&[s1, h])?;
            let s2 = conv_on(tape, cat, merge)?;
            state.h = Some(s2);
            s2
        }
        ClmVariant::Lstm => {
            let (h_prev, c_prev) = match (state.h, state.c) {
                (Some(h), Some(c)) => (h, c),
                _ => return Err(Error::contract("clm=lstm requires carried h and c states")),
            };
            let lstm = ids
                .lstm
                .as_ref()
                .ok_or_else(|| Error::contract("clm=lstm requires cell parameters"))?;
            let (h, c) = conv_lstm_on(tape, lstm, s1, h_prev, c_prev)?;
            state.h = Some(h);
            state.c = Some(c);
            h
        }
    };
    let s3 = residual_block_on(tape, s2, &ids.rb2)?;
    if config.hsm == HsmVariant::Rb2 {
        z_new = Some(s3);
    }
    if config.hsm != HsmVariant::None {
        state.z = Some(z_new.expect("hsm tap point assigned above"));
    }
    let out = conv_on(tape, s3, &ids.conv_out)?;
    tape.add(r_img, out)
}

/// How measurements enter the graph.
pub enum Measurements<T: Scalar> {
    /// Precollected Gaussian measurements, one `[M]` row per block.
    GaussianY(Tensor<T>),
    /// Ground-truth blocks `[R, N]`; `y = Φx` is computed on the tape, so a
    /// learnable Φ also receives gradients through the sampling step.
    GaussianFromBlocks(Tensor<T>),
    /// Precomputed `Φᴴy` rows `[R, N]` for the MRI operator.
    MriAdjoint(Tensor<T>),
}

pub enum OperatorRef<'a, T: Scalar> {
    Gaussian(&'a GaussianOperator<T>),
    Mri(&'a MRIOperator),
}

pub struct ForwardSpec<'a, T: Scalar> {
    pub op: OperatorRef<'a, T>,
    pub measurements: Measurements<T>,
    /// Whole-image mode: unfold/sample/fold through this grid at every GDM.
    pub grid: Option<Arc<BlockGrid>>,
    /// Register parameters as trainable leaves.
    pub trainable: bool,
    /// Register Φ as a trainable leaf (Gaussian only).
    pub learn_phi: bool,
    /// Record per-stage x/z/h/c values for analysis.
    pub record_trajectory: bool,
}

/// Per-stage memory snapshot (values, detached from the tape).
pub struct StageTrace<T: Scalar> {
    pub x: Tensor<T>,
    pub z: Option<Tensor<T>>,
    pub h: Option<Tensor<T>>,
    pub c: Option<Tensor<T>>,
}

pub struct ForwardResult<T: Scalar> {
    /// Final estimate: `[R, N]` rows in block mode, `[B, 1, H, W]` in
    /// whole-image mode.
    pub x_final: TensorId,
    /// Parameter leaves in walk order (for the optimizer).
    pub params: Vec<(String, TensorId)>,
    /// The Φ leaf when the operator is Gaussian.
    pub phi: Option<TensorId>,
    pub trajectory: Vec<StageTrace<T>>,
}

/// Builds the full K-stage forward graph on `tape`.
///
/// Block mode (`grid = None`): measurements hold R independent rows; the
/// estimate is kept as `[R, N]` rows, reshaped to `[R, 1, b, b]` images for
/// the conv stack. Whole-image mode (`grid = Some`): rows are the grid's
/// blocks of B images; sampling stays per-block while the conv stack and the
/// returned estimate live at image size, glued by unfold/fold-average.
pub fn model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
    spec: ForwardSpec<'_, T>,
) -> Result<ForwardResult<T>> {
    if params.stages.len() != config.stages && !(config.stages == 0 && params.stages.is_empty()) {
        return Err(Error::contract(format!(
            "config declares {} stages but parameters hold {}",
            config.stages,
            params.stages.len()
        )));
    }

    enum Ctx {
        Gaussian { phi: TensorId, y: TensorId },
        Mri { gram: Arc<crate::cs::MriGram>, phity: TensorId },
    }

    // Vector length N and the image spatial size for the conv stack.
    let (n, img_h, img_w): (usize, usize, usize);
    let ctx: Ctx;
    let phi_leaf: Option<TensorId>;

    match (&spec.op, &spec.measurements) {
        (OperatorRef::Gaussian(op), meas) => {
            n = op.n();
            if let Some(grid) = &spec.grid {
                if grid.block_len() != n {
                    return Err(Error::contract(format!(
                        "grid block {}² does not match operator N = {}",
                        grid.block(),
                        n
                    )));
                }
                img_h = grid.height();
                img_w = grid.width();
            } else {
                let b = (n as f64).sqrt().round() as usize;
                if b * b != n {
                    return Err(Error::contract(format!(
                        "block mode needs square blocks; N = {} is not a perfect square",
                        n
                    )));
                }
                img_h = b;
                img_w = b;
            }
            let phi = if spec.learn_phi {
                tape.param(op.phi().clone())
            } else {
                tape.constant(op.phi().clone())
            };
            phi_leaf = Some(phi);
            let y = match meas {
                Measurements::GaussianY(y) => {
                    if y.ndim() != 2 || y.shape()[1] != op.m() {
                        return Err(Error::shape(
                            "model_forward",
                            format!("[R,{}] measurements", op.m()),
                            format!("{:?}", y.shape()),
                        ));
                    }
                    tape.constant(y.clone())
                }
                Measurements::GaussianFromBlocks(xb) => {
                    if xb.ndim() != 2 || xb.shape()[1] != n {
                        return Err(Error::shape(
                            "model_forward",
                            format!("[R,{}] ground-truth blocks", n),
                            format!("{:?}", xb.shape()),
                        ));
                    }
                    let xb = tape.constant(xb.clone());
                    tape.matmul_nt(xb, phi)?
                }
                Measurements::MriAdjoint(_) => {
                    return Err(Error::contract(
                        "MRI measurements passed with a Gaussian operator",
                    ))
                }
            };
            ctx = Ctx::Gaussian { phi, y };
        }
        (OperatorRef::Mri(op), Measurements::MriAdjoint(phity)) => {
            if spec.grid.is_some() {
                return Err(Error::contract(
                    "the MRI operator works on whole images; block grids do not apply",
                ));
            }
            if spec.learn_phi {
                return Err(Error::contract("the MRI operator is not learnable"));
            }
            n = op.height() * op.width();
            img_h = op.height();
            img_w = op.width();
            if phity.ndim() != 2 || phity.shape()[1] != n {
                return Err(Error::shape(
                    "model_forward",
                    format!("[R,{}] adjoint rows", n),
                    format!("{:?}", phity.shape()),
                ));
            }
            phi_leaf = None;
            let phity = tape.constant(phity.clone());
            ctx = Ctx::Mri {
                gram: Arc::new(op.gram()),
                phity,
            };
        }
        (OperatorRef::Mri(_), _) => {
            return Err(Error::contract(
                "the MRI operator requires precomputed adjoint measurements",
            ))
        }
    }

    let ids = register_params(tape, params, spec.trainable);

    // x⁰ rows: Φᵀy (on-tape so a learnable Φ is differentiated through it).
    let x0_rows = match &ctx {
        Ctx::Gaussian { phi, y } => tape.matmul_nn(*y, *phi)?,
        Ctx::Mri { phity, .. } => *phity,
    };

    // Rows → image for the conv stack.
    let rows = tape.shape(x0_rows)[0];
    let (batch, to_image): (usize, Box<dyn Fn(&mut Tape<T>, TensorId) -> Result<TensorId>>) =
        match &spec.grid {
            Some(grid) => {
                let l = grid.num_blocks();
                if rows % l != 0 {
                    return Err(Error::contract(format!(
                        "whole-image mode: {} measurement rows is not a multiple of {} grid blocks",
                        rows, l
                    )));
                }
                let g = grid.clone();
                (rows / l, Box::new(move |t, id| t.fold_average(id, g.clone())))
            }
            None => {
                let (h, w) = (img_h, img_w);
                (rows, Box::new(move |t, id| t.reshape(id, &[t.shape(id)[0], 1, h, w])))
            }
        };
    let from_image: Box<dyn Fn(&mut Tape<T>, TensorId) -> Result<TensorId>> = match &spec.grid {
        Some(grid) => {
            let g = grid.clone();
            Box::new(move |t, id| t.unfold(id, g.clone()))
        }
        None => Box::new(move |t, id| {
            let r = t.shape(id)[0];
            t.reshape(id, &[r, n])
        }),
    };

    let mut x_img = to_image(tape, x0_rows)?;

    // Initial memory: z⁰ = Conv0(Φᵀy), h⁰ = c⁰ = 0.
    let mut state = StateIds {
        z: None,
        h: None,
        c: None,
    };
    if config.hsm != HsmVariant::None {
        let c0 = ids
            .conv0
            .as_ref()
            .ok_or_else(|| Error::contract("hsm variant requires conv0 parameters"))?;
        state.z = Some(conv_on(tape, x_img, c0)?);
    }
    if config.clm != ClmVariant::None {
        let zeros = Tensor::zeros(&[batch, config.channels, img_h, img_w]);
        state.h = Some(tape.constant(zeros.clone()));
        if config.clm == ClmVariant::Lstm {
            state.c = Some(tape.constant(zeros));
        }
    }

    let mut trajectory = Vec::new();
    for stage in &ids.stages {
        // GDM: r = x − ρ·Φᵀ(Φx − y), folded back to image space.
        let corr_img = match &ctx {
            Ctx::Gaussian { phi, y } => {
                let x_rows = from_image(tape, x_img)?;
                let yx = tape.matmul_nt(x_rows, *phi)?;
                let resid = tape.sub(yx, *y)?;
                let corr_rows = tape.matmul_nn(resid, *phi)?;
                to_image(tape, corr_rows)?
            }
            Ctx::Mri { gram, phity } => {
                let x_rows = from_image(tape, x_img)?;
                let gx = tape.self_adjoint(x_rows, gram.clone())?;
                let corr_rows = tape.sub(gx, *phity)?;
                to_image(tape, corr_rows)?
            }
        };
        let scaled = tape.scale_by(corr_img, stage.rho)?;
        let r_img = tape.sub(x_img, scaled)?;

        x_img = proximal_on(tape, stage, config, r_img, &mut state)?;

        if spec.record_trajectory {
            trajectory.push(StageTrace {
                x: tape.value(x_img).clone(),
                z: state.z.map(|id| tape.value(id).clone()),
                h: state.h.map(|id| tape.value(id).clone()),
                c: state.c.map(|id| tape.value(id).clone()),
            });
        }
    }

    let x_final = match &spec.grid {
        Some(_) => x_img,
        None => from_image(tape, x_img)?,
    };

    Ok(ForwardResult {
        x_final,
        params: ids.named,
        phi: phi_leaf,
        trajectory,
    })
}

// ---------------------------------------------------------------------------
// Value-level wrappers (tests, oracles, spec-level entry points)
// ---------------------------------------------------------------------------

/// One GDM step on plain values: `r = x − ρ·Φᵀ(Φx − y)`.
pub fn gdm_step<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    op: &GaussianOperator<T>,
    rho: T,
) -> Result<Tensor<T>> {
    let yx = op.sample(x)?;
    let resid = yx.zip_map(y, |a, b| a - b)?;
    let corr = op.adjoint(&resid)?;
    x.zip_map(&corr, |xv, cv| xv - rho * cv)
}

/// Residual block on plain values (shapes `[N, C, H, W]`).
pub fn residual_block<T: Scalar>(
    s: &Tensor<T>,
    params: &ResidualBlockParams<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let sid = tape.constant(s.clone());
    let rb = RbIds {
        a: ConvIds {
            w: tape.constant(params.conv_a.weight.clone()),
            b: tape.constant(params.conv_a.bias.clone()),
        },
        b: ConvIds {
            w: tape.constant(params.conv_b.weight.clone()),
            b: tape.constant(params.conv_b.bias.clone()),
        },
    };
    let out = residual_block_on(&mut tape, sid, &rb)?;
    Ok(tape.value(out).clone())
}

/// ConvLSTM cell on plain values (shapes `[N, C, H, W]`); returns `(h, c)`.
pub fn conv_lstm_cell<T: Scalar>(
    s: &Tensor<T>,
    h_prev: &Tensor<T>,
    c_prev: &Tensor<T>,
    params: &ConvLstmParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let sid = tape.constant(s.clone());
    let hid = tape.constant(h_prev.clone());
    let cid = tape.constant(c_prev.clone());
    let l = LstmIds {
        w_si: tape.constant(params.w_si.clone()),
        w_hi: tape.constant(params.w_hi.clone()),
        w_sf: tape.constant(params.w_sf.clone()),
        w_hf: tape.constant(params.w_hf.clone()),
        w_sc: tape.constant(params.w_sc.clone()),
        w_hc: tape.constant(params.w_hc.clone()),
        w_so: tape.constant(params.w_so.clone()),
        w_ho: tape.constant(params.w_ho.clone()),
        b_i: tape.constant(params.b_i.clone()),
        b_f: tape.constant(params.b_f.clone()),
        b_c: tape.constant(params.b_c.clone()),
        b_o: tape.constant(params.b_o.clone()),
    };
    let (h, c) = conv_lstm_on(&mut tape, &l, sid, hid, cid)?;
    Ok((tape.value(h).clone(), tape.value(c).clone()))
}

/// Runs the model on plain values and returns the final `[R, N]` estimate
/// (block mode) without keeping the tape.
pub fn model_forward_values<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    op: OperatorRef<'_, T>,
    measurements: Measurements<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let result = model_forward(
        &mut tape,
        params,
        config,
        ForwardSpec {
            op,
            measurements,
            grid: None,
            trainable: false,
            learn_phi: false,
            record_trajectory: false,
        },
    )?;
    Ok(tape.value(result.x_final).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cs::build_gaussian_operator;
    use rand::{Rng, SeedableRng};

    fn toy_config(hsm: HsmVariant, clm: ClmVariant) -> ModelConfig {
        ModelConfig {
            stages: 2,
            channels: 2,
            hsm,
            clm,
            operator: OperatorKind::Gaussian,
            ratio: 0.25,
        }
    }

    #[test]
    fn param_count_matches_hand_inventory() {
        // K=1, C=2, full variant. Counted from the layer shapes:
        //   conv0   1→2: 18 + 2      = 20
        //   rho                      = 1
        //   conv_in 3→2: 54 + 2      = 56
        //   rb1     2×(2→2: 36 + 2)  = 76
        //   rb2                      = 76
        //   conv_out 2→1: 18 + 1     = 19
        //   lstm    8×(2→2: 36) + 4×2 = 296
        let config = ModelConfig {
            stages: 1,
            channels: 2,
            hsm: HsmVariant::Rb2,
            clm: ClmVariant::Lstm,
            operator: OperatorKind::Gaussian,
            ratio: 0.25,
        };
        let params = ModelParams::<f64>::init(&config, 0);
        assert_eq!(params.param_count(), 544);
    }

    #[test]
    fn init_sets_rho_to_one_and_is_deterministic() {
        let config = toy_config(HsmVariant::Rb2, ClmVariant::Lstm);
        let a = ModelParams::<f32>::init(&config, 7);
        let b = ModelParams::<f32>::init(&config, 7);
        for s in &a.stages {
            assert_eq!(s.rho.data(), &[1.0]);
        }
        assert_eq!(a.flatten().data(), b.flatten().data());
        let c = ModelParams::<f32>::init(&config, 8);
        assert_ne!(a.flatten().data(), c.flatten().data());
    }

    #[test]
    fn walk_and_walk_mut_agree_on_order() {
        let config = toy_config(HsmVariant::Rb2, ClmVariant::Lstm);
        let mut params = ModelParams::<f64>::init(&config, 1);
        let mut names_a = Vec::new();
        params.walk(|n, _| names_a.push(n));
        let mut names_b = Vec::new();
        params.walk_mut(|n, _| names_b.push(n.to_string()));
        assert_eq!(names_a, names_b);
        // Round-trip through flatten/unflatten.
        let flat = params.flatten();
        let mut other = ModelParams::<f64>::init(&config, 99);
        other.unflatten(&flat).unwrap();
        assert_eq!(other.flatten().data(), flat.data());
    }

    #[test]
    fn gdm_hand_case() {
        // Φ=[[1,0]], x=[2,3], y=[1], ρ=0.5 → r=[1.5, 3].
        let phi = Tensor::new(&[1, 2], vec![1.0_f64, 0.0]).unwrap();
        let op = GaussianOperator::from_phi(phi, 0.5, false, 0).unwrap();
        let x = Tensor::new(&[2], vec![2.0, 3.0]).unwrap();
        let y = Tensor::new(&[1], vec![1.0]).unwrap();
        let r = gdm_step(&x, &y, &op, 0.5).unwrap();
        assert_eq!(r.data(), &[1.5, 3.0]);
    }

    #[test]
    fn gdm_zero_residual_and_zero_rho_are_identities() {
        let op = build_gaussian_operator::<f64>(0.5, 16, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[16], |_| rng.gen_range(-1.0..1.0));
        let y = op.sample(&x).unwrap();
        let r = gdm_step(&x, &y, &op, 0.7).unwrap();
        let diff = r.zip_map(&x, |a, b| (a - b).abs()).unwrap();
        assert!(diff.max_abs() < 1e-12);
        let y2 = Tensor::from_fn(&[op.m()], |_| rng.gen_range(-1.0..1.0));
        let r2 = gdm_step(&x, &y2, &op, 0.0).unwrap();
        assert_eq!(r2.data(), x.data());
    }

    #[test]
    fn residual_block_with_zero_weights_is_identity() {
        let params = ResidualBlockParams::<f64>::zeros(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Tensor::from_fn(&[2, 3, 4, 5], |_| rng.gen_range(-1.0..1.0));
        let out = residual_block(&s, &params).unwrap();
        assert_eq!(out.data(), s.data());
    }

    #[test]
    fn residual_block_matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let config_c = 2;
        let params = ResidualBlockParams::<f64>::kaiming(config_c, &mut rng);
        let s = Tensor::from_fn(&[1, config_c, 5, 5], |_| rng.gen_range(-1.0..1.0));
        let out = residual_block(&s, &params).unwrap();
        // Independent composition from the reference conv.
        let a = crate::conv::conv2d_reference(&s, &params.conv_a.weight, Some(&params.conv_a.bias))
            .unwrap();
        let relu = a.map(|v| v.max(0.0));
        let b = crate::conv::conv2d_reference(&relu, &params.conv_b.weight, Some(&params.conv_b.bias))
            .unwrap();
        let want = s.zip_map(&b, |x, y| x + y).unwrap();
        let diff = out.zip_map(&want, |x, y| (x - y).abs()).unwrap();
        assert!(diff.max_abs() < 1e-6);
    }

    #[test]
    fn conv_lstm_zero_weight_analytic_case() {
        let params = ConvLstmParams::<f64>::zeros(2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let c_prev = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let h_prev = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let (h, c) = conv_lstm_cell(&s, &h_prev, &c_prev, &params).unwrap();
        // All gates are σ(0) = 0.5 and the candidate is tanh(0) = 0.
        for (got, &cp) in c.data().iter().zip(c_prev.data()) {
            assert!((got - 0.5 * cp).abs() < 1e-12);
        }
        for (got, &cv) in h.data().iter().zip(c.data()) {
            assert!((got - 0.5 * cv.tanh()).abs() < 1e-12);
        }
        // Zero inputs stay zero.
        let zero = Tensor::zeros(&[1, 2, 4, 4]);
        let (h0, c0) = conv_lstm_cell(&zero, &zero, &zero, &params).unwrap();
        assert!(h0.data().iter().all(|&v| v == 0.0));
        assert!(c0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_lstm_hidden_state_is_strictly_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = ConvLstmParams::<f64>::kaiming(2, &mut rng);
        let s = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.gen_range(-3.0..3.0));
        let h_prev = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.gen_range(-0.9..0.9));
        let c_prev = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.gen_range(-3.0..3.0));
        let (h, _) = conv_lstm_cell(&s, &h_prev, &c_prev, &params).unwrap();
        assert!(h.data().iter().all(|&v| v.abs() < 1.0));
    }

    /// Block-mode forward on a random toy problem for a variant pair.
    fn run_variant(hsm: HsmVariant, clm: ClmVariant, seed: u64) -> Tensor<f64> {
        let mut config = toy_config(hsm, clm);
        config.ratio = 0.5;
        let op = build_gaussian_operator::<f64>(config.ratio, 81, 11).unwrap();
        let params = ModelParams::<f64>::init(&config, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let blocks = Tensor::from_fn(&[3, 81], |_| rng.gen_range(0.0..1.0));
        model_forward_values(
            &params,
            &config,
            OperatorRef::Gaussian(&op),
            Measurements::GaussianFromBlocks(blocks),
        )
        .unwrap()
    }

    #[test]
    fn every_variant_combination_runs_with_correct_shapes() {
        for hsm in [HsmVariant::None, HsmVariant::Star, HsmVariant::Circle, HsmVariant::Rb2] {
            for clm in [ClmVariant::None, ClmVariant::Plus, ClmVariant::Concat, ClmVariant::Lstm] {
                let out = run_variant(hsm, clm, 21);
                assert_eq!(out.shape(), &[3, 81], "{:?}/{:?}", hsm, clm);
                assert!(out.data().iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = run_variant(HsmVariant::Rb2, ClmVariant::Lstm, 33);
        let b = run_variant(HsmVariant::Rb2, ClmVariant::Lstm, 33);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_weights_with_square_operator_hold_the_fixed_point() {
        // ΦᵀΦ = I and zero conv stacks: every stage returns x unchanged, and
        // x⁰ = Φᵀy = x for y = Φx.
        let mut config = toy_config(HsmVariant::Rb2, ClmVariant::Lstm);
        config.ratio = 1.0;
        config.stages = 3;
        let op = build_gaussian_operator::<f64>(1.0, 64, 5).unwrap();
        let params = ModelParams::<f64>::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let blocks = Tensor::from_fn(&[2, 64], |_| rng.gen_range(0.0..1.0));
        let out = model_forward_values(
            &params,
            &config,
            OperatorRef::Gaussian(&op),
            Measurements::GaussianFromBlocks(blocks.clone()),
        )
        .unwrap();
        let diff = out.zip_map(&blocks, |a, b| (a - b).abs()).unwrap();
        assert!(diff.max_abs() < 1e-9, "max err {:e}", diff.max_abs());
    }

    #[test]
    fn k_zero_returns_the_adjoint_initialization() {
        let mut config = toy_config(HsmVariant::None, ClmVariant::None);
        config.stages = 0;
        let op = build_gaussian_operator::<f64>(0.25, 16, 6).unwrap();
        let params = ModelParams::<f64> {
            conv0: None,
            stages: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let blocks = Tensor::from_fn(&[1, 16], |_| rng.gen_range(0.0..1.0));
        let y = op.sample(&blocks.reshape(&[16]).unwrap()).unwrap();
        let out = model_forward_values(
            &params,
            &config,
            OperatorRef::Gaussian(&op),
            Measurements::GaussianY(y.reshape(&[1, op.m()]).unwrap()),
        )
        .unwrap();
        let x0 = op.adjoint(&y).unwrap();
        assert_eq!(out.data(), x0.data());
    }

    #[test]
    fn hsm_variants_with_zeroed_z_columns_degenerate_to_plain_pmm() {
        // Keep the image-channel column of conv_in, zero the z columns and
        // conv0: the HSM path then contributes nothing, for any tap point.
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let op = build_gaussian_operator::<f64>(0.5, 81, 12).unwrap();
        let blocks = Tensor::from_fn(&[2, 81], |_| rng.gen_range(0.0..1.0));

        let plain_cfg = toy_config(HsmVariant::None, ClmVariant::None);
        let plain = ModelParams::<f64>::init(&plain_cfg, 60);
        let plain_out = model_forward_values(
            &plain,
            &plain_cfg,
            OperatorRef::Gaussian(&op),
            Measurements::GaussianFromBlocks(blocks.clone()),
        )
        .unwrap();

        for hsm in [HsmVariant::Star, HsmVariant::Circle, HsmVariant::Rb2] {
            let cfg = toy_config(hsm, ClmVariant::None);
            let mut params = ModelParams::<f64>::init(&cfg, 61);
            params.conv0 = Some(ConvParams::zeros(cfg.channels, 1));
            for (k, s) in params.stages.iter_mut().enumerate() {
                // conv_in is [C, C+1, 3, 3] with the image as channel 0;
                // copy the plain model's [C, 1, 3, 3] kernel there, zero the rest.
                let mut w = Tensor::zeros(&[cfg.channels, cfg.channels + 1, 3, 3]);
                let pw = &plain.stages[k].conv_in.weight;
                for co in 0..cfg.channels {
                    for t in 0..9 {
                        let v = pw.data()[co * 9 + t];
                        w.data_mut()[co * (cfg.channels + 1) * 9 + t] = v;
                    }
                }
                s.conv_in = ConvParams {
                    weight: w,
                    bias: plain.stages[k].conv_in.bias.clone(),
                };
                s.rb1 = plain.stages[k].rb1.clone();
                s.rb2 = plain.stages[k].rb2.clone();
                s.conv_out = plain.stages[k].conv_out.clone();
                s.rho = plain.stages[k].rho.clone();
            }
            let out = model_forward_values(
                &params,
                &cfg,
                OperatorRef::Gaussian(&op),
                Measurements::GaussianFromBlocks(blocks.clone()),
            )
            .unwrap();
            let diff = out.zip_map(&plain_out, |a, b| (a - b).abs()).unwrap();
            assert!(diff.max_abs() < 1e-12, "{:?}: {:e}", hsm, diff.max_abs());
        }
    }

    #[test]
    fn clm_concat_with_identity_merge_degenerates_to_plain_pmm() {
        // Merge conv [C, 2C, 3, 3]: delta kernels on the s columns, zeros on
        // the h columns → s₂ = s₁ regardless of the carried feature.
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let op = build_gaussian_operator::<f64>(0.5, 81, 13).unwrap();
        let blocks = Tensor::from_fn(&[2, 81], |_| rng.gen_range(0.0..1.0));

        let plain_cfg = toy_config(HsmVariant::None, ClmVariant::None);
        let plain = ModelParams::<f64>::init(&plain_cfg, 62);
        let plain_out = model_forward_values(
            &plain,
            &plain_cfg,
            OperatorRef::Gaussian(&op),
            Measurements::GaussianFromBlocks(blocks.clone()),
        )
        .unwrap();

        let cfg = toy_config(HsmVariant::None, ClmVariant::Concat);
        let c = cfg.channels;
        let mut params = ModelParams::<f64>::init(&cfg, 63);
        for (k, s) in params.stages.iter_mut().enumerate() {
            s.conv_in = plain.stages[k].conv_in.clone();
            s.rb1 = plain.stages[k].rb1.clone();
            s.rb2 = plain.stages[k].rb2.clone();
            s.conv_out = plain.stages[k].conv_out.clone();
            s.rho = plain.stages[k].rho.clone();
            let mut w = Tensor::zeros(&[c, 2 * c, 3, 3]);
            for ch in 0..c {
                *w.at_mut(&[ch, ch, 1, 1]) = 1.0;
            }
            s.merge = Some(ConvParams {
                weight: w,
                bias: Tensor::zeros(&[c]),
            });
        }
        let out = model_forward_values(
            &params,
            &cfg,
            OperatorRef::Gaussian(&op),
            Measurements::GaussianFromBlocks(blocks.clone()),
        )
        .unwrap();
        let diff = out.zip_map(&plain_out, |a, b| (a - b).abs()).unwrap();
        assert!(diff.max_abs() < 1e-12, "max err {:e}", diff.max_abs());
    }

    #[test]
    fn clm_plus_first_stage_matches_plain_pmm() {
        // h⁰ = 0, so with K = 1 the plus variant adds nothing.
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let op = build_gaussian_operator::<f64>(0.5, 81, 14).unwrap();
        let blocks = Tensor::from_fn(&[2, 81], |_| rng.gen_range(0.0..1.0));
        let mut plain_cfg = toy_config(HsmVariant::None, ClmVariant::None);
        plain_cfg.stages = 1;
        let plain = ModelParams::<f64>::init(&plain_cfg, 64);
        let plain_out = model_forward_values(
            &plain,
            &plain_cfg,
            OperatorRef::Gaussian(&op),
            Measurements::GaussianFromBlocks(blocks.clone()),
        )
        .unwrap();
        let mut cfg = toy_config(HsmVariant::None, ClmVariant::Plus);
        cfg.stages = 1;
        let mut params = ModelParams::<f64>::init(&cfg, 65);
        params.stages[0] = StageParams {
            merge: None,
            lstm: None,
            ..plain.stages[0].clone()
        };
        let out = model_forward_values(
            &params,
            &cfg,
            OperatorRef::Gaussian(&op),
            Measurements::GaussianFromBlocks(blocks),
        )
        .unwrap();
        assert_eq!(out.data(), plain_out.data());
    }

    #[test]
    fn whole_image_single_block_path_is_bitwise_identical() {
        let mut config = toy_config(HsmVariant::Rb2, ClmVariant::Lstm);
        config.ratio = 0.25;
        let op = build_gaussian_operator::<f32>(0.25, 81, 15).unwrap();
        let params = ModelParams::<f32>::init(&config, 70);
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let block = Tensor::from_fn(&[1, 81], |_| rng.gen_range(0.0..1.0));

        let block_out = model_forward_values(
            &params,
            &config,
            OperatorRef::Gaussian(&op),
            Measurements::GaussianFromBlocks(block.clone()),
        )
        .unwrap();

        let grid = Arc::new(BlockGrid::new(9, 9, 9, 9).unwrap());
        let mut tape = Tape::new();
        let result = model_forward(
            &mut tape,
            &params,
            &config,
            ForwardSpec {
                op: OperatorRef::Gaussian(&op),
                measurements: Measurements::GaussianFromBlocks(block.clone()),
                grid: Some(grid),
                trainable: false,
                learn_phi: false,
                record_trajectory: false,
            },
        )
        .unwrap();
        let whole_out = tape.value(result.x_final).clone();
        assert_eq!(whole_out.shape(), &[1, 1, 9, 9]);
        assert_eq!(whole_out.data(), block_out.data());
    }

    #[test]
    fn trajectory_records_all_memory_states() {
        let config = toy_config(HsmVariant::Rb2, ClmVariant::Lstm);
        let op = build_gaussian_operator::<f64>(0.25, 81, 16).unwrap();
        let params = ModelParams::<f64>::init(&config, 72);
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let blocks = Tensor::from_fn(&[1, 81], |_| rng.gen_range(0.0..1.0));
        let mut tape = Tape::new();
        let result = model_forward(
            &mut tape,
            &params,
            &config,
            ForwardSpec {
                op: OperatorRef::Gaussian(&op),
                measurements: Measurements::GaussianFromBlocks(blocks),
                grid: None,
                trainable: false,
                learn_phi: false,
                record_trajectory: true,
            },
        )
        .unwrap();
        assert_eq!(result.trajectory.len(), config.stages);
        for trace in &result.trajectory {
            assert_eq!(trace.x.shape(), &[1, 1, 9, 9]);
            assert_eq!(trace.z.as_ref().unwrap().shape(), &[1, 2, 9, 9]);
            assert_eq!(trace.h.as_ref().unwrap().shape(), &[1, 2, 9, 9]);
            assert_eq!(trace.c.as_ref().unwrap().shape(), &[1, 2, 9, 9]);
        }
    }

    #[test]
    fn missing_variant_params_raise_contract_errors() {
        let config = toy_config(HsmVariant::Rb2, ClmVariant::Lstm);
        // Build params for the plain variant, then run with the full config.
        let plain = ModelParams::<f64>::init(&toy_config(HsmVariant::None, ClmVariant::None), 80);
        let op = build_gaussian_operator::<f64>(0.25, 81, 17).unwrap();
        let blocks = Tensor::zeros(&[1, 81]);
        let err = model_forward_values(
            &plain,
            &config,
            OperatorRef::Gaussian(&op),
            Measurements::GaussianFromBlocks(blocks),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences_on_a_kernel_entry() {
        // Criterion-style spot check; the full sweep lives in the acceptance
        // suite. Perturbs one conv kernel coordinate of a K=2/C=2 model.
        let config = toy_config(HsmVariant::Rb2, ClmVariant::Lstm);
        let op = build_gaussian_operator::<f64>(0.25, 81, 18).unwrap();
        let params = ModelParams::<f64>::init(&config, 90);
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let blocks = Tensor::from_fn(&[1, 81], |_| rng.gen_range(0.0..1.0));

        let loss_of = |p: &ModelParams<f64>| -> (f64, Vec<(String, Tensor<f64>)>) {
            let mut tape = Tape::new();
            let result = model_forward(
                &mut tape,
                p,
                &config,
                ForwardSpec {
                    op: OperatorRef::Gaussian(&op),
                    measurements: Measurements::GaussianFromBlocks(blocks.clone()),
                    grid: None,
                    trainable: true,
                    learn_phi: false,
                    record_trajectory: false,
                },
            )
            .unwrap();
            let gt = tape.constant(blocks.clone());
            let loss = tape.l1_mean(result.x_final, gt).unwrap();
            tape.backward(loss).unwrap();
            let grads = result
                .params
                .iter()
                .map(|(n, id)| {
                    (
                        n.clone(),
                        tape.grad(*id)
                            .cloned()
                            .unwrap_or_else(|| Tensor::zeros(tape.shape(*id))),
                    )
                })
                .collect();
            (tape.value(loss).data()[0], grads)
        };

        let (_, grads) = loss_of(&params);
        let grad_w = &grads
            .iter()
            .find(|(n, _)| n == "stage1.rb1.a.w")
            .unwrap()
            .1;
        let idx = 7;
        let eps = 1e-6;
        let mut plus = params.clone();
        plus.stages[1].rb1.conv_a.weight.data_mut()[idx] += eps;
        let mut minus = params.clone();
        minus.stages[1].rb1.conv_a.weight.data_mut()[idx] -= eps;
        let fd = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * eps);
        let got = grad_w.data()[idx];
        assert!(
            (fd - got).abs() <= 1e-4 * fd.abs().max(got.abs()).max(1e-8),
            "fd {} vs analytic {}",
            fd,
            got
        );
    }
}
