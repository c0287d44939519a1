//! 2-D convolution kernels (cross-correlation, stride 1, same zero padding).
//!
//! Feature maps are `[N, C, H, W]`, weights `[C_out, C_in, KH, KW]` with odd
//! kernel extents, biases `[C_out]`. The fast path lowers each sample to an
//! im2col matrix and runs a GEMM; [`conv2d_reference`] is a direct six-loop
//! evaluation kept as an independent cross-check.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

pub fn conv_dims<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<ConvDims> {
    if input.ndim() != 4 {
        return Err(Error::shape("conv2d", "[N,C,H,W] input", &format!("{:?}", input.shape())));
    }
    if weight.ndim() != 4 {
        return Err(Error::shape(
            "conv2d",
            "[Cout,Cin,KH,KW] weight",
            &format!("{:?}", weight.shape()),
        ));
    }
    let (batch, c_in, height, width) =
        (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (c_out, wc_in, kh, kw) =
        (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
    if wc_in != c_in {
        return Err(Error::shape(
            "conv2d",
            &format!("weight with {} input channels", c_in),
            &format!("{}", wc_in),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::contract(format!(
            "conv2d: same padding requires odd kernel extents, got {}x{}",
            kh, kw
        )));
    }
    Ok(ConvDims {
        batch,
        c_in,
        c_out,
        height,
        width,
        kh,
        kw,
        pad_h: (kh - 1) / 2,
        pad_w: (kw - 1) / 2,
    })
}

/// Writes the im2col matrix `[Cin*KH*KW, H*W]` for one sample.
///
/// Rows are indexed by `(ci, kh, kw)` and columns by the output pixel
/// `(oh, ow)`. Out-of-range taps stay at whatever the buffer held before, so
/// callers must pass a zeroed buffer on first use; the invalid positions are
/// identical for every sample, which lets the buffer be reused without
/// re-zeroing.
fn im2col<T: Scalar>(sample: &[T], dims: &ConvDims, col: &mut [T]) {
    let (h, w) = (dims.height, dims.width);
    let hw = h * w;
    for ci in 0..dims.c_in {
        let chan = &sample[ci * hw..(ci + 1) * hw];
        for kh in 0..dims.kh {
            for kw in 0..dims.kw {
                let row = ((ci * dims.kh + kh) * dims.kw + kw) * hw;
                // Output rows where the tap lands inside the image.
                let oh_lo = dims.pad_h.saturating_sub(kh);
                let oh_hi = (h + dims.pad_h - kh).min(h);
                let ow_lo = dims.pad_w.saturating_sub(kw);
                let ow_hi = (w + dims.pad_w - kw).min(w);
                for oh in oh_lo..oh_hi {
                    let ih = oh + kh - dims.pad_h;
                    let src = ih * w + ow_lo + kw - dims.pad_w;
                    let dst = row + oh * w + ow_lo;
                    let len = ow_hi - ow_lo;
                    col[dst..dst + len].copy_from_slice(&chan[src..src + len]);
                }
            }
        }
    }
}

/// Scatter-adds a col-layout gradient back onto a `[Cin, H, W]` sample.
fn col2im_add<T: Scalar>(col: &[T], dims: &ConvDims, sample: &mut [T]) {
    let (h, w) = (dims.height, dims.width);
    let hw = h * w;
    for ci in 0..dims.c_in {
        let chan = &mut sample[ci * hw..(ci + 1) * hw];
        for kh in 0..dims.kh {
            for kw in 0..dims.kw {
                let row = ((ci * dims.kh + kh) * dims.kw + kw) * hw;
                let oh_lo = dims.pad_h.saturating_sub(kh);
                let oh_hi = (h + dims.pad_h - kh).min(h);
                let ow_lo = dims.pad_w.saturating_sub(kw);
                let ow_hi = (w + dims.pad_w - kw).min(w);
                for oh in oh_lo..oh_hi {
                    let ih = oh + kh - dims.pad_h;
                    let src = row + oh * w + ow_lo;
                    let dst = ih * w + ow_lo + kw - dims.pad_w;
                    for i in 0..ow_hi - ow_lo {
                        chan[dst + i] = chan[dst + i] + col[src + i];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let dims = conv_dims(input, weight)?;
    if let Some(b) = bias {
        if b.shape() != [dims.c_out] {
            return Err(Error::shape(
                "conv2d",
                &format!("[{}] bias", dims.c_out),
                &format!("{:?}", b.shape()),
            ));
        }
    }
    let hw = dims.height * dims.width;
    let ckk = dims.c_in * dims.kh * dims.kw;
    let mut col = vec![T::zero(); ckk * hw];
    let mut out = Tensor::zeros(&[dims.batch, dims.c_out, dims.height, dims.width]);
    let in_stride = dims.c_in * hw;
    let out_stride = dims.c_out * hw;
    for n in 0..dims.batch {
        im2col(&input.data()[n * in_stride..(n + 1) * in_stride], &dims, &mut col);
        let out_mat = &mut out.data_mut()[n * out_stride..(n + 1) * out_stride];
        T::gemm(dims.c_out, ckk, hw, T::one(), weight.data(), &col, T::zero(), out_mat);
        if let Some(b) = bias {
            for co in 0..dims.c_out {
                let bv = b.data()[co];
                for v in &mut out_mat[co * hw..(co + 1) * hw] {
                    *v = *v + bv;
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let dims = conv_dims(input, weight)?;
    let expect = [dims.batch, dims.c_out, dims.height, dims.width];
    if grad_output.shape() != expect {
        return Err(Error::shape(
            "conv2d backward",
            &format!("{:?}", expect),
            &format!("{:?}", grad_output.shape()),
        ));
    }
    let hw = dims.height * dims.width;
    let ckk = dims.c_in * dims.kh * dims.kw;
    let mut col = vec![T::zero(); ckk * hw];
    let mut grad_col = vec![T::zero(); ckk * hw];
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weight = Tensor::zeros(weight.shape());
    let mut grad_bias = Tensor::zeros(&[dims.c_out]);
    let in_stride = dims.c_in * hw;
    let out_stride = dims.c_out * hw;
    for n in 0..dims.batch {
        let go_mat = &grad_output.data()[n * out_stride..(n + 1) * out_stride];
        im2col(&input.data()[n * in_stride..(n + 1) * in_stride], &dims, &mut col);
        // dW[co, row] += sum_p go[co, p] * col[row, p]
        T::gemm_nt(dims.c_out, hw, ckk, T::one(), go_mat, &col, T::one(), grad_weight.data_mut());
        // dCol[row, p] = sum_co W[co, row] * go[co, p]
        T::gemm_tn(ckk, dims.c_out, hw, T::one(), weight.data(), go_mat, T::zero(), &mut grad_col);
        col2im_add(
            &grad_col,
            &dims,
            &mut grad_input.data_mut()[n * in_stride..(n + 1) * in_stride],
        );
        for co in 0..dims.c_out {
            let mut s = T::zero();
            for &v in &go_mat[co * hw..(co + 1) * hw] {
                s = s + v;
            }
            grad_bias.data_mut()[co] = grad_bias.data()[co] + s;
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

/// Direct six-loop convolution used to cross-check the GEMM path.
pub fn conv2d_reference<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let dims = conv_dims(input, weight)?;
    let mut out = Tensor::zeros(&[dims.batch, dims.c_out, dims.height, dims.width]);
    for n in 0..dims.batch {
        for co in 0..dims.c_out {
            for oh in 0..dims.height {
                for ow in 0..dims.width {
                    let mut acc = match bias {
                        Some(b) => b.data()[co],
                        None => T::zero(),
                    };
                    for ci in 0..dims.c_in {
                        for kh in 0..dims.kh {
                            for kw in 0..dims.kw {
                                let ih = oh as isize + kh as isize - dims.pad_h as isize;
                                let iw = ow as isize + kw as isize - dims.pad_w as isize;
                                if ih < 0
                                    || iw < 0
                                    || ih >= dims.height as isize
                                    || iw >= dims.width as isize
                                {
                                    continue;
                                }
                                acc = acc
                                    + input.at(&[n, ci, ih as usize, iw as usize])
                                        * weight.at(&[co, ci, kh, kw]);
                            }
                        }
                    }
                    *out.at_mut(&[n, co, oh, ow]) = acc;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        // 3x3 kernel with a single centre tap copies the feature map.
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        *w.at_mut(&[0, 0, 1, 1]) = 1.0;
        let x = Tensor::from_fn(&[1, 1, 4, 5], |i| i as f64 * 0.5 - 3.0);
        let y = conv2d_forward(&x, &w, None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn shifted_kernel_applies_zero_padding() {
        // Tap at (0,0) shifts the image down-right; the first row/col read
        // from the zero pad.
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        *w.at_mut(&[0, 0, 0, 0]) = 1.0;
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| (i + 1) as f64);
        let y = conv2d_forward(&x, &w, None).unwrap();
        // y[oh,ow] = x[oh-1, ow-1]
        let expect = vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0];
        assert_eq!(y.data(), &expect[..]);
    }

    #[test]
    fn gemm_path_matches_reference_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(n, ci, co, h, w) in &[(1, 1, 1, 5, 5), (2, 3, 4, 7, 6), (3, 2, 5, 4, 9)] {
            let x = random_tensor(&[n, ci, h, w], &mut rng);
            let wt = random_tensor(&[co, ci, 3, 3], &mut rng);
            let b = random_tensor(&[co], &mut rng);
            let fast = conv2d_forward(&x, &wt, Some(&b)).unwrap();
            let slow = conv2d_reference(&x, &wt, Some(&b)).unwrap();
            let diff = fast.zip_map(&slow, |a, b| (a - b).abs()).unwrap();
            assert!(diff.max_abs() < 1e-12, "max diff {}", diff.max_abs());
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&[2, 2, 5, 4], &mut rng);
        let w = random_tensor(&[3, 2, 3, 3], &mut rng);
        let b = random_tensor(&[3], &mut rng);
        // Loss = sum(conv(x)); grad_output is all ones.
        let go = Tensor::full(&[2, 3, 5, 4], 1.0);
        let grads = conv2d_backward(&x, &w, &go).unwrap();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            conv2d_forward(x, w, Some(b)).unwrap().sum()
        };
        let eps = 1e-6;
        for idx in [0usize, 7, 31, x.numel() - 1] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * eps);
            assert!(
                (fd - grads.input.data()[idx]).abs() < 1e-6,
                "input grad {} vs fd {}",
                grads.input.data()[idx],
                fd
            );
        }
        for idx in [0usize, 5, w.numel() - 1] {
            let mut wp = w.clone();
            wp.data_mut()[idx] += eps;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= eps;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * eps);
            assert!(
                (fd - grads.weight.data()[idx]).abs() < 1e-5,
                "weight grad {} vs fd {}",
                grads.weight.data()[idx],
                fd
            );
        }
        for idx in 0..3 {
            let mut bp = b.clone();
            bp.data_mut()[idx] += eps;
            let mut bm = b.clone();
            bm.data_mut()[idx] -= eps;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * eps);
            assert!((fd - grads.bias.data()[idx]).abs() < 1e-5);
        }
    }

    #[test]
    fn even_kernel_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(conv2d_forward(&x, &w, None).is_err());
    }
}
