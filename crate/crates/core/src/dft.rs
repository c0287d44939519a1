//! Unitary discrete Fourier and cosine transforms.
//!
//! The 2-D DFT backs the MRI measurement operator; the orthonormal DCT-II
//! backs the spectral-density analysis. Power-of-two lengths take an
//! iterative radix-2 FFT; everything else falls back to the direct O(n²) sum,
//! which is fine at the image sizes this crate works with. All transform
//! arithmetic is 64-bit.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// In-place unitary 1-D DFT (scaled by 1/√n in both directions).
fn dft1(data: &mut [Complex64], inverse: bool) {
    let n = data.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        fft_radix2(data, inverse);
    } else {
        dft_direct(data, inverse);
    }
    let scale = 1.0 / (n as f64).sqrt();
    for v in data.iter_mut() {
        *v *= scale;
    }
}

fn dft_direct(data: &mut [Complex64], inverse: bool) {
    let n = data.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let base = sign * std::f64::consts::TAU / n as f64;
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, &x) in data.iter().enumerate() {
            // j*k mod n keeps the angle argument small.
            let angle = base * ((j * k) % n) as f64;
            acc += x * Complex64::new(angle.cos(), angle.sin());
        }
        *o = acc;
    }
    data.copy_from_slice(&out);
}

fn fft_radix2(data: &mut [Complex64], inverse: bool) {
    let n = data.len();
    // Bit-reversal permutation.
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            data.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let angle = sign * std::f64::consts::TAU / len as f64;
        let wl = Complex64::new(angle.cos(), angle.sin());
        for start in (0..n).step_by(len) {
            let mut w = Complex64::new(1.0, 0.0);
            for i in 0..len / 2 {
                let a = data[start + i];
                let b = data[start + i + len / 2] * w;
                data[start + i] = a + b;
                data[start + i + len / 2] = a - b;
                w *= wl;
            }
        }
        len <<= 1;
    }
}

/// In-place unitary 2-D DFT of a row-major `[h, w]` buffer.
pub fn dft2(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(data.len(), h * w);
    for row in data.chunks_mut(w) {
        dft1(row, inverse);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = data[r * w + c];
        }
        dft1(&mut col, inverse);
        for r in 0..h {
            data[r * w + c] = col[r];
        }
    }
}

/// Orthonormal DCT-II basis matrix: `C[u, i] = a(u)·cos(π(2i+1)u / 2n)`
/// with `a(0)=√(1/n)`, `a(u>0)=√(2/n)`; rows are orthonormal.
pub fn dct_matrix(n: usize) -> Tensor<f64> {
    let mut c = Tensor::zeros(&[n, n]);
    for u in 0..n {
        let a = if u == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            *c.at_mut(&[u, i]) =
                a * (std::f64::consts::PI * (2 * i + 1) as f64 * u as f64 / (2 * n) as f64).cos();
        }
    }
    c
}

/// Orthonormal 2-D DCT-II of an `[h, w]` image: `C_h · X · C_wᵀ`.
pub fn dct2(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    if x.ndim() != 2 {
        return Err(Error::shape("dct2", "[H,W]", &format!("{:?}", x.shape())));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let ch = dct_matrix(h);
    let cw = dct_matrix(w);
    // tmp[u, j] = Σ_i C_h[u,i] x[i,j]
    let tmp = crate::tensor::matmul(&ch, x)?;
    // out[u, v] = Σ_j tmp[u,j] C_w[v,j]
    let mut out = Tensor::zeros(&[h, w]);
    <f64 as Scalar>::gemm_nt(h, w, w, 1.0, tmp.data(), cw.data(), 0.0, out.data_mut());
    Ok(out)
}
