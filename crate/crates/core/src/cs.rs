//! Compressive-sensing measurement operators and image blocking.
//!
//! Two operator families: a dense row-orthonormal Gaussian matrix for
//! natural-image CS, and a masked unitary 2-D DFT for CS-MRI. [`BlockGrid`]
//! carries the (possibly overlapping) block decomposition used both for
//! dataset assembly and whole-image reconstruction.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dft;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::LinearMap;
use crate::tensor::Tensor;

/// A raster-order grid of `b x b` blocks over an `H x W` image.
///
/// Anchors step by `stride`; the final row/column anchor is clamped to the
/// image edge so every pixel is covered. `stride <= b` keeps coverage gapless.
#[derive(Debug)]
pub struct BlockGrid {
    height: usize,
    width: usize,
    block: usize,
    stride: usize,
    /// Top-left (row, col) anchors in raster order.
    positions: Vec<(usize, usize)>,
    /// Per-pixel count of covering blocks; >= 1 everywhere.
    counts: Vec<f64>,
}

fn anchor_steps(dim: usize, block: usize, stride: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = (0..=dim - block).step_by(stride).collect();
    if *steps.last().unwrap() != dim - block {
        steps.push(dim - block);
    }
    steps
}

impl BlockGrid {
    pub fn new(height: usize, width: usize, block: usize, stride: usize) -> Result<Self> {
        if block == 0 || block > height || block > width {
            return Err(Error::config(format!(
                "block size {} does not fit a {}x{} image",
                block, height, width
            )));
        }
        if stride == 0 || stride > block {
            return Err(Error::config(format!(
                "stride {} must be in 1..={} (the block size) for gapless coverage",
                stride, block
            )));
        }
        let rows = anchor_steps(height, block, stride);
        let cols = anchor_steps(width, block, stride);
        let mut positions = Vec::with_capacity(rows.len() * cols.len());
        let mut counts = vec![0.0; height * width];
        for &r in &rows {
            for &c in &cols {
                positions.push((r, c));
                for i in 0..block {
                    for j in 0..block {
                        counts[(r + i) * width + c + j] += 1.0;
                    }
                }
            }
        }
        debug_assert!(counts.iter().all(|&c| c >= 1.0));
        Ok(Self {
            height,
            width,
            block,
            stride,
            positions,
            counts,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn num_blocks(&self) -> usize {
        self.positions.len()
    }

    /// Pixels per block (`b²`), the vectorized block length.
    pub fn block_len(&self) -> usize {
        self.block * self.block
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    /// Copies each block (raster order within and across blocks) out of a
    /// flat `[H*W]` image into a flat `[L * b²]` buffer.
    pub fn unfold_into<T: Scalar>(&self, image: &[T], out: &mut [T]) {
        debug_assert_eq!(image.len(), self.height * self.width);
        debug_assert_eq!(out.len(), self.num_blocks() * self.block_len());
        let b = self.block;
        for (l, &(r, c)) in self.positions.iter().enumerate() {
            let dst = &mut out[l * b * b..(l + 1) * b * b];
            for i in 0..b {
                let src = (r + i) * self.width + c;
                dst[i * b..(i + 1) * b].copy_from_slice(&image[src..src + b]);
            }
        }
    }

    /// Scatter-adds flat `[L * b²]` blocks onto a flat `[H*W]` image buffer.
    pub fn fold_sum_into<T: Scalar>(&self, blocks: &[T], image: &mut [T]) {
        debug_assert_eq!(blocks.len(), self.num_blocks() * self.block_len());
        debug_assert_eq!(image.len(), self.height * self.width);
        let b = self.block;
        for (l, &(r, c)) in self.positions.iter().enumerate() {
            let src = &blocks[l * b * b..(l + 1) * b * b];
            for i in 0..b {
                let dst = (r + i) * self.width + c;
                for j in 0..b {
                    image[dst + j] = image[dst + j] + src[i * b + j];
                }
            }
        }
    }
}

/// Splits an `[H, W]` image into raster-order `[b, b]` blocks plus the grid
/// that reassembles them.
pub fn extract_blocks<T: Scalar>(
    image: &Tensor<T>,
    block: usize,
    stride: usize,
) -> Result<(Vec<Tensor<T>>, BlockGrid)> {
    if image.ndim() != 2 {
        return Err(Error::shape("extract_blocks", "[H,W]", &format!("{:?}", image.shape())));
    }
    let grid = BlockGrid::new(image.shape()[0], image.shape()[1], block, stride)?;
    let mut flat = vec![T::zero(); grid.num_blocks() * grid.block_len()];
    grid.unfold_into(image.data(), &mut flat);
    let blocks = flat
        .chunks(grid.block_len())
        .map(|chunk| Tensor::new(&[block, block], chunk.to_vec()).expect("chunk length matches"))
        .collect();
    Ok((blocks, grid))
}

/// Reassembles blocks into the grid's image, averaging overlapped pixels.
pub fn fold_average<T: Scalar>(blocks: &[Tensor<T>], grid: &BlockGrid) -> Result<Tensor<T>> {
    if blocks.len() != grid.num_blocks() {
        return Err(Error::contract(format!(
            "fold_average: {} blocks for a grid of {}",
            blocks.len(),
            grid.num_blocks()
        )));
    }
    let b = grid.block();
    let mut flat = Vec::with_capacity(grid.num_blocks() * grid.block_len());
    for blk in blocks {
        if blk.shape() != [b, b] {
            return Err(Error::shape(
                "fold_average",
                &format!("[{},{}]", b, b),
                &format!("{:?}", blk.shape()),
            ));
        }
        flat.extend_from_slice(blk.data());
    }
    let mut image = Tensor::zeros(&[grid.height(), grid.width()]);
    grid.fold_sum_into(&flat, image.data_mut());
    for (v, &c) in image.data_mut().iter_mut().zip(grid.counts()) {
        *v = *v / T::from_f64(c);
    }
    Ok(image)
}

/// One of the 8 dihedral transforms of a square block: `index % 4` selects a
/// counter-clockwise rotation in 90° steps, `index >= 4` adds a horizontal
/// flip after the rotation. Index 0 is the identity.
pub fn augment<T: Scalar>(block: &Tensor<T>, index: usize) -> Result<Tensor<T>> {
    if index >= 8 {
        return Err(Error::config(format!("augment index {} outside 0..8", index)));
    }
    if block.ndim() != 2 || block.shape()[0] != block.shape()[1] {
        return Err(Error::shape(
            "augment",
            "square [b,b]",
            &format!("{:?}", block.shape()),
        ));
    }
    let n = block.shape()[0];
    let rot = index % 4;
    let flip = index >= 4;
    Ok(Tensor::from_fn(&[n, n], |idx| {
        let (i, mut j) = (idx / n, idx % n);
        if flip {
            j = n - 1 - j;
        }
        // Inverse of a CCW rotation by rot·90°: source index for output (i, j).
        let (si, sj) = match rot {
            0 => (i, j),
            1 => (j, n - 1 - i),
            2 => (n - 1 - i, n - 1 - j),
            _ => (n - 1 - j, i),
        };
        block.at(&[si, sj])
    }))
}

/// Dense Gaussian measurement operator with orthonormalized rows: Φ is
/// `[M, N]` with `ΦΦᵀ = I` at construction time.
#[derive(Clone, Debug)]
pub struct GaussianOperator<T: Scalar> {
    phi: Tensor<T>,
    ratio: f64,
    n: usize,
    m: usize,
    pub learnable: bool,
    seed: u64,
}

/// Builds Φ from i.i.d. standard-normal entries followed by two passes of
/// modified Gram–Schmidt over the rows (the second pass scrubs the residual
/// non-orthogonality that a single pass leaves in 64-bit arithmetic).
pub fn build_gaussian_operator<T: Scalar>(
    ratio: f64,
    n: usize,
    seed: u64,
) -> Result<GaussianOperator<T>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("CS ratio {} outside (0, 1]", ratio)));
    }
    if n == 0 {
        return Err(Error::config("block pixel count must be >= 1"));
    }
    let m = ((ratio * n as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phi = Tensor::<f64>::from_fn(&[m, n], |_| StandardNormal.sample(&mut rng));
    for _pass in 0..2 {
        for i in 0..m {
            for j in 0..i {
                let (head, tail) = phi.data_mut().split_at_mut(i * n);
                let prev = &head[j * n..(j + 1) * n];
                let row = &mut tail[..n];
                let dot: f64 = row.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (r, p) in row.iter_mut().zip(prev) {
                    *r -= dot * p;
                }
            }
            let row = &mut phi.data_mut()[i * n..(i + 1) * n];
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-10 {
                return Err(Error::contract(format!(
                    "Gaussian operator row {} degenerated during orthonormalization",
                    i
                )));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    // ΦΦᵀ = I is the operator's defining invariant; verify it in 64-bit.
    let mut gram = vec![0.0; m * m];
    <f64 as Scalar>::gemm_nt(m, n, m, 1.0, phi.data(), phi.data(), 0.0, &mut gram);
    let mut err: f64 = 0.0;
    for i in 0..m {
        for j in 0..m {
            let want = if i == j { 1.0 } else { 0.0 };
            err = err.max((gram[i * m + j] - want).abs());
        }
    }
    if err > 1e-5 {
        return Err(Error::contract(format!(
            "Gaussian operator failed row orthonormality: max|ΦΦᵀ−I| = {:e}",
            err
        )));
    }
    Ok(GaussianOperator {
        phi: phi.cast(),
        ratio,
        n,
        m,
        learnable: false,
        seed,
    })
}

impl<T: Scalar> GaussianOperator<T> {
    /// Wraps an existing matrix (e.g. loaded from a checkpoint).
    pub fn from_phi(phi: Tensor<T>, ratio: f64, learnable: bool, seed: u64) -> Result<Self> {
        if phi.ndim() != 2 {
            return Err(Error::shape("GaussianOperator", "[M,N]", &format!("{:?}", phi.shape())));
        }
        let (m, n) = (phi.shape()[0], phi.shape()[1]);
        Ok(Self {
            phi,
            ratio,
            n,
            m,
            learnable,
            seed,
        })
    }

    pub fn phi(&self) -> &Tensor<T> {
        &self.phi
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Replaces Φ (used when the operator itself is being trained).
    pub fn set_phi(&mut self, phi: Tensor<T>) -> Result<()> {
        if phi.shape() != self.phi.shape() {
            return Err(Error::shape(
                "GaussianOperator::set_phi",
                &format!("{:?}", self.phi.shape()),
                &format!("{:?}", phi.shape()),
            ));
        }
        self.phi = phi;
        Ok(())
    }

    /// `y = Φx` for a single `[N]` vector or a batch `[B, N]`.
    pub fn sample(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match x.ndim() {
            1 if x.shape()[0] == self.n => {
                let mut y = Tensor::zeros(&[self.m]);
                T::gemm_nt(1, self.n, self.m, T::one(), x.data(), self.phi.data(), T::zero(), y.data_mut());
                Ok(y)
            }
            2 if x.shape()[1] == self.n => {
                let b = x.shape()[0];
                let mut y = Tensor::zeros(&[b, self.m]);
                T::gemm_nt(b, self.n, self.m, T::one(), x.data(), self.phi.data(), T::zero(), y.data_mut());
                Ok(y)
            }
            _ => Err(Error::shape(
                "GaussianOperator::sample",
                &format!("[{}] or [B,{}]", self.n, self.n),
                &format!("{:?}", x.shape()),
            )),
        }
    }

    /// `Φᵀy` for a single `[M]` vector or a batch `[B, M]`.
    pub fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        match y.ndim() {
            1 if y.shape()[0] == self.m => {
                let mut x = Tensor::zeros(&[self.n]);
                T::gemm(1, self.m, self.n, T::one(), y.data(), self.phi.data(), T::zero(), x.data_mut());
                Ok(x)
            }
            2 if y.shape()[1] == self.m => {
                let b = y.shape()[0];
                let mut x = Tensor::zeros(&[b, self.n]);
                T::gemm(b, self.m, self.n, T::one(), y.data(), self.phi.data(), T::zero(), x.data_mut());
                Ok(x)
            }
            _ => Err(Error::shape(
                "GaussianOperator::adjoint",
                &format!("[{}] or [B,{}]", self.m, self.m),
                &format!("{:?}", y.shape()),
            )),
        }
    }
}

/// A complex `[H, W]` field (k-space data for the MRI operator).
#[derive(Clone, Debug)]
pub struct ComplexImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

impl ComplexImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); height * width],
        }
    }
}

/// Masked-Fourier MRI measurement operator: Φ = B·F with B a binary k-space
/// under-sampling mask and F the unitary 2-D DFT.
#[derive(Clone, Debug)]
pub struct MRIOperator {
    /// Binary mask (1.0 = sampled k-space location).
    mask: Tensor<f64>,
    height: usize,
    width: usize,
}

impl MRIOperator {
    pub fn new(mask: Tensor<f64>) -> Result<Self> {
        if mask.ndim() != 2 {
            return Err(Error::shape("MRIOperator", "[H,W] mask", &format!("{:?}", mask.shape())));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::config("MRI mask entries must be 0 or 1"));
        }
        let (height, width) = (mask.shape()[0], mask.shape()[1]);
        Ok(Self { mask, height, width })
    }

    pub fn mask(&self) -> &Tensor<f64> {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Fraction of sampled k-space locations (the MRI analogue of the ratio).
    pub fn sampling_fraction(&self) -> f64 {
        self.mask.data().iter().sum::<f64>() / self.mask.numel() as f64
    }

    fn check_image<T: Scalar>(&self, x: &Tensor<T>, what: &str) -> Result<()> {
        if x.shape() != [self.height, self.width] {
            return Err(Error::shape(
                what,
                &format!("[{},{}]", self.height, self.width),
                &format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// `k = B ∘ F(x)`: masked unitary Fourier coefficients of a real image.
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<ComplexImage> {
        self.check_image(x, "mri_forward")?;
        let mut buf: Vec<Complex64> = x
            .data()
            .iter()
            .map(|&v| Complex64::new(v.to_f64_val(), 0.0))
            .collect();
        dft::dft2(&mut buf, self.height, self.width, false);
        for (v, &m) in buf.iter_mut().zip(self.mask.data()) {
            *v *= m;
        }
        Ok(ComplexImage {
            height: self.height,
            width: self.width,
            data: buf,
        })
    }

    /// `Φᴴk = Re(Fᴴ(B ∘ k))`: adjoint back to a real image.
    pub fn adjoint<T: Scalar>(&self, k: &ComplexImage) -> Result<Tensor<T>> {
        if (k.height, k.width) != (self.height, self.width) {
            return Err(Error::shape(
                "mri_adjoint",
                &format!("[{},{}]", self.height, self.width),
                &format!("[{},{}]", k.height, k.width),
            ));
        }
        let mut buf: Vec<Complex64> = k
            .data
            .iter()
            .zip(self.mask.data())
            .map(|(&v, &m)| v * m)
            .collect();
        dft::dft2(&mut buf, self.height, self.width, true);
        Ok(Tensor::from_fn(&[self.height, self.width], |i| {
            T::from_f64(buf[i].re)
        }))
    }

    /// The normal operator `ΦᵀΦ = Re(FᴴBF(·))` as a tape-compatible
    /// self-adjoint map over vectorized `[B, H·W]` rows.
    pub fn gram(&self) -> MriGram {
        MriGram {
            mask: self.mask.clone(),
            height: self.height,
            width: self.width,
        }
    }
}

/// Self-adjoint normal operator of [`MRIOperator`] (see [`MRIOperator::gram`]).
#[derive(Clone, Debug)]
pub struct MriGram {
    mask: Tensor<f64>,
    height: usize,
    width: usize,
}

impl<T: Scalar> LinearMap<T> for MriGram {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.height * self.width;
        if x.ndim() != 2 || x.shape()[1] != n {
            return Err(Error::shape(
                "MriGram::apply",
                &format!("[B,{}]", n),
                &format!("{:?}", x.shape()),
            ));
        }
        let b = x.shape()[0];
        let mut out = Tensor::zeros(&[b, n]);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for row in 0..b {
            for (dst, &src) in buf.iter_mut().zip(&x.data()[row * n..(row + 1) * n]) {
                *dst = Complex64::new(src.to_f64_val(), 0.0);
            }
            dft::dft2(&mut buf, self.height, self.width, false);
            for (v, &m) in buf.iter_mut().zip(self.mask.data()) {
                *v *= m;
            }
            dft::dft2(&mut buf, self.height, self.width, true);
            for (dst, v) in out.data_mut()[row * n..(row + 1) * n].iter_mut().zip(&buf) {
                *dst = T::from_f64(v.re);
            }
        }
        Ok(out)
    }

    fn dim(&self) -> usize {
        self.height * self.width
    }
}
