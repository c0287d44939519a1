//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Each operation appends a node recording its output value plus the ids of
//! its inputs. [`Tape::backward`] replays the tape once in reverse topological
//! order (which is just reverse insertion order), accumulating gradients with
//! `+=` so fan-out is handled naturally. Gradients only flow into nodes whose
//! `requires` flag is set, so constant subgraphs cost nothing.
//!
//! Shape agreement is checked when an op is recorded; backward never fails.

use std::sync::Arc;

use crate::conv;
use crate::cs::BlockGrid;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a node on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

/// A fixed self-adjoint linear operator on batched row vectors `[B, N]`.
///
/// Self-adjointness is what makes the backward rule "apply the map to the
/// upstream gradient"; implementations must honour it.
pub trait LinearMap<T: Scalar>: Send + Sync {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    /// Dimension `N` of the vectors the map acts on.
    fn dim(&self) -> usize;
}

enum Op<T: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    /// Elementwise `x * s` where `s` is a single-element tensor.
    ScaleByScalar { x: TensorId, s: TensorId },
    MulConst(TensorId, T),
    Relu(TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Abs(TensorId),
    SumAll(TensorId),
    Reshape(TensorId),
    /// `a[m,k] x b[n,k]^T`.
    MatmulNT { a: TensorId, b: TensorId },
    /// `a[m,k] x b[k,n]`.
    MatmulNN { a: TensorId, b: TensorId },
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
    },
    ConcatChannels(Vec<TensorId>),
    SliceChannels {
        input: TensorId,
        start: usize,
        len: usize,
    },
    SelfAdjoint {
        x: TensorId,
        map: Arc<dyn LinearMap<T>>,
    },
    /// `[B,1,H,W]` image to `[B*L, n*n]` block rows.
    Unfold {
        image: TensorId,
        grid: Arc<BlockGrid>,
    },
    /// `[B*L, n*n]` block rows to `[B,1,H,W]`, averaging where blocks overlap.
    FoldAverage {
        blocks: TensorId,
        grid: Arc<BlockGrid>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> TensorId {
        self.nodes.push(Node { value, op, requires });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf: backward treats it as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` loss w.r.t. `id`, if any flowed.
    pub fn grad(&self, id: TensorId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn binary_same_shape(&self, op: &str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                &format!("{:?}", self.shape(a)),
                &format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("tape add", a, b)?;
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Add(a, b), req))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("tape sub", a, b)?;
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x - y)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Sub(a, b), req))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("tape mul", a, b)?;
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Mul(a, b), req))
    }

    /// Elementwise product with a single-element tensor (e.g. a step size).
    pub fn scale_by(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape(
                "tape scale_by",
                "single-element scale",
                &format!("{:?}", self.shape(s)),
            ));
        }
        let sv = self.value(s).data()[0];
        let v = self.value(x).map(|e| e * sv);
        let req = self.requires(x) || self.requires(s);
        Ok(self.push(v, Op::ScaleByScalar { x, s }, req))
    }

    pub fn mul_const(&mut self, x: TensorId, c: T) -> TensorId {
        let v = self.value(x).map(|e| e * c);
        let req = self.requires(x);
        self.push(v, Op::MulConst(x, c), req)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).map(|e| e.max(T::zero()));
        let req = self.requires(x);
        self.push(v, Op::Relu(x), req)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let one = T::one();
        let v = self.value(x).map(|e| one / (one + (-e).exp()));
        let req = self.requires(x);
        self.push(v, Op::Sigmoid(x), req)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).map(|e| e.tanh());
        let req = self.requires(x);
        self.push(v, Op::Tanh(x), req)
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).map(|e| e.abs());
        let req = self.requires(x);
        self.push(v, Op::Abs(x), req)
    }

    /// Sum of all elements, as a single-element tensor.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let v = Tensor::scalar(self.value(x).sum());
        let req = self.requires(x);
        self.push(v, Op::SumAll(x), req)
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let v = self.value(x).reshape(shape)?;
        let req = self.requires(x);
        Ok(self.push(v, Op::Reshape(x), req))
    }

    /// `a[m,k] x b[n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape(
                "tape matmul_nt",
                "[m,k] x [n,k]",
                &format!("{:?} x {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut v = Tensor::zeros(&[m, n]);
        T::gemm_nt(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            v.data_mut(),
        );
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::MatmulNT { a, b }, req))
    }

    /// `a[m,k] x b[k,n] -> [m,n]`.
    pub fn matmul_nn(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "tape matmul_nn",
                "[m,k] x [k,n]",
                &format!("{:?} x {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut v = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            v.data_mut(),
        );
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::MatmulNN { a, b }, req))
    }

    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
    ) -> Result<TensorId> {
        let b_val = bias.map(|b| self.value(b));
        let v = conv::conv2d_forward(self.value(input), self.value(weight), b_val)?;
        let req = self.requires(input)
            || self.requires(weight)
            || bias.map(|b| self.requires(b)).unwrap_or(false);
        Ok(self.push(v, Op::Conv2d { input, weight, bias }, req))
    }

    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::contract("tape concat_channels: no inputs"));
        }
        let first = self.shape(inputs[0]).to_vec();
        if first.len() != 4 {
            return Err(Error::shape(
                "tape concat_channels",
                "[N,C,H,W]",
                &format!("{:?}", first),
            ));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::shape(
                    "tape concat_channels",
                    &format!("[{},*,{},{}]", n, h, w),
                    &format!("{:?}", s),
                ));
            }
            c_total += s[1];
        }
        let hw = h * w;
        let mut v = Tensor::zeros(&[n, c_total, h, w]);
        for s in 0..n {
            let mut off = s * c_total * hw;
            for &id in inputs {
                let ci = self.shape(id)[1];
                let chunk = ci * hw;
                let src = &self.value(id).data()[s * chunk..(s + 1) * chunk];
                v.data_mut()[off..off + chunk].copy_from_slice(src);
                off += chunk;
            }
        }
        let req = inputs.iter().any(|&id| self.requires(id));
        Ok(self.push(v, Op::ConcatChannels(inputs.to_vec()), req))
    }

    pub fn slice_channels(&mut self, input: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || start + len > s[1] {
            return Err(Error::shape(
                "tape slice_channels",
                &format!("channels {}..{} of [N,C,H,W]", start, start + len),
                &format!("{:?}", s),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let mut v = Tensor::zeros(&[n, len, h, w]);
        for sm in 0..n {
            let src = &self.value(input).data()[(sm * c + start) * hw..(sm * c + start + len) * hw];
            v.data_mut()[sm * len * hw..(sm + 1) * len * hw].copy_from_slice(src);
        }
        let req = self.requires(input);
        Ok(self.push(v, Op::SliceChannels { input, start, len }, req))
    }

    /// Applies a fixed self-adjoint linear map to `[B, N]` rows.
    pub fn self_adjoint(&mut self, x: TensorId, map: Arc<dyn LinearMap<T>>) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] != map.dim() {
            return Err(Error::shape(
                "tape self_adjoint",
                &format!("[B,{}]", map.dim()),
                &format!("{:?}", s),
            ));
        }
        let v = map.apply(self.value(x))?;
        let req = self.requires(x);
        Ok(self.push(v, Op::SelfAdjoint { x, map }, req))
    }

    /// Extracts the grid's blocks from each image: `[B,1,H,W] -> [B*L, n*n]`.
    pub fn unfold(&mut self, image: TensorId, grid: Arc<BlockGrid>) -> Result<TensorId> {
        let s = self.shape(image);
        if s.len() != 4 || s[1] != 1 || s[2] != grid.height() || s[3] != grid.width() {
            return Err(Error::shape(
                "tape unfold",
                &format!("[B,1,{},{}]", grid.height(), grid.width()),
                &format!("{:?}", s),
            ));
        }
        let b = s[0];
        let (l, n2) = (grid.num_blocks(), grid.block_len());
        let hw = grid.height() * grid.width();
        let mut v = Tensor::zeros(&[b * l, n2]);
        for img in 0..b {
            grid.unfold_into(
                &self.value(image).data()[img * hw..(img + 1) * hw],
                &mut v.data_mut()[img * l * n2..(img + 1) * l * n2],
            );
        }
        let req = self.requires(image);
        Ok(self.push(v, Op::Unfold { image, grid }, req))
    }

    /// Reassembles block rows into images, averaging overlapped pixels:
    /// `[B*L, n*n] -> [B,1,H,W]`.
    pub fn fold_average(&mut self, blocks: TensorId, grid: Arc<BlockGrid>) -> Result<TensorId> {
        let s = self.shape(blocks);
        let (l, n2) = (grid.num_blocks(), grid.block_len());
        if s.len() != 2 || s[1] != n2 || s[0] % l != 0 {
            return Err(Error::shape(
                "tape fold_average",
                &format!("[B*{},{}]", l, n2),
                &format!("{:?}", s),
            ));
        }
        let b = s[0] / l;
        let hw = grid.height() * grid.width();
        let mut v = Tensor::zeros(&[b, 1, grid.height(), grid.width()]);
        for img in 0..b {
            let out = &mut v.data_mut()[img * hw..(img + 1) * hw];
            grid.fold_sum_into(
                &self.value(blocks).data()[img * l * n2..(img + 1) * l * n2],
                out,
            );
            for (o, &c) in out.iter_mut().zip(grid.counts()) {
                *o = *o / T::from_f64(c);
            }
        }
        let req = self.requires(blocks);
        Ok(self.push(v, Op::FoldAverage { blocks, grid }, req))
    }

    /// `matrix[M,N] x vector[N] -> [M]`, differentiable in both arguments.
    pub fn matvec(&mut self, matrix: TensorId, vector: TensorId) -> Result<TensorId> {
        let (sm, sv) = (self.shape(matrix), self.shape(vector));
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::shape(
                "tape matvec",
                "[M,N] x [N]",
                &format!("{:?} x {:?}", sm, sv),
            ));
        }
        let m = sm[0];
        let row = self.reshape(vector, &[1, sv[0]])?;
        let prod = self.matmul_nt(row, matrix)?; // [1, M]
        self.reshape(prod, &[m])
    }

    /// Mean absolute error `(1/count)·Σ|pred − target|`.
    pub fn l1_mean(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        self.binary_same_shape("tape l1_mean", pred, target)?;
        let count = self.value(pred).numel();
        let diff = self.sub(pred, target)?;
        let mag = self.abs(diff);
        let total = self.sum_all(mag);
        Ok(self.mul_const(total, T::one() / T::from_f64(count as f64)))
    }

    /// Clears all gradients from a previous `backward`.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Backpropagates from a single-element node, populating leaf gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "tape backward",
                "single-element loss",
                &format!("{:?}", self.shape(loss)),
            ));
        }
        if !self.requires(loss) {
            return Err(Error::contract(
                "tape backward: loss does not depend on any parameter",
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let g = match rest[0].as_ref() {
                Some(g) => g,
                None => continue,
            };
            self.backward_step(i, g, before);
        }
        self.grads = grads;
        Ok(())
    }

    /// Applies node `i`'s backward rule, accumulating into `grads[0..i]`.
    fn backward_step(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        fn slot<'a, T: Scalar>(
            grads: &'a mut [Option<Tensor<T>>],
            id: TensorId,
            shape: &[usize],
        ) -> &'a mut [T] {
            let s = &mut grads[id.0];
            if s.is_none() {
                *s = Some(Tensor::zeros(shape));
            }
            s.as_mut().unwrap().data_mut()
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &(id, _sign) in &[(*a, 1), (*b, 1)] {
                    if self.requires(id) {
                        let dst = slot(grads, id, self.shape(id));
                        for (d, &gv) in dst.iter_mut().zip(g.data()) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.requires(*a) {
                    let dst = slot(grads, *a, self.shape(*a));
                    for (d, &gv) in dst.iter_mut().zip(g.data()) {
                        *d = *d + gv;
                    }
                }
                if self.requires(*b) {
                    let dst = slot(grads, *b, self.shape(*b));
                    for (d, &gv) in dst.iter_mut().zip(g.data()) {
                        *d = *d - gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let bv = self.value(*b).data();
                    let dst = slot(grads, *a, self.shape(*a));
                    for ((d, &gv), &x) in dst.iter_mut().zip(g.data()).zip(bv) {
                        *d = *d + gv * x;
                    }
                }
                if self.requires(*b) {
                    let av = self.value(*a).data();
                    let dst = slot(grads, *b, self.shape(*b));
                    for ((d, &gv), &x) in dst.iter_mut().zip(g.data()).zip(av) {
                        *d = *d + gv * x;
                    }
                }
            }
            Op::ScaleByScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                if self.requires(*x) {
                    let dst = slot(grads, *x, self.shape(*x));
                    for (d, &gv) in dst.iter_mut().zip(g.data()) {
                        *d = *d + gv * sv;
                    }
                }
                if self.requires(*s) {
                    let xv = self.value(*x).data();
                    let mut acc = T::zero();
                    for (&gv, &x) in g.data().iter().zip(xv) {
                        acc = acc + gv * x;
                    }
                    let dst = slot(grads, *s, self.shape(*s));
                    dst[0] = dst[0] + acc;
                }
            }
            Op::MulConst(x, c) => {
                if self.requires(*x) {
                    let c = *c;
                    let dst = slot(grads, *x, self.shape(*x));
                    for (d, &gv) in dst.iter_mut().zip(g.data()) {
                        *d = *d + gv * c;
                    }
                }
            }
            Op::Relu(x) => {
                if self.requires(*x) {
                    let xv = self.value(*x).data();
                    let dst = slot(grads, *x, self.shape(*x));
                    for ((d, &gv), &x) in dst.iter_mut().zip(g.data()).zip(xv) {
                        if x > T::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.requires(*x) {
                    let yv = self.nodes[i].value.data();
                    let dst = slot(grads, *x, self.shape(*x));
                    for ((d, &gv), &y) in dst.iter_mut().zip(g.data()).zip(yv) {
                        *d = *d + gv * y * (T::one() - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if self.requires(*x) {
                    let yv = self.nodes[i].value.data();
                    let dst = slot(grads, *x, self.shape(*x));
                    for ((d, &gv), &y) in dst.iter_mut().zip(g.data()).zip(yv) {
                        *d = *d + gv * (T::one() - y * y);
                    }
                }
            }
            Op::Abs(x) => {
                if self.requires(*x) {
                    let xv = self.value(*x).data();
                    let dst = slot(grads, *x, self.shape(*x));
                    for ((d, &gv), &x) in dst.iter_mut().zip(g.data()).zip(xv) {
                        if x > T::zero() {
                            *d = *d + gv;
                        } else if x < T::zero() {
                            *d = *d - gv;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.requires(*x) {
                    let gv = g.data()[0];
                    let dst = slot(grads, *x, self.shape(*x));
                    for d in dst.iter_mut() {
                        *d = *d + gv;
                    }
                }
            }
            Op::Reshape(x) => {
                if self.requires(*x) {
                    let dst = slot(grads, *x, self.shape(*x));
                    for (d, &gv) in dst.iter_mut().zip(g.data()) {
                        *d = *d + gv;
                    }
                }
            }
            Op::MatmulNT { a, b } => {
                // y[m,n] = a[m,k] b[n,k]^T
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.requires(*a) {
                    let bv = self.value(*b).data().to_vec();
                    let dst = slot(grads, *a, self.shape(*a));
                    // da[m,k] += g[m,n] b[n,k]
                    T::gemm(m, n, k, T::one(), g.data(), &bv, T::one(), dst);
                }
                if self.requires(*b) {
                    let av = self.value(*a).data().to_vec();
                    let dst = slot(grads, *b, self.shape(*b));
                    // db[n,k] += g[m,n]^T a[m,k]
                    T::gemm_tn(n, m, k, T::one(), g.data(), &av, T::one(), dst);
                }
            }
            Op::MatmulNN { a, b } => {
                // y[m,n] = a[m,k] b[k,n]
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires(*a) {
                    let bv = self.value(*b).data().to_vec();
                    let dst = slot(grads, *a, self.shape(*a));
                    // da[m,k] += g[m,n] b[k,n]^T
                    T::gemm_nt(m, n, k, T::one(), g.data(), &bv, T::one(), dst);
                }
                if self.requires(*b) {
                    let av = self.value(*a).data().to_vec();
                    let dst = slot(grads, *b, self.shape(*b));
                    // db[k,n] += a[m,k]^T g[m,n]
                    T::gemm_tn(k, m, n, T::one(), &av, g.data(), T::one(), dst);
                }
            }
            Op::Conv2d { input, weight, bias } => {
                let full = conv::conv2d_backward(self.value(*input), self.value(*weight), g)
                    .expect("shapes were validated when the op was recorded");
                if self.requires(*input) {
                    let dst = slot(grads, *input, self.shape(*input));
                    for (d, &gv) in dst.iter_mut().zip(full.input.data()) {
                        *d = *d + gv;
                    }
                }
                if self.requires(*weight) {
                    let dst = slot(grads, *weight, self.shape(*weight));
                    for (d, &gv) in dst.iter_mut().zip(full.weight.data()) {
                        *d = *d + gv;
                    }
                }
                if let Some(b) = bias {
                    if self.requires(*b) {
                        let dst = slot(grads, *b, self.shape(*b));
                        for (d, &gv) in dst.iter_mut().zip(full.bias.data()) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::ConcatChannels(inputs) => {
                let out_shape = self.nodes[i].value.shape();
                let (n, c_total, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
                let hw = h * w;
                let mut c_off = 0;
                for &id in inputs {
                    let ci = self.shape(id)[1];
                    if self.requires(id) {
                        let dst = slot(grads, id, self.shape(id));
                        for sm in 0..n {
                            let src = &g.data()[(sm * c_total + c_off) * hw..(sm * c_total + c_off + ci) * hw];
                            let d = &mut dst[sm * ci * hw..(sm + 1) * ci * hw];
                            for (dv, &gv) in d.iter_mut().zip(src) {
                                *dv = *dv + gv;
                            }
                        }
                    }
                    c_off += ci;
                }
            }
            Op::SliceChannels { input, start, len } => {
                if self.requires(*input) {
                    let in_shape = self.shape(*input).to_vec();
                    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                    let hw = h * w;
                    let dst = slot(grads, *input, &in_shape);
                    for sm in 0..n {
                        let d = &mut dst[(sm * c + start) * hw..(sm * c + start + len) * hw];
                        let src = &g.data()[sm * len * hw..(sm + 1) * len * hw];
                        for (dv, &gv) in d.iter_mut().zip(src) {
                            *dv = *dv + gv;
                        }
                    }
                }
            }
            Op::SelfAdjoint { x, map } => {
                if self.requires(*x) {
                    let back = map
                        .apply(g)
                        .expect("shapes were validated when the op was recorded");
                    let dst = slot(grads, *x, self.shape(*x));
                    for (d, &gv) in dst.iter_mut().zip(back.data()) {
                        *d = *d + gv;
                    }
                }
            }
            Op::Unfold { image, grid } => {
                if self.requires(*image) {
                    let hw = grid.height() * grid.width();
                    let (l, n2) = (grid.num_blocks(), grid.block_len());
                    let b = self.shape(*image)[0];
                    let dst = slot(grads, *image, self.shape(*image));
                    for img in 0..b {
                        grid.fold_sum_into(
                            &g.data()[img * l * n2..(img + 1) * l * n2],
                            &mut dst[img * hw..(img + 1) * hw],
                        );
                    }
                }
            }
            Op::FoldAverage { blocks, grid } => {
                if self.requires(*blocks) {
                    let hw = grid.height() * grid.width();
                    let (l, n2) = (grid.num_blocks(), grid.block_len());
                    let b = self.shape(*blocks)[0] / l;
                    // d/d(block pixel) = upstream at the pixel / coverage count.
                    let mut scaled = vec![T::zero(); hw];
                    let dst = slot(grads, *blocks, self.shape(*blocks));
                    for img in 0..b {
                        let gi = &g.data()[img * hw..(img + 1) * hw];
                        for ((s, &gv), &c) in scaled.iter_mut().zip(gi).zip(grid.counts()) {
                            *s = gv / T::from_f64(c);
                        }
                        let mut block_g = vec![T::zero(); l * n2];
                        grid.unfold_into(&scaled, &mut block_g);
                        let d = &mut dst[img * l * n2..(img + 1) * l * n2];
                        for (dv, &gv) in d.iter_mut().zip(&block_g) {
                            *dv = *dv + gv;
                        }
                    }
                }
            }
        }
    }
}
