//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and the parent
//! references it needs for the backward pass. Nodes are only ever appended,
//! so creation order is a topological order and `backward` replays it in
//! reverse, accumulating gradients in that fixed order.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, ConvGeom, MatView};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::split_axis;
use super::{Float, Tensor};
use crate::error::{contract_err, shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct Axis3 {
    outer: usize,
    len: usize,
    inner: usize,
}

#[derive(Debug)]
enum Op<T: Float> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Affine(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Sum(Var),
    SumAxis(Var, Axis3),
    Softmax(Var, Axis3),
    Standardize { x: Var, ax: Axis3, inv_std: Vec<T> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, d_in: usize, d_out: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, outer: usize, lens: Vec<usize>, inner: usize },
    Slice { x: Var, ax: Axis3, start: usize, count: usize },
    Gather { x: Var, index: Vec<usize>, row: usize },
    SpatialBroadcast { x: Var, hw: usize },
    NormalizeSum { x: Var, len: usize, denom: Vec<T> },
    CrossEntropy { x: Var, target: usize, probs: Vec<T> },
    Mse { pred: Var, target: Vec<T> },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation graph over tensors of element type `T`.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(shape_err!("{}: shapes {:?} and {:?} differ", what, a, b));
    }
    Ok(())
}

fn check_finite<T: Float>(t: &Tensor<T>, what: &str) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::Numeric(format!("{what} produced non-finite values")));
    }
    Ok(())
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf bound to a trainable parameter. Repeated calls for the same id
    /// return the same node so fan-in accumulates in one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    // ---- element-wise ------------------------------------------------------

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    fn check_suffix(&self, a: Var, b: Var, what: &str) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err!("{}: {:?} is not a suffix of {:?}", what, sb, sa));
        }
        Ok(self.value(b).numel())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.check_suffix(a, b, "add_bcast")?;
        let bd = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            add_into(chunk, bd);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddBcast(a, b), rg))
    }

    /// `a * b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.check_suffix(a, b, "mul_bcast")?;
        let bd = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &s) in chunk.iter_mut().zip(bd) {
                *o = *o * s;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MulBcast(a, b), rg))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let v = self.value(x).map(|e| scale * e + shift);
        let rg = self.rg(&[x]);
        self.push(v, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.affine(x, factor, T::zero())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| T::one() / (T::one() + (-e).exp()));
        let rg = self.rg(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.tanh());
        let rg = self.rg(&[x]);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.exp());
        let rg = self.rg(&[x]);
        self.push(v, Op::Exp(x), rg)
    }

    /// Multiplies by a freshly sampled inverted-dropout mask.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(contract_err!("dropout rate {} must be below 1", rate));
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let shape = self.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<T> =
            (0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let m = self.input(Tensor::new(&shape, mask)?);
        self.mul(x, m)
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Sums out `axis`; the result drops that axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &xd[(o * len + j) * inner..(o * len + j + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        let mut new_shape: Vec<usize> =
            shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::SumAxis(x, Axis3 { outer, len, inner }), rg))
    }

    // ---- normalisation ------------------------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        check_finite(self.value(x), "softmax input")?;
        let y = kernels::softmax_axis(self.value(x).data(), outer, len, inner);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Softmax(x, Axis3 { outer, len, inner }), rg))
    }

    /// Zero-mean, unit-(population-)variance along `axis`:
    /// `(x - mean) / sqrt(var + eps)`.
    pub fn standardize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let xd = self.value(x).data();
        let n = len as f64;
        let (nt, eps_t) = (T::from_f64(n), T::from_f64(eps));
        let mut y = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                // A first mean from f64 accumulation is refined in T, so a
                // constant vector maps to exactly 0 and wide types keep
                // their precision.
                let at = |j: usize| xd[base + j * inner];
                let mean0 = T::from_f64((0..len).map(|j| at(j).as_f64()).sum::<f64>() / n);
                let mean = mean0 + (0..len).map(|j| at(j) - mean0).sum::<T>() / nt;
                let var = (0..len).map(|j| (at(j) - mean) * (at(j) - mean)).sum::<T>() / nt;
                let is = T::one() / (var + eps_t).sqrt();
                inv_std[o * inner + i] = is;
                for j in 0..len {
                    y[base + j * inner] = (xd[base + j * inner] - mean) * is;
                }
            }
        }
        let rg = self.rg(&[x]);
        let op = Op::Standardize { x, ax: Axis3 { outer, len, inner }, inv_std };
        Ok(self.push(Tensor::new(&shape, y)?, op, rg))
    }

    /// Layer normalisation over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let last = self.shape(x).len() - 1;
        let z = self.standardize(x, last, eps)?;
        let z = self.mul_bcast(z, gain)?;
        self.add_bcast(z, shift)
    }

    /// Divides each last-axis vector by its sum plus `eps`.
    pub fn normalize_sum(&mut self, x: Var, eps: f64) -> Var {
        let len = self.value(x).last_dim();
        let eps = T::from_f64(eps);
        let mut out = self.value(x).clone();
        let mut denom = Vec::with_capacity(out.numel() / len);
        for row in out.data_mut().chunks_mut(len) {
            let s = row.iter().copied().sum::<T>() + eps;
            denom.push(s);
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::NormalizeSum { x, len, denom }, rg)
    }

    // ---- linear algebra -----------------------------------------------------

    /// Batched matrix product over identical leading dimensions. `ta`/`tb`
    /// transpose the last two axes of the respective operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err!("matmul: incompatible {:?} and {:?}", sa, sb));
        }
        let r = sa.len();
        let (m, k) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (k2, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != k2 {
            return Err(shape_err!("matmul: inner extents {} and {} differ", k, k2));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let av = if ta { MatView::stored(k, m, true) } else { MatView::dense(m, k) };
        let bv = if tb { MatView::stored(n, k, true) } else { MatView::dense(k, n) };
        for i in 0..batch {
            kernels::gemm(
                T::one(),
                &ad[i * m * k..(i + 1) * m * k],
                av,
                &bd[i * k * n..(i + 1) * k * n],
                bv,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                MatView::dense(m, n),
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, ta, tb, batch, m, k, n }, rg))
    }

    /// Row-wise affine map `x · w + b` applied to the last axis of `x`;
    /// `w` has shape `[d_in, d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let d_in = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != d_in {
            return Err(shape_err!("linear: input {:?} vs weight {:?}", sx, sw));
        }
        let d_out = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(shape_err!("linear: bias {:?} vs width {}", self.shape(b), d_out));
            }
        }
        let rows = self.value(x).numel() / d_in;
        let mut out = vec![T::zero(); rows * d_out];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bd);
            }
        }
        kernels::gemm(
            T::one(),
            self.value(x).data(),
            MatView::dense(rows, d_in),
            self.value(w).data(),
            MatView::dense(d_in, d_out),
            T::one(),
            &mut out,
            MatView::dense(rows, d_out),
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = d_out;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b, rows, d_in, d_out }, rg))
    }

    /// 2-D cross-correlation of `x: [B, C_in, H, W]` with
    /// `w: [C_out, C_in, kh, kw]`, zero padding on every side.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err!("conv2d: input {:?} vs kernel {:?}", sx, sw));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d: stride must be at least 1"));
        }
        let (kh, kw) = (sw[2], sw[3]);
        if sx[2] + 2 * pad < kh || sx[3] + 2 * pad < kw {
            return Err(shape_err!(
                "conv2d: kernel {}x{} larger than padded input {:?} (pad {})",
                kh,
                kw,
                &sx[2..],
                pad
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(shape_err!("conv2d: bias {:?} vs {} channels", self.shape(b), sw[0]));
            }
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            kh,
            kw,
            stride,
            pad,
            ho: (sx[2] + 2 * pad - kh) / stride + 1,
            wo: (sx[3] + 2 * pad - kw) / stride + 1,
        };
        let ohw = geom.out_hw();
        let in_len = geom.c_in * geom.h * geom.w;
        let out_len = geom.c_out * ohw;
        let mut out = vec![T::zero(); geom.batch * out_len];
        let mut cols = vec![T::zero(); geom.col_rows() * ohw];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let bias = b.map(|b| self.value(b).data());
        for bi in 0..geom.batch {
            kernels::im2col(&xd[bi * in_len..(bi + 1) * in_len], &geom, &mut cols);
            let dst = &mut out[bi * out_len..(bi + 1) * out_len];
            if let Some(bias) = bias {
                for (c, plane) in dst.chunks_mut(ohw).enumerate() {
                    plane.fill(bias[c]);
                }
            }
            kernels::gemm(
                T::one(),
                wd,
                MatView::dense(geom.c_out, geom.col_rows()),
                &cols,
                MatView::dense(geom.col_rows(), ohw),
                T::one(),
                dst,
                MatView::dense(geom.c_out, ohw),
            );
        }
        let shape = [geom.batch, geom.c_out, geom.ho, geom.wo];
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv2d { x, w, b, geom }, rg))
    }

    // ---- structural ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("permute: {:?} is not a permutation of {} axes", perm, shape.len()));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut out = vec![T::zero(); self.value(x).numel()];
        kernels::permute_into(self.value(x).data(), &shape, perm, &mut out, false);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_err!("transpose needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| shape_err!("concat of nothing"))?)
            .to_vec();
        let (outer, _, inner) = split_axis(&first, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err!("concat: {:?} incompatible with {:?} on axis {}", s, first, axis));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&self.value(p).data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        let op = Op::Concat { parts: parts.to_vec(), outer, lens, inner };
        Ok(self.push(Tensor::new(&shape, out)?, op, rg))
    }

    /// `count` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, count: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        if count == 0 || start + count > len {
            return Err(shape_err!("slice [{}, {}) out of range for extent {}", start, start + count, len));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * len + start) * inner..(o * len + start + count) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = count;
        let rg = self.rg(&[x]);
        let op = Op::Slice { x, ax: Axis3 { outer, len, inner }, start, count };
        Ok(self.push(Tensor::new(&new_shape, out)?, op, rg))
    }

    /// Selects entries of the leading axis; indices may repeat.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let row: usize = shape[1..].iter().product();
        if index.is_empty() || index.iter().any(|&i| i >= shape[0]) {
            return Err(shape_err!("gather: bad index for leading extent {}", shape[0]));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            out.extend_from_slice(&xd[i * row..(i + 1) * row]);
        }
        let mut new_shape = shape;
        new_shape[0] = index.len();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Gather { x, index: index.to_vec(), row }, rg))
    }

    /// Tiles every row of `x: [R, D]` over an `h × w` grid: `[R, D, h, w]`.
    pub fn spatial_broadcast(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || h == 0 || w == 0 {
            return Err(shape_err!("spatial_broadcast: expected [R, D], got {:?}", shape));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(shape[0] * shape[1] * hw);
        for &v in self.value(x).data() {
            out.extend(std::iter::repeat_n(v, hw));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[shape[0], shape[1], h, w], out)?, Op::SpatialBroadcast { x, hw }, rg))
    }

    // ---- losses -------------------------------------------------------------

    /// `-log softmax(x)[target]` for a logit vector.
    pub fn cross_entropy(&mut self, x: Var, target: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if target >= n {
            return Err(contract_err!("target {} out of range for {} classes", target, n));
        }
        check_finite(self.value(x), "cross-entropy logits")?;
        let xd = self.value(x).data();
        let probs = kernels::softmax_axis(xd, 1, n, 1);
        let m = xd.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + xd.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        let loss = lse - xd[target];
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { x, target, probs }, rg))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape(self.shape(pred), target.shape(), "mse")?;
        let n = T::from_f64(target.numel() as f64);
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target: target.data().to_vec() }, rg))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse-mode sweep from a scalar `root`. Returns the gradient of every
    /// parameter reachable from it.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![T::one()]);
        let n_params = self.params.keys().map(|p| p.0 + 1).max().unwrap_or(0);
        let mut out = Gradients::empty(n_params);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        let nodes = &self.nodes;
        // Gradient buffer of a parent, created on first use; `None` when the
        // parent does not need a gradient.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let n = nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
                } else {
                    None
                }
            }};
        }
        let y = node.value.data();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => out.set(*id, Tensor::new(node.value.shape(), g.to_vec())?),
            Op::Add(a, b) => {
                if let Some(d) = buf!(*a) {
                    add_into(d, g);
                }
                if let Some(d) = buf!(*b) {
                    add_into(d, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = buf!(*a) {
                    add_into(d, g);
                }
                if let Some(d) = buf!(*b) {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d = *d - gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(d) = buf!(*a) {
                    for ((d, &gv), &bv) in d.iter_mut().zip(g).zip(bv) {
                        *d = *d + gv * bv;
                    }
                }
                if let Some(d) = buf!(*b) {
                    for ((d, &gv), &av) in d.iter_mut().zip(g).zip(av) {
                        *d = *d + gv * av;
                    }
                }
            }
            Op::AddBcast(a, b) => {
                if let Some(d) = buf!(*a) {
                    add_into(d, g);
                }
                if let Some(d) = buf!(*b) {
                    let n = d.len();
                    for chunk in g.chunks(n) {
                        add_into(d, chunk);
                    }
                }
            }
            Op::MulBcast(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let n = bv.len();
                if let Some(d) = buf!(*a) {
                    for (dc, gc) in d.chunks_mut(n).zip(g.chunks(n)) {
                        for ((d, &gv), &s) in dc.iter_mut().zip(gc).zip(bv) {
                            *d = *d + gv * s;
                        }
                    }
                }
                if let Some(d) = buf!(*b) {
                    for (gc, ac) in g.chunks(n).zip(av.chunks(n)) {
                        for ((d, &gv), &x) in d.iter_mut().zip(gc).zip(ac) {
                            *d = *d + gv * x;
                        }
                    }
                }
            }
            Op::Affine(x, s) => {
                if let Some(d) = buf!(*x) {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d = *d + gv * *s;
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(d) = buf!(*x) {
                    for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                        if yv > T::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = buf!(*x) {
                    for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                        *d = *d + gv * yv * (T::one() - yv);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(d) = buf!(*x) {
                    for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                        *d = *d + gv * (T::one() - yv * yv);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(d) = buf!(*x) {
                    for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                        *d = *d + gv * yv;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = buf!(*x) {
                    for d in d.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::SumAxis(x, ax) => {
                if let Some(d) = buf!(*x) {
                    for o in 0..ax.outer {
                        let src = &g[o * ax.inner..(o + 1) * ax.inner];
                        for j in 0..ax.len {
                            let base = (o * ax.len + j) * ax.inner;
                            add_into(&mut d[base..base + ax.inner], src);
                        }
                    }
                }
            }
            Op::Softmax(x, ax) => {
                if let Some(d) = buf!(*x) {
                    for o in 0..ax.outer {
                        for i in 0..ax.inner {
                            let base = o * ax.len * ax.inner + i;
                            let dot: T = (0..ax.len)
                                .map(|j| g[base + j * ax.inner] * y[base + j * ax.inner])
                                .sum();
                            for j in 0..ax.len {
                                let p = base + j * ax.inner;
                                d[p] = d[p] + y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::Standardize { x, ax, inv_std } => {
                if let Some(d) = buf!(*x) {
                    let n = T::from_f64(ax.len as f64);
                    for o in 0..ax.outer {
                        for i in 0..ax.inner {
                            let base = o * ax.len * ax.inner + i;
                            let idx = |j: usize| base + j * ax.inner;
                            let mg = (0..ax.len).map(|j| g[idx(j)]).sum::<T>() / n;
                            let mgy = (0..ax.len).map(|j| g[idx(j)] * y[idx(j)]).sum::<T>() / n;
                            let is = inv_std[o * ax.inner + i];
                            for j in 0..ax.len {
                                let p = idx(j);
                                d[p] = d[p] + is * (g[p] - mg - y[p] * mgy);
                            }
                        }
                    }
                }
            }
            Op::NormalizeSum { x, len, denom } => {
                if let Some(d) = buf!(*x) {
                    for (r, &s) in denom.iter().enumerate() {
                        let span = r * len..(r + 1) * len;
                        let dot: T =
                            g[span.clone()].iter().zip(&y[span.clone()]).map(|(&a, &b)| a * b).sum();
                        for p in span {
                            d[p] = d[p] + (g[p] - dot) / s;
                        }
                    }
                }
            }
            Op::MatMul { a, b, ta, tb, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let av = if *ta { MatView::stored(k, m, true) } else { MatView::dense(m, k) };
                let bv = if *tb { MatView::stored(n, k, true) } else { MatView::dense(k, n) };
                let gv = MatView::dense(m, n);
                if let Some(d) = buf!(*a) {
                    // d op(A) = G op(B)^T, written through A's storage layout.
                    let dv = if *ta { MatView::stored(k, m, true) } else { MatView::dense(m, k) };
                    for i in 0..*batch {
                        kernels::gemm(
                            T::one(),
                            &g[i * m * n..(i + 1) * m * n],
                            gv,
                            &bd[i * k * n..(i + 1) * k * n],
                            bv.t(),
                            T::one(),
                            &mut d[i * m * k..(i + 1) * m * k],
                            dv,
                        );
                    }
                }
                if let Some(d) = buf!(*b) {
                    let dv = if *tb { MatView::stored(n, k, true) } else { MatView::dense(k, n) };
                    for i in 0..*batch {
                        kernels::gemm(
                            T::one(),
                            &ad[i * m * k..(i + 1) * m * k],
                            av.t(),
                            &g[i * m * n..(i + 1) * m * n],
                            gv,
                            T::one(),
                            &mut d[i * k * n..(i + 1) * k * n],
                            dv,
                        );
                    }
                }
            }
            Op::Linear { x, w, b, rows, d_in, d_out } => {
                let (rows, d_in, d_out) = (*rows, *d_in, *d_out);
                let (xd, wd) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                if let Some(d) = buf!(*x) {
                    kernels::gemm(
                        T::one(),
                        g,
                        MatView::dense(rows, d_out),
                        wd,
                        MatView::dense(d_in, d_out).t(),
                        T::one(),
                        d,
                        MatView::dense(rows, d_in),
                    );
                }
                if let Some(d) = buf!(*w) {
                    kernels::gemm(
                        T::one(),
                        xd,
                        MatView::dense(rows, d_in).t(),
                        g,
                        MatView::dense(rows, d_out),
                        T::one(),
                        d,
                        MatView::dense(d_in, d_out),
                    );
                }
                if let Some(b) = b {
                    if let Some(d) = buf!(*b) {
                        for row in g.chunks(d_out) {
                            add_into(d, row);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let ohw = geom.out_hw();
                let in_len = geom.c_in * geom.h * geom.w;
                let out_len = geom.c_out * ohw;
                let (xd, wd) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                let need_w = nodes[w.0].requires_grad;
                let need_x = nodes[x.0].requires_grad;
                let mut cols = vec![T::zero(); geom.col_rows() * ohw];
                if need_w {
                    let dw = buf!(*w).expect("weight needs grad");
                    for bi in 0..geom.batch {
                        kernels::im2col(&xd[bi * in_len..(bi + 1) * in_len], geom, &mut cols);
                        kernels::gemm(
                            T::one(),
                            &g[bi * out_len..(bi + 1) * out_len],
                            MatView::dense(geom.c_out, ohw),
                            &cols,
                            MatView::dense(geom.col_rows(), ohw).t(),
                            T::one(),
                            dw,
                            MatView::dense(geom.c_out, geom.col_rows()),
                        );
                    }
                }
                if need_x {
                    let dx = buf!(*x).expect("input needs grad");
                    for bi in 0..geom.batch {
                        kernels::gemm(
                            T::one(),
                            wd,
                            MatView::dense(geom.c_out, geom.col_rows()).t(),
                            &g[bi * out_len..(bi + 1) * out_len],
                            MatView::dense(geom.c_out, ohw),
                            T::zero(),
                            &mut cols,
                            MatView::dense(geom.col_rows(), ohw),
                        );
                        kernels::col2im_add(&cols, geom, &mut dx[bi * in_len..(bi + 1) * in_len]);
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = buf!(*b) {
                        for gb in g.chunks(out_len) {
                            for (c, plane) in gb.chunks(ohw).enumerate() {
                                db[c] = db[c] + plane.iter().copied().sum::<T>();
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = buf!(*x) {
                    add_into(d, g);
                }
            }
            Op::Permute { x, perm } => {
                if let Some(d) = buf!(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    kernels::permute_into(g, node.value.shape(), &inv, d, true);
                }
            }
            Op::Concat { parts, outer, lens, inner } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&p, &l) in parts.iter().zip(lens) {
                    if let Some(d) = buf!(p) {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + l) * inner];
                            add_into(&mut d[o * l * inner..(o + 1) * l * inner], src);
                        }
                    }
                    offset += l;
                }
            }
            Op::Slice { x, ax, start, count } => {
                if let Some(d) = buf!(*x) {
                    for o in 0..ax.outer {
                        let dst = &mut d[(o * ax.len + start) * ax.inner..(o * ax.len + start + count) * ax.inner];
                        add_into(dst, &g[o * count * ax.inner..(o + 1) * count * ax.inner]);
                    }
                }
            }
            Op::Gather { x, index, row } => {
                if let Some(d) = buf!(*x) {
                    for (k, &i) in index.iter().enumerate() {
                        add_into(&mut d[i * row..(i + 1) * row], &g[k * row..(k + 1) * row]);
                    }
                }
            }
            Op::SpatialBroadcast { x, hw } => {
                if let Some(d) = buf!(*x) {
                    for (d, plane) in d.iter_mut().zip(g.chunks(*hw)) {
                        *d = *d + plane.iter().copied().sum::<T>();
                    }
                }
            }
            Op::CrossEntropy { x, target, probs } => {
                if let Some(d) = buf!(*x) {
                    for (i, (d, &p)) in d.iter_mut().zip(probs).enumerate() {
                        let t = if i == *target { T::one() } else { T::zero() };
                        *d = *d + g[0] * (p - t);
                    }
                }
            }
            Op::Mse { pred, target } => {
                let pd = nodes[pred.0].value.data();
                let scale = g[0] * T::from_f64(2.0 / target.len() as f64);
                if let Some(d) = buf!(*pred) {
                    for ((d, &p), &t) in d.iter_mut().zip(pd).zip(target) {
                        *d = *d + scale * (p - t);
                    }
                }
            }
        }
        Ok(())
    }
}
