//! Dense row-major `f32` tensors and the kernels shared by the tape.
//!
//! Every reduction runs in a fixed order (ascending index along the reduced
//! axis) so results are bit-stable across runs. Matrix products accumulate
//! each output element over the inner index in ascending order; the inner
//! loops only vectorize across independent output elements.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::range("extent", alloc::format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        ensure_finite("tensor", &data)?;
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        let data: Vec<f32> = self.data.iter().map(|&x| f(x)).collect();
        ensure_finite("map", &data)?;
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        same_shape(op, self, other)?;
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        ensure_finite(op, &data)?;
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Result<Tensor> {
        self.map(|x| x * s)
    }

    /// Sum of all elements, accumulated in `f64` in index order.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, &x| acc + x as f64)
    }

    /// Matrix product over the last two axes, batched over leading axes.
    ///
    /// The right operand is either rank 2 (shared across the batch) or has
    /// the same leading extents as the left operand.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul_impl(self, other, false)
    }

    /// `self × otherᵀ` over the last two axes.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        matmul_impl(self, other, true)
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: self.rank(),
            });
        }
        let last = self.rank() - 1;
        if axis == last {
            let mut out = vec![0.0; self.len()];
            softmax_rows(&self.data, &mut out, self.shape[last]);
            return Ok(Self::from_parts(self.shape.clone(), out));
        }
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(axis, last);
        let moved = self.permute(&perm)?;
        moved.softmax(last)?.permute(&perm)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        if perm.len() != self.rank() {
            return Err(Error::shape("permute", &self.shape, perm));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::Axis {
                    op: "permute",
                    axis: p,
                    rank: self.rank(),
                });
            }
            seen[p] = true;
        }
        let (shape, data) = permute_data(&self.shape, &self.data, perm);
        Ok(Self::from_parts(shape, data))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Tensor> {
        let lead = self.shape[0];
        if len == 0 || start + len > lead {
            return Err(Error::range("narrow", alloc::format!("{start}+{len} of {lead}")));
        }
        let inner = self.len() / lead;
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self::from_parts(
            shape,
            self.data[start * inner..(start + len) * inner].to_vec(),
        ))
    }

    /// Tiles the tensor `times` times along the leading axis.
    pub fn repeat_leading(&self, times: usize) -> Tensor {
        let mut shape = self.shape.clone();
        shape[0] *= times;
        let mut data = Vec::with_capacity(self.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Self::from_parts(shape, data)
    }

    /// Adds a vector along the last axis of every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let d = *self.shape.last().unwrap_or(&0);
        if row.len() != d {
            return Err(Error::shape("add_row", &self.shape, &row.shape));
        }
        let mut data = self.data.clone();
        for chunk in data.chunks_exact_mut(d) {
            for (x, &b) in chunk.iter_mut().zip(&row.data) {
                *x += b;
            }
        }
        ensure_finite("add_row", &data)?;
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    /// Concatenates along the leading axis.
    pub fn concat_leading(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::range("concat", "no parts"))?;
        let mut shape = first.shape.clone();
        shape[0] = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
            shape[0] += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_parts(shape, data))
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, &a.shape, &b.shape));
    }
    Ok(())
}

pub(crate) fn ensure_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Shape bookkeeping for a batched product; returns (batch, m, k, n, rhs_batched).
pub(crate) fn matmul_dims(a: &[usize], b: &[usize], transpose_b: bool) -> Result<(usize, usize, usize, usize, bool)> {
    let op = "matmul";
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(op, a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if transpose_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != bk {
        return Err(Error::shape(op, a, b));
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    let rhs_batched = if b.len() == 2 {
        false
    } else if b[..b.len() - 2] == a[..a.len() - 2] {
        true
    } else {
        return Err(Error::shape(op, a, b));
    };
    Ok((batch, m, k, n, rhs_batched))
}

fn matmul_impl(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    let (batch, m, k, n, rhs_batched) = matmul_dims(&a.shape, &b.shape, transpose_b)?;
    let mut shape = a.shape.clone();
    let r = shape.len();
    shape[r - 1] = n;
    let mut out = vec![0.0f32; batch * m * n];
    let b_t;
    let b_nn: &[f32] = if transpose_b {
        b_t = transpose_last(&b.shape, &b.data);
        &b_t
    } else {
        &b.data
    };
    if rhs_batched {
        for i in 0..batch {
            gemm(
                &a.data[i * m * k..(i + 1) * m * k],
                &b_nn[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
    } else {
        // Shared right operand: fold the batch into the row count.
        gemm(&a.data, b_nn, &mut out, batch * m, k, n);
    }
    ensure_finite(if transpose_b { "matmul_t" } else { "matmul" }, &out)?;
    Ok(Tensor::from_parts(shape, out))
}

/// `out = a · b` for row-major `a: m×k`, `b: k×n`.
///
/// Each output element accumulates over the inner index in ascending order.
pub(crate) fn gemm(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() == m * k && out.len() == m * n);
    out.fill(0.0);
    // four output rows share each pass over a row of `b`; the per-element
    // accumulation order is unchanged
    let mut rows = out.chunks_exact_mut(4 * n);
    let mut i = 0;
    for block in rows.by_ref() {
        let (r0, rest) = block.split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        for kk in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + kk], a[(i + 1) * k + kk], a[(i + 2) * k + kk], a[(i + 3) * k + kk]);
            let brow = &b[kk * n..(kk + 1) * n];
            for ((((o0, o1), o2), o3), &bv) in r0.iter_mut().zip(r1.iter_mut()).zip(r2.iter_mut()).zip(r3.iter_mut()).zip(brow) {
                *o0 += a0 * bv;
                *o1 += a1 * bv;
                *o2 += a2 * bv;
                *o3 += a3 * bv;
            }
        }
        i += 4;
    }
    for row in rows.into_remainder().chunks_exact_mut(n) {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
        i += 1;
    }
}

/// `out += aᵀ · c` for row-major `a: m×k`, `c: m×n`, `out: k×n`.
///
/// Accumulates over `m` in ascending order.
pub(crate) fn gemm_tn_acc(a: &[f32], c: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let (c0, c1, c2, c3) = (
            &c[i * n..(i + 1) * n],
            &c[(i + 1) * n..(i + 2) * n],
            &c[(i + 2) * n..(i + 3) * n],
            &c[(i + 3) * n..(i + 4) * n],
        );
        for kk in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + kk], a[(i + 1) * k + kk], a[(i + 2) * k + kk], a[(i + 3) * k + kk]);
            let orow = &mut out[kk * n..(kk + 1) * n];
            for ((((o, &v0), &v1), &v2), &v3) in orow.iter_mut().zip(c0).zip(c1).zip(c2).zip(c3) {
                let mut acc = *o;
                acc += a0 * v0;
                acc += a1 * v1;
                acc += a2 * v2;
                acc += a3 * v3;
                *o = acc;
            }
        }
        i += 4;
    }
    for i in i..m {
        let crow = &c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += aik * cv;
            }
        }
    }
}

/// Swaps the last two axes.
pub(crate) fn transpose_last(shape: &[usize], data: &[f32]) -> Vec<f32> {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let mat = rows * cols;
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks_exact(mat).zip(out.chunks_exact_mut(mat)) {
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    out
}

pub(crate) fn softmax_rows(x: &[f32], out: &mut [f32], width: usize) {
    for (src, dst) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f64;
        for (d, &s) in dst.iter_mut().zip(src) {
            let e = libm::expf(s - max);
            *d = e;
            total += e as f64;
        }
        for d in dst.iter_mut() {
            *d = (*d as f64 / total) as f32;
        }
    }
}

pub(crate) fn permute_data(shape: &[usize], data: &[f32], perm: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        return (out_shape, data.to_vec());
    }
    // Odometer over the output index; the innermost axis is walked directly.
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            for j in 0..inner {
                out.push(data[base + j * inner_stride]);
            }
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
