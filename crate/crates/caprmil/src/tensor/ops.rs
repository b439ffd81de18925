//! Differentiable operations.
//!
//! Every public method builds the forward result eagerly and registers a VJP
//! closure that maps the output cotangent to parent cotangents. Closures
//! capture parent tensors by cheap clone where the backward pass needs their
//! values; operations whose backward only needs the *output* (softmax, tanh)
//! read it from the argument instead and capture nothing.
//!
//! Broadcasting is deliberately one-sided: the right operand of `add`/`mul`/
//! `div` may have fewer dimensions or size-1 dimensions, the left operand is
//! always full-shape. That covers bias terms, per-slice masses and per-head
//! temperatures without the combinatorics of general NumPy broadcasting.

use std::sync::Arc;

use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::{numel, strides, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Strides for the right operand of a broadcast op: `0` on broadcast dims.
///
/// Errors unless every rhs dimension (right-aligned) is 1 or matches lhs.
fn bcast_strides(lhs: &[usize], rhs: &[usize]) -> Result<Vec<usize>> {
    if rhs.len() > lhs.len() {
        return Err(Error::shape(format!(
            "broadcast rhs {rhs:?} has higher rank than lhs {lhs:?}"
        )));
    }
    let rhs_strides = strides(rhs);
    let offset = lhs.len() - rhs.len();
    let mut out = vec![0usize; lhs.len()];
    for (d, &l) in lhs.iter().enumerate() {
        if d < offset {
            continue;
        }
        let r = rhs[d - offset];
        if r == l {
            out[d] = rhs_strides[d - offset];
        } else if r == 1 {
            out[d] = 0;
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast rhs {rhs:?} against lhs {lhs:?} (dim {d})"
            )));
        }
    }
    Ok(out)
}

/// Visit `(lhs_flat_index, rhs_flat_index)` pairs in row-major order.
fn bcast_walk(shape: &[usize], rhs_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let mut midx = vec![0usize; shape.len()];
    let mut r = 0usize;
    for i in 0..total {
        f(i, r);
        for d in (0..shape.len()).rev() {
            midx[d] += 1;
            r += rhs_strides[d];
            if midx[d] < shape[d] {
                break;
            }
            r -= rhs_strides[d] * shape[d];
            midx[d] = 0;
        }
    }
}

/// `(outer, len, inner)` decomposition around one axis.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<T: Scalar> Tensor<T> {
    /// Matrix product over the trailing two dimensions.
    ///
    /// `[.., m, k] · [k, n]` (shared right operand) or `[.., m, k] · [.., k, n]`
    /// with identical leading dimensions.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() < 2 || rs.len() < 2 {
            return Err(Error::shape(format!(
                "matmul needs rank >= 2 operands, got {ls:?} and {rs:?}"
            )));
        }
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (rk, n) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        let shared_rhs = rs.len() == 2 && ls.len() > 2;
        if k != rk || (!shared_rhs && ls[..ls.len() - 2] != rs[..rs.len() - 2]) {
            return Err(Error::shape(format!(
                "matmul shape mismatch: {ls:?} vs {rs:?}"
            )));
        }
        let batches: usize = ls[..ls.len() - 2].iter().product();
        let mut out_shape = ls[..ls.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let mut out = vec![T::ZERO; batches * m * n];
        for bi in 0..batches {
            let a = &self.data()[bi * m * k..(bi + 1) * m * k];
            let b = if shared_rhs || rs.len() == 2 {
                rhs.data()
            } else {
                &rhs.data()[bi * k * n..(bi + 1) * k * n]
            };
            mm_nn(a, b, m, k, n, &mut out[bi * m * n..(bi + 1) * m * n]);
        }

        let (lhs_c, rhs_c) = (self.clone(), rhs.clone());
        let rhs_len = rhs.len();
        let lhs_len = self.len();
        // Each operand's half of the VJP is skipped entirely when that
        // operand is untracked — for `bag · W` the bag gradient is the
        // single most expensive matmul in a training step, and pure waste.
        let (want_da, want_db) = (self.is_tracked(), rhs.is_tracked());
        Ok(Tensor::op(
            out,
            out_shape,
            vec![self.clone(), rhs.clone()],
            move |_, cot| {
                let mut da = want_da.then(|| vec![T::ZERO; lhs_len]);
                let mut db = want_db.then(|| vec![T::ZERO; rhs_len]);
                for bi in 0..batches {
                    let c = &cot[bi * m * n..(bi + 1) * m * n];
                    // dA = cot · Bᵀ
                    if let Some(da) = da.as_mut() {
                        let b = if rhs_c.shape().len() == 2 {
                            rhs_c.data()
                        } else {
                            &rhs_c.data()[bi * k * n..(bi + 1) * k * n]
                        };
                        mm_nt(c, b, m, n, k, &mut da[bi * m * k..(bi + 1) * m * k]);
                    }
                    // dB += Aᵀ · cot
                    if let Some(db) = db.as_mut() {
                        let a = &lhs_c.data()[bi * m * k..(bi + 1) * m * k];
                        let db_slice = if rhs_c.shape().len() == 2 {
                            &mut db[..]
                        } else {
                            &mut db[bi * k * n..(bi + 1) * k * n]
                        };
                        mm_tn(a, c, k, m, n, db_slice);
                    }
                }
                vec![da, db]
            },
        ))
    }

    /// Elementwise sum; rhs may broadcast (bias-style).
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() == rhs.shape() {
            let out = self
                .data()
                .iter()
                .zip(rhs.data())
                .map(|(&a, &b)| a + b)
                .collect();
            return Ok(Tensor::op(
                out,
                self.shape().to_vec(),
                vec![self.clone(), rhs.clone()],
                |_, cot| vec![Some(cot.to_vec()), Some(cot.to_vec())],
            ));
        }
        let rstr = bcast_strides(self.shape(), rhs.shape())?;
        let mut out = self.data().to_vec();
        let rdata = rhs.data();
        bcast_walk(self.shape(), &rstr, |i, r| out[i] += rdata[r]);
        let shape = self.shape().to_vec();
        let rhs_len = rhs.len();
        let shape_c = shape.clone();
        Ok(Tensor::op(
            out,
            shape,
            vec![self.clone(), rhs.clone()],
            move |_, cot| {
                let mut dr = vec![T::ZERO; rhs_len];
                bcast_walk(&shape_c, &rstr, |i, r| dr[r] += cot[i]);
                vec![Some(cot.to_vec()), Some(dr)]
            },
        ))
    }

    /// Elementwise product; rhs may broadcast.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let rstr = bcast_strides(self.shape(), rhs.shape())?;
        let mut out = self.data().to_vec();
        let rdata = rhs.data();
        bcast_walk(self.shape(), &rstr, |i, r| out[i] = out[i] * rdata[r]);
        let shape = self.shape().to_vec();
        let (lhs_c, rhs_c) = (self.clone(), rhs.clone());
        let rhs_len = rhs.len();
        let shape_c = shape.clone();
        Ok(Tensor::op(
            out,
            shape,
            vec![self.clone(), rhs.clone()],
            move |_, cot| {
                let (l, r) = (lhs_c.data(), rhs_c.data());
                let mut dl = vec![T::ZERO; l.len()];
                let mut dr = vec![T::ZERO; rhs_len];
                bcast_walk(&shape_c, &rstr, |i, ri| {
                    dl[i] = cot[i] * r[ri];
                    dr[ri] += cot[i] * l[i];
                });
                vec![Some(dl), Some(dr)]
            },
        ))
    }

    /// Elementwise quotient; rhs may broadcast.
    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let rstr = bcast_strides(self.shape(), rhs.shape())?;
        let mut out = self.data().to_vec();
        let rdata = rhs.data();
        bcast_walk(self.shape(), &rstr, |i, r| out[i] = out[i] / rdata[r]);
        let shape = self.shape().to_vec();
        let rhs_c = rhs.clone();
        let rhs_len = rhs.len();
        let shape_c = shape.clone();
        Ok(Tensor::op(
            out,
            shape,
            vec![self.clone(), rhs.clone()],
            move |out_data, cot| {
                let r = rhs_c.data();
                let mut dl = vec![T::ZERO; out_data.len()];
                let mut dr = vec![T::ZERO; rhs_len];
                bcast_walk(&shape_c, &rstr, |i, ri| {
                    dl[i] = cot[i] / r[ri];
                    // d/dr (l/r) = -l/r^2 = -out/r
                    dr[ri] += -cot[i] * out_data[i] / r[ri];
                });
                vec![Some(dl), Some(dr)]
            },
        ))
    }

    /// Multiply by a scalar constant.
    pub fn scale(&self, c: T) -> Tensor<T> {
        let out = self.data().iter().map(|&x| x * c).collect();
        Tensor::op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            move |_, cot| vec![Some(cot.iter().map(|&g| g * c).collect())],
        )
    }

    /// Add a scalar constant.
    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let out = self.data().iter().map(|&x| x + c).collect();
        Tensor::op(out, self.shape().to_vec(), vec![self.clone()], |_, cot| {
            vec![Some(cot.to_vec())]
        })
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape().len() {
            return Err(Error::shape(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        if self.shape()[axis] == 0 {
            return Err(Error::shape(format!(
                "softmax over empty axis {axis} of shape {:?}",
                self.shape()
            )));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::ZERO; x.len()];
        for o in 0..outer {
            for inn in 0..inner {
                let base = o * len * inner + inn;
                let mut mx = x[base];
                for l in 1..len {
                    mx = mx.maximum(x[base + l * inner]);
                }
                let mut sum = T::ZERO;
                for l in 0..len {
                    let e = (x[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[base + l * inner] = out[base + l * inner] / sum;
                }
            }
        }
        Ok(Tensor::op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            move |out_data, cot| {
                // ds = s ⊙ (cot − ⟨cot, s⟩) per lane
                let mut dx = vec![T::ZERO; out_data.len()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let base = o * len * inner + inn;
                        let mut dot = T::ZERO;
                        for l in 0..len {
                            let idx = base + l * inner;
                            dot += cot[idx] * out_data[idx];
                        }
                        for l in 0..len {
                            let idx = base + l * inner;
                            dx[idx] = out_data[idx] * (cot[idx] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Layer normalization over the last axis with affine parameters.
    ///
    /// Uses the population variance (no Bessel correction).
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| {
            Error::shape("layer_norm on rank-0 tensor".to_string())
        })?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm affine shapes {:?}/{:?} do not match feature size [{d}]",
                gamma.shape(),
                beta.shape()
            )));
        }
        let epst = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let (g, b) = (gamma.data(), beta.data());
        let mut out = vec![T::ZERO; self.len()];
        for (row, orow) in self.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                * inv_d;
            let inv = T::ONE / (var + epst).sqrt();
            for j in 0..d {
                orow[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let x_c = self.clone();
        let gamma_c = gamma.clone();
        Ok(Tensor::op(
            out,
            shape.to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |_, cot| {
                let g = gamma_c.data();
                let mut dx = vec![T::ZERO; x_c.len()];
                let mut dgamma = vec![T::ZERO; g.len()];
                let mut dbeta = vec![T::ZERO; g.len()];
                let rows = x_c.data().chunks_exact(d);
                for ((row, crow), dxrow) in rows.zip(cot.chunks_exact(d)).zip(dx.chunks_exact_mut(d))
                {
                    let mean = row.iter().copied().sum::<T>() * inv_d;
                    let var = row
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<T>()
                        * inv_d;
                    let inv = T::ONE / (var + epst).sqrt();
                    // m1 = mean(γ·cot), m2 = mean(γ·cot·x̂)
                    let mut m1 = T::ZERO;
                    let mut m2 = T::ZERO;
                    for j in 0..d {
                        let xh = (row[j] - mean) * inv;
                        let gc = g[j] * crow[j];
                        m1 += gc;
                        m2 += gc * xh;
                        dgamma[j] += crow[j] * xh;
                        dbeta[j] += crow[j];
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    for j in 0..d {
                        let xh = (row[j] - mean) * inv;
                        dxrow[j] = (g[j] * crow[j] - m1 - xh * m2) * inv;
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            },
        ))
    }

    /// Exact GELU: `x · Φ(x)` with the Gaussian CDF via `erf`.
    pub fn gelu(&self) -> Tensor<T> {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let out = self
            .data()
            .iter()
            .map(|&x| x * half * (T::ONE + (x * inv_sqrt2).erf()))
            .collect();
        let x_c = self.clone();
        Tensor::op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            move |_, cot| {
                let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let dx = x_c
                    .data()
                    .iter()
                    .zip(cot)
                    .map(|(&x, &c)| {
                        let cdf = half * (T::ONE + (x * inv_sqrt2).erf());
                        let pdf = (-x * x * half).exp() * inv_sqrt_2pi;
                        c * (cdf + x * pdf)
                    })
                    .collect();
                vec![Some(dx)]
            },
        )
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh_op(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| x.tanh()).collect();
        Tensor::op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            |out_data, cot| {
                let dx = out_data
                    .iter()
                    .zip(cot)
                    .map(|(&y, &c)| c * (T::ONE - y * y))
                    .collect();
                vec![Some(dx)]
            },
        )
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&self) -> Tensor<T> {
        let out: Vec<T> = self
            .data()
            .iter()
            .map(|&x| {
                // branch for numerical stability on large |x|
                if x >= T::ZERO {
                    T::ONE / (T::ONE + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::ONE + e)
                }
            })
            .collect();
        Tensor::op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            |out_data, cot| {
                let dx = out_data
                    .iter()
                    .zip(cot)
                    .map(|(&y, &c)| c * y * (T::ONE - y))
                    .collect();
                vec![Some(dx)]
            },
        )
    }

    /// Inverted dropout: keep with probability `1 - p`, scale kept values by
    /// `1/(1-p)` so eval needs no rescaling. Identity when not training or
    /// `p == 0`.
    pub fn dropout(&self, p: f64, rng: &mut Rng, training: bool) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let scale = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.len())
            .map(|_| if rng.uniform() >= p { scale } else { T::ZERO })
            .collect();
        let out = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        Ok(Tensor::op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            move |_, cot| {
                vec![Some(
                    cot.iter().zip(&mask).map(|(&c, &m)| c * m).collect(),
                )]
            },
        ))
    }

    /// Reorder dimensions; materializes the permuted buffer.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return Err(Error::shape(format!(
                "invalid permutation {perm:?} for shape {:?}",
                self.shape()
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&d| self.shape()[d]).collect();
        let out = permute_copy(self.data(), self.shape(), perm);
        let mut inv = vec![0usize; rank];
        for (d, &p) in perm.iter().enumerate() {
            inv[p] = d;
        }
        let out_shape_c = out_shape.clone();
        Ok(Tensor::op(
            out,
            out_shape,
            vec![self.clone()],
            move |_, cot| vec![Some(permute_copy(cot, &out_shape_c, &inv))],
        ))
    }

    /// Same data, new shape (element count must match). Shares the buffer.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        if numel(new_shape) != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {new_shape:?}",
                self.shape(),
                self.len()
            )));
        }
        if !self.is_tracked() {
            return Tensor::constant_shared(Arc::clone(self.data_arc()), new_shape.to_vec());
        }
        Tensor::op_shared(
            Arc::clone(self.data_arc()),
            new_shape.to_vec(),
            vec![self.clone()],
            |_, cot| vec![Some(cot.to_vec())],
        )
    }

    /// Sum over one axis (the axis disappears from the shape).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape().len() {
            return Err(Error::shape(format!(
                "sum_axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for inn in 0..inner {
                    out[o * inner + inn] += x[base + inn];
                }
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape.remove(axis);
        Ok(Tensor::op(
            out,
            out_shape,
            vec![self.clone()],
            move |_, cot| {
                let mut dx = vec![T::ZERO; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for inn in 0..inner {
                            dx[base + inn] = cot[o * inner + inn];
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Mean over one axis.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let len = *self.shape().get(axis).ok_or_else(|| {
            Error::shape(format!(
                "mean_axis {axis} out of range for shape {:?}",
                self.shape()
            ))
        })?;
        if len == 0 {
            return Err(Error::shape(format!(
                "mean over empty axis {axis} of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.sum_axis(axis)?.scale(T::from_f64(1.0 / len as f64)))
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        let n = self.len();
        Tensor::op(vec![total], vec![1], vec![self.clone()], move |_, cot| {
            vec![Some(vec![cot[0]; n])]
        })
    }
}

fn permute_copy<T: Scalar>(data: &[T], in_shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&d| in_shape[d]).collect();
    let out_in_strides: Vec<usize> = perm.iter().map(|&d| in_strides[d]).collect();
    let total = numel(&out_shape);
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let mut midx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(data[src]);
        for d in (0..out_shape.len()).rev() {
            midx[d] += 1;
            src += out_in_strides[d];
            if midx[d] < out_shape[d] {
                break;
            }
            src -= out_in_strides[d] * out_shape[d];
            midx[d] = 0;
        }
    }
    out
}

/// Mean cross-entropy between rows of `logits` and integer `labels`.
///
/// `logits` is `[B, C]` (or `[C]`, treated as one row); internally uses the
/// max-subtracted log-sum-exp. The backward pass is the classic
/// `(softmax - one_hot) / B`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let shape = logits.shape();
    let (b, c) = match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => {
            return Err(Error::shape(format!(
                "cross_entropy expects [B, C] logits, got {shape:?}"
            )))
        }
    };
    if labels.len() != b {
        return Err(Error::shape(format!(
            "cross_entropy got {} labels for {b} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::data(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let x = logits.data();
    let inv_b = T::from_f64(1.0 / b as f64);
    let mut loss = T::ZERO;
    for (bi, &y) in labels.iter().enumerate() {
        let row = &x[bi * c..(bi + 1) * c];
        let mut mx = row[0];
        for &v in &row[1..] {
            mx = mx.maximum(v);
        }
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        loss += lse - row[y];
    }
    loss = loss * inv_b;

    let logits_c = logits.clone();
    let labels_c = labels.to_vec();
    Ok(Tensor::op(
        vec![loss],
        vec![1],
        vec![logits.clone()],
        move |_, cot| {
            let x = logits_c.data();
            let mut dx = vec![T::ZERO; x.len()];
            for (bi, &y) in labels_c.iter().enumerate() {
                let row = &x[bi * c..(bi + 1) * c];
                let drow = &mut dx[bi * c..(bi + 1) * c];
                let mut mx = row[0];
                for &v in &row[1..] {
                    mx = mx.maximum(v);
                }
                let mut sum = T::ZERO;
                for (d, &v) in drow.iter_mut().zip(row) {
                    *d = (v - mx).exp();
                    sum += *d;
                }
                for (j, d) in drow.iter_mut().enumerate() {
                    let p = *d / sum;
                    let target = if j == y { T::ONE } else { T::ZERO };
                    *d = cot[0] * (p - target) * inv_b;
                }
            }
            vec![Some(dx)]
        },
    ))
}
