//! Matrix products, normalization, softmax, convolution and rotary
//! position encoding, each with a hand-written backward rule.

use super::elementwise::broadcast_shape;
use super::graph::{Graph, Var};
use super::tensor::{resolve_axis, strides_of, Real, Tensor};
use crate::error::{LayaError, Result};

/// Batch-offset tables for a broadcast batched matmul.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

fn batch_offsets(batch: &[usize], out_batch: &[usize], mat_size: usize) -> Vec<usize> {
    let total: usize = out_batch.iter().product();
    let pad = out_batch.len() - batch.len();
    let strides = strides_of(batch);
    let mut offsets = Vec::with_capacity(total);
    let out_strides = strides_of(out_batch);
    for flat in 0..total {
        let mut off = 0;
        for d in 0..out_batch.len() {
            let idx = (flat / out_strides[d]) % out_batch[d];
            if d >= pad && batch[d - pad] != 1 {
                off += idx * strides[d - pad];
            }
        }
        offsets.push(off * mat_size);
    }
    offsets
}

fn plan_matmul(
    a: &[usize],
    b: &[usize],
    trans_b: bool,
) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(LayaError::shape(
            "matmul",
            format!("operands must be >=2-d: {:?} x {:?}", a, b),
        ));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != kb {
        return Err(LayaError::shape(
            "matmul",
            format!("{:?} x {:?}{}", a, b, if trans_b { "^T" } else { "" }),
        ));
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let out_batch = broadcast_shape(ab, bb).ok_or_else(|| {
        LayaError::shape("matmul", format!("batch dims {:?} vs {:?}", ab, bb))
    })?;
    let a_offsets = batch_offsets(ab, &out_batch, m * k);
    let b_offsets = batch_offsets(bb, &out_batch, k * n);
    let mut out_shape = out_batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        a_offsets,
        b_offsets,
    })
}

/// Row/column strides of a row-major `rows x cols` matrix, optionally
/// viewed transposed.
fn mat_strides(cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

impl<F: Real> Graph<F> {
    /// Batched `a @ b` with numpy-style broadcasting of batch dims.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a @ b^T` (transpose of the last two axes of `b`).
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (value, plan) = {
            let (ta, tb) = (self.value(a), self.value(b));
            let plan = plan_matmul(ta.shape(), tb.shape(), trans_b)?;
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let mut out = Tensor::<F>::zeros(plan.out_shape.clone());
            let (rsb, csb) = mat_strides(if trans_b { k } else { n }, trans_b);
            let od = out.data_mut();
            for (bi, (&ao, &bo)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                unsafe {
                    F::gemm(
                        m,
                        k,
                        n,
                        F::one(),
                        ta.data().as_ptr().add(ao),
                        k as isize,
                        1,
                        tb.data().as_ptr().add(bo),
                        rsb,
                        csb,
                        F::zero(),
                        od.as_mut_ptr().add(bi * m * n),
                        n as isize,
                        1,
                    );
                }
            }
            (out, plan)
        };
        self.push_op(
            "matmul",
            value,
            &[a, b],
            Box::new(move |g, inputs, _, needs| {
                let (ta, tb) = (inputs[0], inputs[1]);
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let gd = g.data();
                let ga = needs[0].then(|| {
                    // dA = dC @ B^T  (B viewed as k x n)
                    let mut da = Tensor::<F>::zeros(ta.shape().to_vec());
                    let (rsb, csb) = mat_strides(if trans_b { k } else { n }, !trans_b);
                    for (bi, (&ao, &bo)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                        unsafe {
                            F::gemm(
                                m,
                                n,
                                k,
                                F::one(),
                                gd.as_ptr().add(bi * m * n),
                                n as isize,
                                1,
                                tb.data().as_ptr().add(bo),
                                rsb,
                                csb,
                                F::one(),
                                da.data_mut().as_mut_ptr().add(ao),
                                k as isize,
                                1,
                            );
                        }
                    }
                    da
                });
                let gb = needs[1].then(|| {
                    let mut db = Tensor::<F>::zeros(tb.shape().to_vec());
                    for (bi, (&ao, &bo)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                        unsafe {
                            if trans_b {
                                // stored B is n x k: dB = dC^T @ A
                                F::gemm(
                                    n,
                                    m,
                                    k,
                                    F::one(),
                                    gd.as_ptr().add(bi * m * n),
                                    1,
                                    n as isize,
                                    ta.data().as_ptr().add(ao),
                                    k as isize,
                                    1,
                                    F::one(),
                                    db.data_mut().as_mut_ptr().add(bo),
                                    k as isize,
                                    1,
                                );
                            } else {
                                // dB = A^T @ dC
                                F::gemm(
                                    k,
                                    m,
                                    n,
                                    F::one(),
                                    ta.data().as_ptr().add(ao),
                                    1,
                                    k as isize,
                                    gd.as_ptr().add(bi * m * n),
                                    n as isize,
                                    1,
                                    F::one(),
                                    db.data_mut().as_mut_ptr().add(bo),
                                    n as isize,
                                    1,
                                );
                            }
                        }
                    }
                    db
                });
                vec![ga, gb]
            }),
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: isize) -> Result<Var> {
        let (value, axis) = {
            let t = self.value(x);
            let axis = resolve_axis(axis, t.ndim(), "softmax")?;
            let (outer, len, inner) = t.axis_split(axis);
            let mut out = t.clone();
            let d = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mut mx = F::neg_infinity();
                    for l in 0..len {
                        mx = mx.max(d[at(l)]);
                    }
                    let mut sum = F::zero();
                    for l in 0..len {
                        let e = (d[at(l)] - mx).exp();
                        d[at(l)] = e;
                        sum += e;
                    }
                    for l in 0..len {
                        d[at(l)] = d[at(l)] / sum;
                    }
                }
            }
            (out, axis)
        };
        self.push_op(
            "softmax",
            value,
            &[x],
            Box::new(move |g, _, y, _| {
                let (outer, len, inner) = y.axis_split(axis);
                let (gd, yd) = (g.data(), y.data());
                let mut dx = vec![F::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut dot = F::zero();
                        for l in 0..len {
                            dot += gd[at(l)] * yd[at(l)];
                        }
                        for l in 0..len {
                            dx[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_vec(y.shape().to_vec(), dx).unwrap())]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (value, xhat, inv_std) = {
            let t = self.value(x);
            let d = *t.shape().last().ok_or_else(|| LayaError::shape("layer_norm", "0-d input"))?;
            let (gm, bt) = (self.value(gamma), self.value(beta));
            if gm.shape() != [d] || bt.shape() != [d] {
                return Err(LayaError::shape(
                    "layer_norm",
                    format!("affine {:?}/{:?} for feature dim {}", gm.shape(), bt.shape(), d),
                ));
            }
            let rows = t.numel() / d;
            let dn = F::from_usize(d).unwrap();
            let mut xhat = vec![F::zero(); t.numel()];
            let mut inv_std = vec![F::zero(); rows];
            let mut out = vec![F::zero(); t.numel()];
            for r in 0..rows {
                let row = &t.data()[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<F>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
                let is = F::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gm.data()[j] + bt.data()[j];
                }
            }
            let shape = t.shape().to_vec();
            (
                Tensor::from_vec(shape.clone(), out)?,
                Tensor::from_vec(shape, xhat)?,
                inv_std,
            )
        };
        self.push_op(
            "layer_norm",
            value,
            &[x, gamma, beta],
            Box::new(move |g, inputs, _, needs| {
                let d = inputs[1].numel();
                let rows = g.numel() / d;
                let (gd, hd, gm) = (g.data(), xhat.data(), inputs[1].data());
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                let mut dx = vec![F::zero(); g.numel()];
                let dn = F::from_usize(d).unwrap();
                for r in 0..rows {
                    let mut mean_dh = F::zero();
                    let mut mean_dh_h = F::zero();
                    for j in 0..d {
                        let i = r * d + j;
                        dgamma[j] += gd[i] * hd[i];
                        dbeta[j] += gd[i];
                        let dh = gd[i] * gm[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hd[i];
                    }
                    mean_dh = mean_dh / dn;
                    mean_dh_h = mean_dh_h / dn;
                    if needs[0] {
                        for j in 0..d {
                            let i = r * d + j;
                            let dh = gd[i] * gm[j];
                            dx[i] = inv_std[r] * (dh - mean_dh - hd[i] * mean_dh_h);
                        }
                    }
                }
                vec![
                    needs[0].then(|| Tensor::from_vec(g.shape().to_vec(), dx).unwrap()),
                    needs[1].then(|| Tensor::from_vec(vec![d], dgamma).unwrap()),
                    needs[2].then(|| Tensor::from_vec(vec![d], dbeta).unwrap()),
                ]
            }),
        )
    }

    /// Batch normalization of `x: [M, D]` with batch statistics over the
    /// M rows. Returns the output and the (mean, biased variance) used.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    ) -> Result<(Var, Vec<F>, Vec<F>)> {
        let (value, xhat, inv_std, mean, var) = {
            let t = self.value(x);
            if t.ndim() != 2 {
                return Err(LayaError::shape("batch_norm", format!("expected [M, D], got {:?}", t.shape())));
            }
            let (m, d) = (t.shape()[0], t.shape()[1]);
            if m < 2 {
                return Err(LayaError::InvalidArgument(
                    "batch_norm needs at least 2 rows in training mode".into(),
                ));
            }
            let (gm, bt) = (self.value(gamma), self.value(beta));
            if gm.shape() != [d] || bt.shape() != [d] {
                return Err(LayaError::shape("batch_norm", "affine parameter shape"));
            }
            let mn = F::from_usize(m).unwrap();
            let xd = t.data();
            let mut mean = vec![F::zero(); d];
            for r in 0..m {
                for j in 0..d {
                    mean[j] += xd[r * d + j];
                }
            }
            mean.iter_mut().for_each(|v| *v = *v / mn);
            let mut var = vec![F::zero(); d];
            for r in 0..m {
                for j in 0..d {
                    let c = xd[r * d + j] - mean[j];
                    var[j] += c * c;
                }
            }
            var.iter_mut().for_each(|v| *v = *v / mn);
            let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
            let mut xhat = vec![F::zero(); m * d];
            let mut out = vec![F::zero(); m * d];
            for r in 0..m {
                for j in 0..d {
                    let i = r * d + j;
                    xhat[i] = (xd[i] - mean[j]) * inv_std[j];
                    out[i] = xhat[i] * gm.data()[j] + bt.data()[j];
                }
            }
            (
                Tensor::from_vec(vec![m, d], out)?,
                xhat,
                inv_std,
                mean,
                var,
            )
        };
        let y = self.push_op(
            "batch_norm",
            value,
            &[x, gamma, beta],
            Box::new(move |g, inputs, _, needs| {
                let d = inputs[1].numel();
                let m = g.numel() / d;
                let mn = F::from_usize(m).unwrap();
                let (gd, gm) = (g.data(), inputs[1].data());
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                for r in 0..m {
                    for j in 0..d {
                        let i = r * d + j;
                        dgamma[j] += gd[i] * xhat[i];
                        dbeta[j] += gd[i];
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![F::zero(); m * d];
                    for r in 0..m {
                        for j in 0..d {
                            let i = r * d + j;
                            let dh = gd[i] * gm[j];
                            // mean(dh) = gamma*dbeta/m, mean(dh*xhat) = gamma*dgamma/m
                            dx[i] = inv_std[j]
                                * (dh - gm[j] * dbeta[j] / mn - xhat[i] * gm[j] * dgamma[j] / mn);
                        }
                    }
                    Tensor::from_vec(vec![m, d], dx).unwrap()
                });
                vec![
                    dx,
                    needs[1].then(|| Tensor::from_vec(vec![d], dgamma.clone()).unwrap()),
                    needs[2].then(|| Tensor::from_vec(vec![d], dbeta.clone()).unwrap()),
                ]
            }),
        )?;
        Ok((y, mean, var))
    }

    /// Depthwise strided 1D convolution with one kernel bank shared by
    /// every channel.
    ///
    /// `x: [B, C, T]`, `weight: [E, K]`, `bias: [E]` gives
    /// `[B, C, N, E]` with `N = (T - K) / stride + 1`.
    pub fn conv1d_shared(&self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (value, dims) = {
            let (t, w, b) = (self.value(x), self.value(weight), self.value(bias));
            if t.ndim() != 3 || w.ndim() != 2 || b.shape() != [w.shape()[0]] {
                return Err(LayaError::shape(
                    "conv1d_shared",
                    format!("x {:?}, weight {:?}, bias {:?}", t.shape(), w.shape(), b.shape()),
                ));
            }
            let (bs, c, len) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let (e, k) = (w.shape()[0], w.shape()[1]);
            if stride == 0 || len < k || (len - k) % stride != 0 {
                return Err(LayaError::shape(
                    "conv1d_shared",
                    format!("length {} not tiled by kernel {} / stride {}", len, k, stride),
                ));
            }
            let n = (len - k) / stride + 1;
            let mut out = Tensor::<F>::zeros(vec![bs, c, n, e]);
            let od = out.data_mut();
            for row in 0..bs * c {
                let dst = &mut od[row * n * e..(row + 1) * n * e];
                for chunk in dst.chunks_mut(e) {
                    chunk.copy_from_slice(b.data());
                }
                unsafe {
                    // windows: n x k matrix with row stride `stride`
                    F::gemm(
                        n,
                        k,
                        e,
                        F::one(),
                        t.data().as_ptr().add(row * len),
                        stride as isize,
                        1,
                        w.data().as_ptr(),
                        1,
                        k as isize,
                        F::one(),
                        dst.as_mut_ptr(),
                        e as isize,
                        1,
                    );
                }
            }
            (out, (bs * c, len, n, e, k))
        };
        self.push_op(
            "conv1d_shared",
            value,
            &[x, weight, bias],
            Box::new(move |g, inputs, _, needs| {
                let (rows, len, n, e, k) = dims;
                let (t, w) = (inputs[0], inputs[1]);
                let gd = g.data();
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::<F>::zeros(t.shape().to_vec());
                    let mut tmp = vec![F::zero(); n * k];
                    for row in 0..rows {
                        unsafe {
                            F::gemm(
                                n,
                                e,
                                k,
                                F::one(),
                                gd.as_ptr().add(row * n * e),
                                e as isize,
                                1,
                                w.data().as_ptr(),
                                k as isize,
                                1,
                                F::zero(),
                                tmp.as_mut_ptr(),
                                k as isize,
                                1,
                            );
                        }
                        let dst = &mut dx.data_mut()[row * len..(row + 1) * len];
                        for p in 0..n {
                            for q in 0..k {
                                dst[p * stride + q] += tmp[p * k + q];
                            }
                        }
                    }
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = Tensor::<F>::zeros(vec![e, k]);
                    for row in 0..rows {
                        unsafe {
                            F::gemm(
                                e,
                                n,
                                k,
                                F::one(),
                                gd.as_ptr().add(row * n * e),
                                1,
                                e as isize,
                                t.data().as_ptr().add(row * len),
                                stride as isize,
                                1,
                                F::one(),
                                dw.data_mut().as_mut_ptr(),
                                k as isize,
                                1,
                            );
                        }
                    }
                    dw
                });
                let db = needs[2].then(|| {
                    let mut db = vec![F::zero(); e];
                    for chunk in gd.chunks(e) {
                        for (a, &v) in db.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    Tensor::from_vec(vec![e], db).unwrap()
                });
                vec![dx, dw, db]
            }),
        )
    }

    /// Rotary position encoding on `x: [..., L, dh]`, rotating the
    /// half-split pairs `(j, j + dh/2)` by `positions[l] * base^(-2j/dh)`.
    pub fn rope(&self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let (value, cos, sin, l, dh) = {
            let t = self.value(x);
            let nd = t.ndim();
            if nd < 2 {
                return Err(LayaError::shape("rope", "needs [..., L, dh]"));
            }
            let (l, dh) = (t.shape()[nd - 2], t.shape()[nd - 1]);
            if dh % 2 != 0 || positions.len() != l {
                return Err(LayaError::shape(
                    "rope",
                    format!("dh {} must be even and positions {} == L {}", dh, positions.len(), l),
                ));
            }
            let (cos, sin) = rope_tables::<F>(positions, dh, base);
            let mut out = t.clone();
            apply_rotation(out.data_mut(), &cos, &sin, l, dh, false);
            (out, cos, sin, l, dh)
        };
        self.push_op(
            "rope",
            value,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut dx = g.clone();
                apply_rotation(dx.data_mut(), &cos, &sin, l, dh, true);
                vec![Some(dx)]
            }),
        )
    }
}

pub(crate) fn rope_tables<F: Real>(positions: &[usize], dh: usize, base: f64) -> (Vec<F>, Vec<F>) {
    let half = dh / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for j in 0..half {
            let freq = base.powf(-(2.0 * j as f64) / dh as f64);
            let angle = p as f64 * freq;
            cos.push(F::from_f64_lossy(angle.cos()));
            sin.push(F::from_f64_lossy(angle.sin()));
        }
    }
    (cos, sin)
}

fn apply_rotation<F: Real>(data: &mut [F], cos: &[F], sin: &[F], l: usize, dh: usize, inverse: bool) {
    let half = dh / 2;
    for (row_idx, row) in data.chunks_mut(dh).enumerate() {
        let pos = row_idx % l;
        for j in 0..half {
            let (c, mut s) = (cos[pos * half + j], sin[pos * half + j]);
            if inverse {
                s = -s;
            }
            let (a, b) = (row[j], row[j + half]);
            row[j] = a * c - b * s;
            row[j + half] = b * c + a * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::from_vec(vec![2, 1], vec![5., 6.]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17., 39.]);
        let d = g.matmul_nt(a, a).unwrap();
        assert_eq!(g.value(d).data(), &[5., 11., 11., 25.]);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_constant_vector_is_uniform() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![4], 3.7));
        let y = g.softmax(x, -1).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn depthwise_all_ones_sums_kernel() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(vec![1, 2, 50]));
        let w = g.constant(Tensor::ones(vec![3, 25]));
        let b = g.constant(Tensor::zeros(vec![3]));
        let y = g.conv1d_shared(x, w, b, 25).unwrap();
        assert_eq!(g.shape(y), vec![1, 2, 2, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 25.0));
    }

    #[test]
    fn conv_rejects_untiled_length() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 51]));
        let w = g.constant(Tensor::ones(vec![3, 25]));
        let b = g.constant(Tensor::zeros(vec![3]));
        assert!(g.conv1d_shared(x, w, b, 25).is_err());
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(vec![1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let y = g.rope(x, &[0], 10000.0).unwrap();
        assert_eq!(*g.value(y), *g.value(x));
    }

    #[test]
    fn rope_preserves_norm() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(vec![2, 4], vec![0.3, -1.0, 2.0, 0.5, 1., 2., 3., 4.]).unwrap());
        let y = g.rope(x, &[7, 123], 10000.0).unwrap();
        let (xv, yv) = (g.value(x), g.value(y));
        for r in 0..2 {
            let nx: f64 = xv.data()[r * 4..r * 4 + 4].iter().map(|v| v * v).sum();
            let ny: f64 = yv.data()[r * 4..r * 4 + 4].iter().map(|v| v * v).sum();
            assert!((nx - ny).abs() < 1e-12);
        }
    }
}
