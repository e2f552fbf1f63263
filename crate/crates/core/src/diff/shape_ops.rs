//! Layout ops (reshape, permute, slicing, concat, gather) and reductions.

use super::graph::{Graph, Var};
use super::tensor::{resolve_axis, strides_of, Real, Tensor};
use crate::error::{LayaError, Result};

pub(crate) fn permute_tensor<F: Real>(t: &Tensor<F>, axes: &[usize]) -> Tensor<F> {
    let shape = t.shape();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = t.numel();
    let src = t.data();
    let mut data = Vec::with_capacity(total);
    let nd = out_shape.len();
    if nd == 0 || total == 0 {
        return Tensor::from_vec(out_shape, src.to_vec()).unwrap();
    }
    // innermost run copied in a tight loop
    let last = nd - 1;
    let (run, run_stride) = (out_shape[last], src_strides[last]);
    let outer = total / run;
    let mut idx = vec![0usize; last];
    let mut base = 0usize;
    for _ in 0..outer {
        if run_stride == 1 {
            data.extend_from_slice(&src[base..base + run]);
        } else {
            data.extend((0..run).map(|i| src[base + i * run_stride]));
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_vec(out_shape, data).unwrap()
}

fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Gathers `indices` along `axis`.
pub(crate) fn index_select_tensor<F: Real>(
    t: &Tensor<F>,
    axis: usize,
    indices: &[usize],
) -> Tensor<F> {
    let (outer, len, inner) = t.axis_split(axis);
    let src = t.data();
    let mut data = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            let start = (o * len + i) * inner;
            data.extend_from_slice(&src[start..start + inner]);
        }
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = indices.len();
    Tensor::from_vec(shape, data).unwrap()
}

fn scatter_add_tensor<F: Real>(
    g: &Tensor<F>,
    axis: usize,
    indices: &[usize],
    input_shape: &[usize],
) -> Tensor<F> {
    let mut out = Tensor::zeros(input_shape.to_vec());
    let len = input_shape[axis];
    let outer: usize = input_shape[..axis].iter().product();
    let inner: usize = input_shape[axis + 1..].iter().product();
    let gd = g.data();
    let od = out.data_mut();
    for o in 0..outer {
        for (k, &i) in indices.iter().enumerate() {
            let src = (o * indices.len() + k) * inner;
            let dst = (o * len + i) * inner;
            for j in 0..inner {
                od[dst + j] += gd[src + j];
            }
        }
    }
    out
}

pub(crate) fn sum_axis_tensor<F: Real>(t: &Tensor<F>, axis: usize, keepdim: bool) -> Tensor<F> {
    let (outer, len, inner) = t.axis_split(axis);
    let src = t.data();
    let mut data = vec![F::zero(); outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
            let acc = &mut data[o * inner..(o + 1) * inner];
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    let mut shape = t.shape().to_vec();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Tensor::from_vec(shape, data).unwrap()
}

/// Repeats `g` (reduced along `axis`) back to `shape`.
fn expand_axis<F: Real>(g: &Tensor<F>, axis: usize, shape: &[usize], scale: F) -> Tensor<F> {
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let gd = g.data();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let row = &gd[o * inner..(o + 1) * inner];
        for _ in 0..len {
            data.extend(row.iter().map(|&v| v * scale));
        }
    }
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

impl<F: Real> Graph<F> {
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let (value, in_shape) = {
            let t = self.value(x);
            (t.clone().reshaped(shape.to_vec())?, t.shape().to_vec())
        };
        self.push_op(
            "reshape",
            value,
            &[x],
            Box::new(move |g, _, _, _| vec![Some(g.clone().reshaped(in_shape.clone()).unwrap())]),
        )
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = {
            let t = self.value(x);
            let mut seen = vec![false; t.ndim()];
            if axes.len() != t.ndim() || axes.iter().any(|&a| a >= t.ndim() || std::mem::replace(&mut seen[a], true)) {
                return Err(LayaError::shape(
                    "permute",
                    format!("axes {:?} for shape {:?}", axes, t.shape()),
                ));
            }
            permute_tensor(&t, axes)
        };
        let inv = inverse_permutation(axes);
        self.push_op(
            "permute",
            value,
            &[x],
            Box::new(move |g, _, _, _| vec![Some(permute_tensor(g, &inv))]),
        )
    }

    /// Swaps two axes.
    pub fn transpose(&self, x: Var, a0: isize, a1: isize) -> Result<Var> {
        let nd = self.value(x).ndim();
        let (a0, a1) = (
            resolve_axis(a0, nd, "transpose")?,
            resolve_axis(a1, nd, "transpose")?,
        );
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(a0, a1);
        self.permute(x, &axes)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: isize, start: usize, len: usize) -> Result<Var> {
        let nd = self.value(x).ndim();
        let axis = resolve_axis(axis, nd, "narrow")?;
        let extent = self.value(x).shape()[axis];
        if start + len > extent {
            return Err(LayaError::shape(
                "narrow",
                format!("[{}, {}) exceeds extent {}", start, start + len, extent),
            ));
        }
        let indices: Vec<usize> = (start..start + len).collect();
        self.gather_axis("narrow", x, axis, indices)
    }

    /// Gathers entries along `axis` (indices may repeat).
    pub fn index_select(&self, x: Var, axis: isize, indices: &[usize]) -> Result<Var> {
        let nd = self.value(x).ndim();
        let axis = resolve_axis(axis, nd, "index_select")?;
        let extent = self.value(x).shape()[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(LayaError::shape(
                "index_select",
                format!("index {} out of range {}", bad, extent),
            ));
        }
        self.gather_axis("index_select", x, axis, indices.to_vec())
    }

    fn gather_axis(
        &self,
        op: &'static str,
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    ) -> Result<Var> {
        let (value, in_shape) = {
            let t = self.value(x);
            (index_select_tensor(&t, axis, &indices), t.shape().to_vec())
        };
        self.push_op(
            op,
            value,
            &[x],
            Box::new(move |g, _, _, _| {
                vec![Some(scatter_add_tensor(g, axis, &indices, &in_shape))]
            }),
        )
    }

    pub fn concat(&self, xs: &[Var], axis: isize) -> Result<Var> {
        if xs.is_empty() {
            return Err(LayaError::shape("concat", "no inputs"));
        }
        let first = self.shape(xs[0]);
        let axis = resolve_axis(axis, first.len(), "concat")?;
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(LayaError::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {}", s, first, axis),
                ));
            }
            lens.push(s[axis]);
        }
        let total_len: usize = lens.iter().sum();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total_len * inner);
        {
            let vals: Vec<_> = xs.iter().map(|&x| self.value(x)).collect();
            for o in 0..outer {
                for (v, &l) in vals.iter().zip(&lens) {
                    data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
                }
            }
        }
        let mut shape = first.clone();
        shape[axis] = total_len;
        let value = Tensor::from_vec(shape, data)?;
        self.push_op(
            "concat",
            value,
            xs,
            Box::new(move |g, inputs, _, needs| {
                let gd = g.data();
                let mut offset = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for ((inp, &l), &need) in inputs.iter().zip(&lens).zip(needs) {
                    if need {
                        let mut d = Vec::with_capacity(inp.numel());
                        for o in 0..outer {
                            let start = (o * total_len + offset) * inner;
                            d.extend_from_slice(&gd[start..start + l * inner]);
                        }
                        out.push(Some(Tensor::from_vec(inp.shape().to_vec(), d).unwrap()));
                    } else {
                        out.push(None);
                    }
                    offset += l;
                }
                out
            }),
        )
    }

    pub fn sum_axis(&self, x: Var, axis: isize, keepdim: bool) -> Result<Var> {
        self.reduce_axis("sum_axis", x, axis, keepdim, false)
    }

    pub fn mean_axis(&self, x: Var, axis: isize, keepdim: bool) -> Result<Var> {
        self.reduce_axis("mean_axis", x, axis, keepdim, true)
    }

    fn reduce_axis(
        &self,
        op: &'static str,
        x: Var,
        axis: isize,
        keepdim: bool,
        mean: bool,
    ) -> Result<Var> {
        let (value, in_shape, axis) = {
            let t = self.value(x);
            let axis = resolve_axis(axis, t.ndim(), op)?;
            let mut v = sum_axis_tensor(&t, axis, keepdim);
            if mean {
                let n = F::from_usize(t.shape()[axis]).unwrap();
                v = v.map(|e| e / n);
            }
            (v, t.shape().to_vec(), axis)
        };
        let scale = if mean {
            F::one() / F::from_usize(in_shape[axis]).unwrap()
        } else {
            F::one()
        };
        self.push_op(
            op,
            value,
            &[x],
            Box::new(move |g, _, _, _| vec![Some(expand_axis(g, axis, &in_shape, scale))]),
        )
    }

    pub fn sum_all(&self, x: Var) -> Result<Var> {
        self.reduce_all("sum_all", x, false)
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        self.reduce_all("mean_all", x, true)
    }

    fn reduce_all(&self, op: &'static str, x: Var, mean: bool) -> Result<Var> {
        let (value, in_shape) = {
            let t = self.value(x);
            let mut s = t.sum();
            if mean {
                s = s / F::from_usize(t.numel().max(1)).unwrap();
            }
            (Tensor::scalar(s), t.shape().to_vec())
        };
        let numel: usize = in_shape.iter().product();
        let scale = if mean {
            F::one() / F::from_usize(numel.max(1)).unwrap()
        } else {
            F::one()
        };
        self.push_op(
            op,
            value,
            &[x],
            Box::new(move |g, _, _, _| vec![Some(Tensor::full(in_shape.clone(), g.item() * scale))]),
        )
    }
}
