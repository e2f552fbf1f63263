//! Broadcasting arithmetic and pointwise nonlinearities.

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{LayaError, Result};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// True when `shape` equals a trailing slice of `out` (after dropping
/// leading unit axes), so the operand repeats with period numel.
fn is_suffix(shape: &[usize], out: &[usize]) -> bool {
    let trimmed: &[usize] = {
        let first = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
        &shape[first..]
    };
    trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_index(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..nd).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary_map<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    out_shape: &[usize],
    f: impl Fn(F, F) -> F,
) -> Tensor<F> {
    let total: usize = out_shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(total);
    if a.shape() == out_shape && b.shape() == out_shape {
        data.extend(ad.iter().zip(bd).map(|(&x, &y)| f(x, y)));
    } else if a.shape() == out_shape && is_suffix(b.shape(), out_shape) {
        let n = bd.len();
        data.extend(ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % n])));
    } else if b.shape() == out_shape && is_suffix(a.shape(), out_shape) {
        let n = ad.len();
        data.extend(bd.iter().enumerate().map(|(i, &y)| f(ad[i % n], y)));
    } else {
        let sa = broadcast_strides(a.shape(), out_shape);
        let sb = broadcast_strides(b.shape(), out_shape);
        data.resize(total, F::zero());
        for_each_index(out_shape, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    }
    Tensor::from_vec(out_shape.to_vec(), data).expect("broadcast shape")
}

/// Sums `grad` down to `shape`, undoing broadcasting.
pub(crate) fn reduce_to<F: Real>(grad: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape.to_vec());
    let od = out.data_mut();
    let gd = grad.data();
    if is_suffix(shape, grad.shape()) {
        let n = od.len();
        for (i, &g) in gd.iter().enumerate() {
            od[i % n] += g;
        }
    } else {
        let so = broadcast_strides(shape, grad.shape());
        let zeros = vec![0; grad.ndim()];
        for_each_index(grad.shape(), &so, &zeros, |o, it, _| od[it] += gd[o]);
    }
    out
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<F: Real> Graph<F> {
    fn binary(&self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
                LayaError::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape()))
            })?;
            match op {
                BinOp::Add => binary_map(&ta, &tb, &out_shape, |x, y| x + y),
                BinOp::Sub => binary_map(&ta, &tb, &out_shape, |x, y| x - y),
                BinOp::Mul => binary_map(&ta, &tb, &out_shape, |x, y| x * y),
                BinOp::Div => binary_map(&ta, &tb, &out_shape, |x, y| x / y),
            }
        };
        self.push_op(
            name,
            value,
            &[a, b],
            Box::new(move |g, inputs, out, needs| {
                let (ta, tb) = (inputs[0], inputs[1]);
                let shape = g.shape();
                let ga = needs[0].then(|| match op {
                    BinOp::Add | BinOp::Sub => reduce_to(g, ta.shape()),
                    BinOp::Mul => reduce_to(&binary_map(g, tb, shape, |x, y| x * y), ta.shape()),
                    BinOp::Div => reduce_to(&binary_map(g, tb, shape, |x, y| x / y), ta.shape()),
                });
                let gb = needs[1].then(|| match op {
                    BinOp::Add => reduce_to(g, tb.shape()),
                    BinOp::Sub => reduce_to(&g.map(|x| -x), tb.shape()),
                    BinOp::Mul => reduce_to(&binary_map(g, ta, shape, |x, y| x * y), tb.shape()),
                    BinOp::Div => {
                        // d(a/b)/db = -out / b
                        let q = binary_map(out, tb, shape, |o, y| -o / y);
                        reduce_to(&binary_map(g, &q, shape, |x, y| x * y), tb.shape())
                    }
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    /// `x * c` for a constant scalar.
    pub fn scale(&self, x: Var, c: F) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push_op(
            "scale",
            value,
            &[x],
            Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * c))]),
        )
    }

    /// `x + c` for a constant scalar.
    pub fn add_scalar(&self, x: Var, c: F) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push_op(
            "add_scalar",
            value,
            &[x],
            Box::new(|g, _, _, _| vec![Some(g.clone())]),
        )
    }

    /// Pointwise op with derivative expressed through input and output.
    fn unary(
        &self,
        op: &'static str,
        x: Var,
        f: impl Fn(F) -> F,
        df: impl Fn(F, F) -> F + 'static,
    ) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push_op(
            op,
            value,
            &[x],
            Box::new(move |g, inputs, out, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(inputs[0].data())
                    .zip(out.data())
                    .map(|((&gv, &xv), &yv)| gv * df(xv, yv))
                    .collect();
                vec![Some(Tensor::from_vec(g.shape().to_vec(), data).unwrap())]
            }),
        )
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.scale(x, -F::one())
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), |_, y| y)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.ln(), |x, _| F::one() / x)
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        let half = F::from_f64_lossy(0.5);
        self.unary("sqrt", x, |v| v.sqrt(), move |_, y| half / y)
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        let two = F::from_f64_lossy(2.0);
        self.unary("square", x, |v| v * v, move |x, _| two * x)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), |_, y| F::one() - y * y)
    }

    pub fn sin(&self, x: Var) -> Result<Var> {
        self.unary("sin", x, |v| v.sin(), |x, _| x.cos())
    }

    pub fn cos(&self, x: Var) -> Result<Var> {
        self.unary("cos", x, |v| v.cos(), |x, _| -x.sin())
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu_value, |x, _| gelu_derivative(x))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu_value<F: Real>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_derivative<F: Real>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}
