//! Define-by-run reverse-mode tape.
//!
//! A [`Graph`] borrows the [`ParamStore`] for its lifetime: parameter nodes
//! read their values straight from the store, batch-norm updates running
//! moments in place, and [`Graph::backward`] accumulates into the stored
//! gradient buffers. Every node output is checked for NaN/Inf on creation.

use super::kernels::{col2im, gemm, im2col, ConvGeom, Padding};
use super::{AutodiffError, ParamId, ParamStore, Result, Tensor};
use crate::fft::Fft2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

/// The layer vocabulary the networks are written against. Implemented by
/// [`Graph`] (real execution) and [`super::ShapeTracer`] (shapes only).
pub trait Ops {
    fn mode(&self) -> Mode;
    fn shape(&self, v: Var) -> &[usize];
    fn input(&mut self, t: Tensor) -> Var;
    fn param(&mut self, id: ParamId) -> Var;
    /// NHWC cross-correlation with an HWIO kernel.
    fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var>;
    /// Transpose of `conv2d(_, w, stride, Same)`; kernel is `k x k x C_out x C_in`.
    fn deconv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var>;
    fn add_bias(&mut self, x: Var, b: Var) -> Result<Var>;
    fn batch_norm(&mut self, x: Var, bn: &BatchNormParams) -> Result<Var>;
    fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var>;
    fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, 0.0)
    }
    fn sigmoid(&mut self, x: Var) -> Result<Var>;
    /// Softmax over the last axis.
    fn softmax(&mut self, x: Var) -> Result<Var>;
    fn dropout(&mut self, x: Var, rate: f64) -> Result<Var>;
    /// Concatenation along the last (channel) axis.
    fn concat(&mut self, xs: &[Var]) -> Result<Var>;
    /// `[N, F] x [F, F'] -> [N, F']`.
    fn matmul(&mut self, x: Var, w: Var) -> Result<Var>;
    fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var>;
    /// `[N, H, W, C] -> [N*g*g, H/g, W/g, C]`, tiles ordered row-major per sample.
    fn space_to_batch(&mut self, x: Var, grid: usize) -> Result<Var>;
    /// `[N, K] -> [N]`.
    fn mean_last_axis(&mut self, x: Var) -> Result<Var>;
    /// Column `index` of a `[N, C]` tensor, as `[N]`.
    fn select_last(&mut self, x: Var, index: usize) -> Result<Var>;
}

// ---- shape rules shared with the tracer ----

fn shape_err(msg: String) -> AutodiffError {
    AutodiffError::Shape(msg)
}

pub(crate) fn conv2d_shape(
    xs: &[usize],
    ws: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<(ConvGeom, Vec<usize>)> {
    if xs.len() != 4 || ws.len() != 4 || ws[0] != ws[1] {
        return Err(shape_err(format!(
            "conv2d expects NHWC input and kxkxCinxCout kernel, got {xs:?} and {ws:?}"
        )));
    }
    if xs[3] != ws[2] {
        return Err(shape_err(format!(
            "conv2d channel mismatch: input has {} channels, kernel expects {}",
            xs[3], ws[2]
        )));
    }
    let g = ConvGeom::new(
        xs[0],
        xs[1],
        xs[2],
        xs[3],
        ws[0],
        stride,
        padding.amount(ws[0]),
    )?;
    Ok((g, vec![xs[0], g.out_h, g.out_w, ws[3]]))
}

pub(crate) fn deconv2d_shape(
    xs: &[usize],
    ws: &[usize],
    stride: usize,
) -> Result<(ConvGeom, Vec<usize>)> {
    if xs.len() != 4 || ws.len() != 4 || ws[0] != ws[1] {
        return Err(shape_err(format!(
            "deconv2d expects NHWC input and kxkxCoutxCin kernel, got {xs:?} and {ws:?}"
        )));
    }
    if xs[3] != ws[3] {
        return Err(shape_err(format!(
            "deconv2d channel mismatch: input has {} channels, kernel expects {}",
            xs[3], ws[3]
        )));
    }
    let k = ws[0];
    let (oh, ow) = (xs[1] * stride, xs[2] * stride);
    let g = ConvGeom::new(xs[0], oh, ow, ws[2], k, stride, Padding::Same.amount(k))?;
    if g.out_h != xs[1] || g.out_w != xs[2] {
        return Err(shape_err(format!(
            "deconv2d with kernel {k} and stride {stride} cannot invert to {oh}x{ow}"
        )));
    }
    Ok((g, vec![xs[0], oh, ow, ws[2]]))
}

pub(crate) fn channel_shape(xs: &[usize], ps: &[usize], what: &str) -> Result<()> {
    match xs.last() {
        Some(&c) if ps == [c] => Ok(()),
        _ => Err(shape_err(format!(
            "{what}: parameter {ps:?} does not match input {xs:?}"
        ))),
    }
}

pub(crate) fn concat_shape(shapes: &[&[usize]]) -> Result<Vec<usize>> {
    let first = shapes
        .first()
        .ok_or_else(|| shape_err("concat of zero tensors".into()))?;
    let lead = &first[..first.len() - 1];
    let mut c = 0;
    for s in shapes {
        if s.len() != first.len() || &s[..s.len() - 1] != lead {
            return Err(shape_err(format!(
                "concat spatial mismatch: {first:?} vs {s:?}"
            )));
        }
        c += s[s.len() - 1];
    }
    let mut out = lead.to_vec();
    out.push(c);
    Ok(out)
}

pub(crate) fn matmul_shape(xs: &[usize], ws: &[usize]) -> Result<Vec<usize>> {
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(shape_err(format!("matmul of {xs:?} and {ws:?}")));
    }
    Ok(vec![xs[0], ws[1]])
}

pub(crate) fn reshape_shape(xs: &[usize], shape: &[usize]) -> Result<Vec<usize>> {
    if xs.iter().product::<usize>() != shape.iter().product::<usize>() {
        return Err(shape_err(format!("cannot reshape {xs:?} into {shape:?}")));
    }
    Ok(shape.to_vec())
}

pub(crate) fn space_to_batch_shape(xs: &[usize], grid: usize) -> Result<Vec<usize>> {
    if xs.len() != 4 || grid == 0 || !xs[1].is_multiple_of(grid) || !xs[2].is_multiple_of(grid) {
        return Err(shape_err(format!(
            "{xs:?} is not divisible into a {grid}x{grid} grid"
        )));
    }
    Ok(vec![xs[0] * grid * grid, xs[1] / grid, xs[2] / grid, xs[3]])
}

// ---- tape ----

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Deconv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Concat {
        xs: Vec<Var>,
    },
    MatMul {
        x: Var,
        w: Var,
    },
    Reshape {
        x: Var,
    },
    SpaceToBatch {
        x: Var,
        grid: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Abs {
        x: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    LogClamp {
        x: Var,
        floor: f64,
    },
    Mean {
        x: Var,
    },
    Sum {
        x: Var,
    },
    SumAbs {
        x: Var,
    },
    MeanLastAxis {
        x: Var,
    },
    SelectLast {
        x: Var,
        index: usize,
    },
    Fft2Mag {
        x: Var,
        spectrum: Vec<Complex64>,
        h: usize,
        w: usize,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Gradients returned by [`Graph::backward`] for leaf variables.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<'s> {
    store: &'s mut ParamStore,
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s mut ParamStore, mode: Mode) -> Self {
        Self::with_seed(store, mode, 0)
    }

    /// `seed` drives dropout masks.
    pub fn with_seed(store: &'s mut ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    /// Leaf that receives a gradient (for checks against finite differences).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Op,
        name: &'static str,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect())?;
        let rg = self.rg(x);
        self.push(out, op, name, rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, name, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// Elementwise `|x|`; the derivative at 0 is taken as 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "abs", f64::abs, Op::Abs { x })
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(x, "affine", |v| scale * v + shift, Op::Affine { x, scale })
    }

    /// `ln(max(x, floor))`; no gradient flows through clamped entries.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary(x, "log", |v| v.max(floor).ln(), Op::LogClamp { x, floor })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, "mean", rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum", rg)
    }

    /// `sum |x|` as one node.
    pub fn sum_abs(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v.abs()).sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAbs { x }, "sum_abs", rg)
    }

    /// `[N, K] -> [N]`.
    pub fn mean_last_axis(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let k = *xv.shape().last().unwrap_or(&1);
        let rows = xv.len() / k.max(1);
        let data: Vec<f64> = xv
            .data()
            .chunks(k)
            .map(|r| r.iter().sum::<f64>() / k as f64)
            .collect();
        let out = Tensor::new(&[rows], data)?;
        let rg = self.rg(x);
        self.push(out, Op::MeanLastAxis { x }, "mean_last_axis", rg)
    }

    /// Column `index` of a `[N, C]` tensor, as `[N]`.
    pub fn select_last(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap_or(&0);
        if index >= c {
            return Err(shape_err(format!(
                "select index {index} out of {c} columns"
            )));
        }
        let data: Vec<f64> = xv.data().chunks(c).map(|r| r[index]).collect();
        let out = Tensor::new(&[data.len()], data)?;
        let rg = self.rg(x);
        self.push(out, Op::SelectLast { x, index }, "select_last", rg)
    }

    /// Unitary 2D FFT magnitude per image; accepts `[H, W]` or `[N, H, W, 1]`.
    pub fn fft2_mag(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        let (n, h, w) = match s {
            [h, w] => (1, *h, *w),
            [n, h, w, 1] => (*n, *h, *w),
            _ => {
                return Err(shape_err(format!(
                    "fft2_mag expects [H,W] or [N,H,W,1], got {s:?}"
                )))
            }
        };
        let plan = Fft2::new(h, w);
        let mut spectrum: Vec<Complex64> =
            xv.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
        for img in spectrum.chunks_exact_mut(h * w) {
            plan.forward(img);
        }
        debug_assert_eq!(spectrum.len(), n * h * w);
        let out = Tensor::new(s, spectrum.iter().map(|c| c.norm()).collect())?;
        let rg = self.rg(x);
        self.push(out, Op::Fft2Mag { x, spectrum, h, w }, "fft2_mag", rg)
    }

    /// `sum_i c_i * x_i` over equally shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| shape_err("weighted_sum of zero terms".into()))?
            .0;
        let mut acc = Tensor::zeros(self.shape(first));
        for &(v, c) in terms {
            self.same_shape(first, v, "weighted_sum")?;
            for (a, b) in acc.data_mut().iter_mut().zip(self.value(v).data()) {
                *a += c * b;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(
            acc,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            "weighted_sum",
            rg,
        )
    }

    /// Reverse sweep from a one-element `loss`. Parameter gradients are added
    /// into the store; leaf-variable gradients are returned.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut param_grads: Vec<(ParamId, Vec<f64>)> = Vec::new();

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFinite { op: "backward" });
            }
            match &self.nodes[i].op {
                Op::Leaf => {
                    out[i] = Some(Tensor::new(self.shape(Var(i)), g)?);
                }
                Op::Param(id) => {
                    param_grads.push((*id, g.clone()));
                    out[i] = Some(Tensor::new(self.shape(Var(i)), g)?);
                }
                op => {
                    for (parent, contrib) in self.node_backward(Var(i), op, &g)? {
                        accumulate(&mut grads[parent.0], contrib);
                    }
                }
            }
        }
        for (id, g) in param_grads {
            let p = self.store.get_mut(id);
            for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok(Grads { grads: out })
    }

    fn node_backward(&self, me: Var, op: &Op, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let mut res = Vec::new();
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, co) = (geom.rows(), geom.cols(), wv.shape()[3]);
                let unfolded;
                let cols: &[f64] = if geom.is_pointwise() {
                    xv.data()
                } else {
                    unfolded = im2col(xv.data(), geom);
                    &unfolded
                };
                if self.rg(*w) {
                    let mut dw = vec![0.0; k * co];
                    gemm(k, m, co, cols, true, g, false, &mut dw, 0.0);
                    res.push((*w, dw));
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; m * k];
                    gemm(m, co, k, g, false, wv.data(), true, &mut dcols, 0.0);
                    let dx = if geom.is_pointwise() {
                        dcols
                    } else {
                        col2im(&dcols, geom)
                    };
                    res.push((*x, dx));
                }
            }
            Op::Deconv2d { x, w, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, cs) = (geom.rows(), geom.cols(), wv.shape()[3]);
                let cols = im2col(g, geom);
                if self.rg(*x) {
                    let mut dx = vec![0.0; m * cs];
                    gemm(m, k, cs, &cols, false, wv.data(), false, &mut dx, 0.0);
                    res.push((*x, dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; k * cs];
                    gemm(k, m, cs, &cols, true, xv.data(), false, &mut dw, 0.0);
                    res.push((*w, dw));
                }
            }
            Op::AddBias { x, b } => {
                if self.rg(*b) {
                    let c = self.value(*b).len();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    res.push((*b, db));
                }
                if self.rg(*x) {
                    res.push((*x, g.to_vec()));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let m = (g.len() / c) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_g[j] += gr[j];
                        sum_gx[j] += gr[j] * xr[j];
                    }
                }
                if self.rg(*gamma) {
                    res.push((*gamma, sum_gx.clone()));
                }
                if self.rg(*beta) {
                    res.push((*beta, sum_g.clone()));
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![0.0; g.len()];
                    for ((dr, gr), xr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dr[j] = if *train {
                                gam[j] * inv_std[j] / m * (m * gr[j] - sum_g[j] - xr[j] * sum_gx[j])
                            } else {
                                gam[j] * inv_std[j] * gr[j]
                            };
                        }
                    }
                    res.push((*x, dx));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { gi * slope })
                    .collect();
                res.push((*x, dx));
            }
            Op::Sigmoid { x } => {
                let y = self.value(me).data();
                res.push((
                    *x,
                    g.iter()
                        .zip(y)
                        .map(|(gi, yi)| gi * yi * (1.0 - yi))
                        .collect(),
                ));
            }
            Op::Softmax { x } => {
                let y = self.value(me);
                let c = *y.shape().last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                res.push((*x, dx));
            }
            Op::Dropout { x, mask } => {
                res.push((*x, g.iter().zip(mask).map(|(a, b)| a * b).collect()));
            }
            Op::Concat { xs } => {
                let total = *self.shape(me).last().unwrap();
                let mut start = 0;
                for v in xs {
                    let c = *self.shape(*v).last().unwrap();
                    if self.rg(*v) {
                        let mut part = Vec::with_capacity(g.len() / total * c);
                        for row in g.chunks(total) {
                            part.extend_from_slice(&row[start..start + c]);
                        }
                        res.push((*v, part));
                    }
                    start += c;
                }
            }
            Op::MatMul { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, f, fo) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * f];
                    gemm(n, fo, f, g, false, wv.data(), true, &mut dx, 0.0);
                    res.push((*x, dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; f * fo];
                    gemm(f, n, fo, xv.data(), true, g, false, &mut dw, 0.0);
                    res.push((*w, dw));
                }
            }
            Op::Reshape { x } => res.push((*x, g.to_vec())),
            Op::SpaceToBatch { x, grid } => {
                let xs = self.shape(*x).to_vec();
                res.push((*x, batch_to_space(g, &xs, *grid)));
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    res.push((*a, g.to_vec()));
                }
                if self.rg(*b) {
                    res.push((*b, g.to_vec()));
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    res.push((*a, g.to_vec()));
                }
                if self.rg(*b) {
                    res.push((*b, g.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    res.push((*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                }
                if self.rg(*b) {
                    res.push((*b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Abs { x } | Op::SumAbs { x } => {
                let xv = self.value(*x).data();
                let scalar = matches!(op, Op::SumAbs { .. });
                let dx = xv
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let gi = if scalar { g[0] } else { g[i] };
                        if v > 0.0 {
                            gi
                        } else if v < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    })
                    .collect();
                res.push((*x, dx));
            }
            Op::Affine { x, scale } => res.push((*x, g.iter().map(|v| v * scale).collect())),
            Op::LogClamp { x, floor } => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, &v)| if v > *floor { gi / v } else { 0.0 })
                    .collect();
                res.push((*x, dx));
            }
            Op::Mean { x } => {
                let len = self.value(*x).len();
                res.push((*x, vec![g[0] / len as f64; len]));
            }
            Op::Sum { x } => {
                let len = self.value(*x).len();
                res.push((*x, vec![g[0]; len]));
            }
            Op::MeanLastAxis { x } => {
                let xs = self.shape(*x);
                let k = *xs.last().unwrap();
                let mut dx = Vec::with_capacity(g.len() * k);
                for gi in g {
                    dx.extend(std::iter::repeat_n(gi / k as f64, k));
                }
                res.push((*x, dx));
            }
            Op::SelectLast { x, index } => {
                let c = *self.shape(*x).last().unwrap();
                let mut dx = vec![0.0; g.len() * c];
                for (r, gi) in g.iter().enumerate() {
                    dx[r * c + index] = *gi;
                }
                res.push((*x, dx));
            }
            Op::Fft2Mag { x, spectrum, h, w } => {
                let plan = Fft2::new(*h, *w);
                let mut buf: Vec<Complex64> = spectrum
                    .iter()
                    .zip(g)
                    .map(|(s, gi)| {
                        let mag = s.norm();
                        if mag > 1e-300 {
                            s * (gi / mag)
                        } else {
                            Complex64::new(0.0, 0.0)
                        }
                    })
                    .collect();
                for img in buf.chunks_exact_mut(h * w) {
                    plan.inverse(img);
                }
                res.push((*x, buf.iter().map(|c| c.re).collect()));
            }
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    if self.rg(v) {
                        res.push((v, g.iter().map(|gi| gi * c).collect()));
                    }
                }
            }
        }
        Ok(res)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn space_to_batch(x: &[f64], xs: &[usize], grid: usize) -> Vec<f64> {
    let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let (th, tw) = (h / grid, w / grid);
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for gy in 0..grid {
            for gx in 0..grid {
                for y in 0..th {
                    let row = ((b * h + gy * th + y) * w + gx * tw) * c;
                    out.extend_from_slice(&x[row..row + tw * c]);
                }
            }
        }
    }
    out
}

fn batch_to_space(g: &[f64], xs: &[usize], grid: usize) -> Vec<f64> {
    let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let (th, tw) = (h / grid, w / grid);
    let mut out = vec![0.0; g.len()];
    let mut src = 0;
    for b in 0..n {
        for gy in 0..grid {
            for gx in 0..grid {
                for y in 0..th {
                    let row = ((b * h + gy * th + y) * w + gx * tw) * c;
                    out[row..row + tw * c].copy_from_slice(&g[src..src + tw * c]);
                    src += tw * c;
                }
            }
        }
    }
    out
}

impl Ops for Graph<'_> {
    fn mode(&self) -> Mode {
        self.mode
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn param(&mut self, id: ParamId) -> Var {
        let rg = self.store.get(id).kind.trainable();
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (geom, shape) = conv2d_shape(self.shape(x), self.shape(w), stride, padding)?;
        let (xv, wv) = (self.value(x), self.value(w));
        let (m, k, co) = (geom.rows(), geom.cols(), shape[3]);
        let mut out = vec![0.0; m * co];
        if geom.is_pointwise() {
            gemm(m, k, co, xv.data(), false, wv.data(), false, &mut out, 0.0);
        } else {
            let cols = im2col(xv.data(), &geom);
            gemm(m, k, co, &cols, false, wv.data(), false, &mut out, 0.0);
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Conv2d { x, w, geom },
            "conv2d",
            rg,
        )
    }

    fn deconv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (geom, shape) = deconv2d_shape(self.shape(x), self.shape(w), stride)?;
        let (xv, wv) = (self.value(x), self.value(w));
        let (m, k, cs) = (geom.rows(), geom.cols(), xv.shape()[3]);
        let mut dcols = vec![0.0; m * k];
        gemm(m, cs, k, xv.data(), false, wv.data(), true, &mut dcols, 0.0);
        let out = col2im(&dcols, &geom);
        let rg = self.rg(x) || self.rg(w);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Deconv2d { x, w, geom },
            "deconv2d",
            rg,
        )
    }

    fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        channel_shape(self.shape(x), self.shape(b), "add_bias")?;
        let (xv, bv) = (self.value(x), self.value(b));
        let c = bv.len();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, bi) in row.iter_mut().zip(bv.data()) {
                *o += bi;
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddBias { x, b }, "add_bias", rg)
    }

    fn batch_norm(&mut self, x: Var, bn: &BatchNormParams) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        channel_shape(&xs, self.store.value(bn.gamma).shape(), "batch_norm")?;
        let c = *xs.last().unwrap();
        let train = self.mode == Mode::Train;
        let xv = self.value(x).data();
        let m = xv.len() / c;
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            for row in xv.chunks(c) {
                for j in 0..c {
                    mean[j] += row[j];
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            let mut var = vec![0.0; c];
            for row in xv.chunks(c) {
                for j in 0..c {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            (mean, var)
        } else {
            (
                self.store.value(bn.running_mean).data().to_vec(),
                self.store.value(bn.running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        for (hr, xr) in xhat.chunks_mut(c).zip(xv.chunks(c)) {
            for j in 0..c {
                hr[j] = (xr[j] - mean[j]) * inv_std[j];
            }
        }
        let gamma = self.store.value(bn.gamma).data();
        let beta = self.store.value(bn.beta).data();
        let mut out = vec![0.0; xv.len()];
        for (or, hr) in out.chunks_mut(c).zip(xhat.chunks(c)) {
            for j in 0..c {
                or[j] = gamma[j] * hr[j] + beta[j];
            }
        }
        if train {
            let unbias = if m > 1 {
                m as f64 / (m as f64 - 1.0)
            } else {
                1.0
            };
            let mo = bn.momentum;
            let rm = self.store.get_mut(bn.running_mean).value.data_mut();
            for (r, v) in rm.iter_mut().zip(&mean) {
                *r = mo * *r + (1.0 - mo) * v;
            }
            let rv = self.store.get_mut(bn.running_var).value.data_mut();
            for (r, v) in rv.iter_mut().zip(&var) {
                *r = mo * *r + (1.0 - mo) * v * unbias;
            }
        }
        let gamma_v = self.param(bn.gamma);
        let beta_v = self.param(bn.beta);
        let rg = self.rg(x) || self.rg(gamma_v) || self.rg(beta_v);
        let op = Op::BatchNorm {
            x,
            gamma: gamma_v,
            beta: beta_v,
            xhat,
            inv_std,
            train,
        };
        self.push(Tensor::new(&xs, out)?, op, "batch_norm", rg)
    }

    fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(
            x,
            "leaky_relu",
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu { x, slope },
        )
    }

    fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            "sigmoid",
            |v| 1.0 / (1.0 + (-v).exp()),
            Op::Sigmoid { x },
        )
    }

    fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv
            .shape()
            .last()
            .ok_or_else(|| shape_err("softmax of a scalar".into()))?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x }, "softmax", rg)
    }

    fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let len = self.value(x).len();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..len)
            .map(|_| {
                if self.rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape(),
            xv.data().iter().zip(&mask).map(|(a, b)| a * b).collect(),
        )?;
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, "dropout", rg)
    }

    fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let shapes: Vec<&[usize]> = xs.iter().map(|v| self.shape(*v)).collect();
        let shape = concat_shape(&shapes)?;
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let widths: Vec<usize> = shapes.iter().map(|s| *s.last().unwrap()).collect();
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let mut out = Vec::with_capacity(rows * shape[shape.len() - 1]);
        for r in 0..rows {
            for (v, &c) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*v).data()[r * c..(r + 1) * c]);
            }
        }
        let rg = xs.iter().any(|v| self.rg(*v));
        self.push(
            Tensor::new(&shape, out)?,
            Op::Concat { xs: xs.to_vec() },
            "concat",
            rg,
        )
    }

    fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let shape = matmul_shape(self.shape(x), self.shape(w))?;
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, f, fo) = (shape[0], xv.shape()[1], shape[1]);
        let mut out = vec![0.0; n * fo];
        gemm(n, f, fo, xv.data(), false, wv.data(), false, &mut out, 0.0);
        let rg = self.rg(x) || self.rg(w);
        self.push(Tensor::new(&shape, out)?, Op::MatMul { x, w }, "matmul", rg)
    }

    fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let shape = reshape_shape(self.shape(x), shape)?;
        let out = Tensor::new(&shape, self.value(x).data().to_vec())?;
        let rg = self.rg(x);
        self.push(out, Op::Reshape { x }, "reshape", rg)
    }

    fn space_to_batch(&mut self, x: Var, grid: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let shape = space_to_batch_shape(&xs, grid)?;
        if grid == 1 {
            return Ok(x);
        }
        let out = space_to_batch(self.value(x).data(), &xs, grid);
        let rg = self.rg(x);
        self.push(
            Tensor::new(&shape, out)?,
            Op::SpaceToBatch { x, grid },
            "space_to_batch",
            rg,
        )
    }

    fn mean_last_axis(&mut self, x: Var) -> Result<Var> {
        Graph::mean_last_axis(self, x)
    }

    fn select_last(&mut self, x: Var, index: usize) -> Result<Var> {
        Graph::select_last(self, x, index)
    }
}
