//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients into
//! bound parameters (and into graph-local leaves created with
//! [`Graph::input`]). Gradients are always added, never overwritten.

use std::collections::HashMap;

use crate::element::{gemm, Element, MatRef};
use crate::error::{NumError, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Sine,
}

impl Activation {
    /// Leaky ReLU with negative slope 0.2.
    pub const LEAKY: Activation = Activation::LeakyRelu(0.2);

    fn has_kink(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu(_))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param { id: ParamId, offset: usize },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    SinLift(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    Conv {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape over elements of type `T`.
#[derive(Debug, Clone, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: HashMap<usize, Vec<T>>,
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::from_vec(&n.shape, n.value.clone()).expect("node shapes are valid")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A graph-local leaf. Its gradient is available through [`Graph::grad`].
    pub fn input(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Binds a whole parameter tensor.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        let t = params.get(id);
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param { id, offset: 0 },
            t.requires_grad(),
        )
    }

    /// Binds entry `index` along the first axis of a parameter. A 2-D table
    /// yields a `[1, cols]` row.
    pub fn param_slice(&mut self, params: &ParamSet<T>, id: ParamId, index: usize) -> Result<Var> {
        let t = params.get(id);
        let shape = t.shape();
        if shape.len() < 2 {
            return Err(NumError::dim("param_slice", "parameter must have rank >= 2"));
        }
        if index >= shape[0] {
            return Err(NumError::dim(
                "param_slice",
                format!("index {index} out of range for {} entries", shape[0]),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let offset = index * inner;
        let sub_shape = if shape.len() == 2 {
            vec![1, inner]
        } else {
            shape[1..].to_vec()
        };
        Ok(self.push(
            sub_shape,
            t.data()[offset..offset + inner].to_vec(),
            Op::Param { id, offset },
            t.requires_grad(),
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.shape(a))
            .ok_or_else(|| NumError::dim("matmul", "lhs must be rank 1 or 2"))?;
        let (k2, n) = as_matrix(self.shape(b))
            .ok_or_else(|| NumError::dim("matmul", "rhs must be rank 1 or 2"))?;
        if k != k2 {
            return Err(NumError::dim(
                "matmul",
                format!("{m}x{k} times {k2}x{n}: inner dimensions differ"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(self.value(a), m, k),
            MatRef::new(self.value(b), k, n),
            T::zero(),
            &mut out,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-`n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = as_matrix(self.shape(a))
            .ok_or_else(|| NumError::dim("add_row", "lhs must be rank 1 or 2"))?;
        if self.value(row).len() != n {
            return Err(NumError::dim(
                "add_row",
                format!("row of length {} for {n} columns", self.value(row).len()),
            ));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks_exact(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cc = T::of(c);
        let out = self.value(a).iter().map(|&x| x * cc).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    pub fn activate(&mut self, a: Var, kind: Activation) -> Var {
        let x = self.value(a);
        let out: Vec<T> = match kind {
            Activation::Relu => x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
            Activation::LeakyRelu(s) => {
                let s = T::of(s);
                x.iter().map(|&v| if v > T::zero() { v } else { v * s }).collect()
            }
            Activation::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Activation::Sine => x.iter().map(|&v| v.sin()).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Act(a, kind), rg)
    }

    /// Sinusoidal lifting of an `m x d` matrix: each column `x` becomes the
    /// block `[x, sin(f1 x), cos(f1 x), ..., sin(fF x), cos(fF x)]`.
    pub fn sinusoid_lift(&mut self, a: Var, freqs: &[f64]) -> Result<Var> {
        let (m, d) = as_matrix(self.shape(a))
            .ok_or_else(|| NumError::dim("sinusoid_lift", "input must be rank 1 or 2"))?;
        let block = 1 + 2 * freqs.len();
        let mut out = Vec::with_capacity(m * d * block);
        for &v in self.value(a) {
            let x = v.as_f64();
            out.push(v);
            for &f in freqs {
                let (s, c) = (f * x).sin_cos();
                out.push(T::of(s));
                out.push(T::of(c));
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, d * block], out, Op::SinLift(a, freqs.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumError::contract("concat_cols", "no inputs"));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(
                as_matrix(self.shape(p))
                    .ok_or_else(|| NumError::dim("concat_cols", "inputs must be rank 1 or 2"))?,
            );
        }
        let m = dims[0].0;
        if dims.iter().any(|&(r, _)| r != m) {
            return Err(NumError::dim("concat_cols", format!("row counts differ: {dims:?}")));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &(_, n)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p)[i * n..(i + 1) * n]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumError::contract("concat_rows", "no inputs"));
        }
        let mut rows = 0;
        let mut n = None;
        for &p in parts {
            let (r, c) = as_matrix(self.shape(p))
                .ok_or_else(|| NumError::dim("concat_rows", "inputs must be rank 1 or 2"))?;
            if *n.get_or_insert(c) != c {
                return Err(NumError::dim("concat_rows", "column counts differ"));
            }
            rows += r;
        }
        let n = n.unwrap_or(0);
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = as_matrix(self.shape(a))
            .ok_or_else(|| NumError::dim("transpose", "input must be rank 1 or 2"))?;
        let out = transpose_vec(self.value(a), m, n);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(NumError::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    /// Square-kernel convolution of a `C_in x H x W` image.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_ext(x, kernel, bias, (stride, stride), (pad, pad))
    }

    /// Convolution with per-axis stride and padding; a `k x 1` kernel gives a
    /// 1-D convolution along the height axis.
    pub fn conv2d_ext(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let xs: [usize; 3] = self
            .shape(x)
            .try_into()
            .map_err(|_| NumError::dim("conv2d", "input must be C x H x W"))?;
        let ks: [usize; 4] = self
            .shape(kernel)
            .try_into()
            .map_err(|_| NumError::dim("conv2d", "kernel must be C_out x C_in x kh x kw"))?;
        let geom = ConvGeom::new(xs, ks, stride, pad)?;
        if let Some(b) = bias {
            if self.value(b).len() != geom.c_out {
                return Err(NumError::dim("conv2d", "bias length must equal output channels"));
            }
        }
        let mut out = vec![T::zero(); geom.c_out * geom.oh * geom.ow];
        kernels::conv2d_forward(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            &geom,
            &mut out,
        );
        let mut deps = vec![x, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            vec![geom.c_out, geom.oh, geom.ow],
            out,
            Op::Conv {
                x,
                k: kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [c, h, w]: [usize; 3] = self
            .shape(x)
            .try_into()
            .map_err(|_| NumError::dim("upsample2x", "input must be C x H x W"))?;
        let out = kernels::upsample2x(self.value(x), c, h, w);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![c, 2 * h, 2 * w], out, Op::Upsample(x), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = as_matrix(self.shape(a))
            .ok_or_else(|| NumError::dim("softmax_rows", "input must be rank 1 or 2"))?;
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks_exact(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut sum = T::zero();
            for &v in row {
                let e = (v - max).exp();
                sum = sum + e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / sum);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::SoftmaxRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len() as f64);
        let s = self.value(a).iter().copied().sum::<T>() / n;
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(NumError::dim(
                "mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let n = T::of(self.value(a).len() as f64);
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![1], vec![s], Op::Mse(a, b), rg))
    }

    /// Gradient accumulated into a graph-local leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    /// Fingerprint of the sign pattern at every ReLU-family input.
    ///
    /// Two evaluations with equal signatures lie in the same linear region of
    /// every kinked activation.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Act(a, kind) = node.op {
                if kind.has_kink() {
                    for &v in self.value(a) {
                        h ^= u64::from(v > T::zero());
                        h = h.wrapping_mul(0x0100_0000_01b3);
                    }
                }
            }
        }
        h
    }

    /// Back-propagates from a scalar and accumulates into parameter gradient
    /// buffers and graph-local leaves.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet<T>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(NumError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    let buf = self
                        .leaf_grads
                        .entry(i)
                        .or_insert_with(|| vec![T::zero(); gy.len()]);
                    add_into(buf, &gy);
                }
                Op::Param { id, offset } => {
                    params.get_mut(*id).accumulate_grad(*offset, &gy);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = as_matrix(self.shape(*a)).expect("validated");
                    let n = self.shape(*b).last().copied().expect("validated");
                    if let Some(da) = slot(&mut grads, &self.nodes, *a) {
                        gemm(
                            MatRef::new(&gy, m, n),
                            MatRef::new(self.value(*b), k, n).t(),
                            T::one(),
                            da,
                            k,
                        );
                    }
                    if let Some(db) = slot(&mut grads, &self.nodes, *b) {
                        gemm(
                            MatRef::new(self.value(*a), m, k).t(),
                            MatRef::new(&gy, m, n),
                            T::one(),
                            db,
                            n,
                        );
                    }
                }
                Op::Add(a, b) => {
                    if let Some(da) = slot(&mut grads, &self.nodes, *a) {
                        add_into(da, &gy);
                    }
                    if let Some(db) = slot(&mut grads, &self.nodes, *b) {
                        add_into(db, &gy);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(da) = slot(&mut grads, &self.nodes, *a) {
                        add_into(da, &gy);
                    }
                    if let Some(db) = slot(&mut grads, &self.nodes, *b) {
                        db.iter_mut().zip(&gy).for_each(|(d, &g)| *d = *d - g);
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(da) = slot(&mut grads, &self.nodes, *a) {
                        let bv = &self.nodes[b.0].value;
                        da.iter_mut()
                            .zip(gy.iter().zip(bv))
                            .for_each(|(d, (&g, &y))| *d = *d + g * y);
                    }
                    if let Some(db) = slot(&mut grads, &self.nodes, *b) {
                        let av = &self.nodes[a.0].value;
                        db.iter_mut()
                            .zip(gy.iter().zip(av))
                            .for_each(|(d, (&g, &x))| *d = *d + g * x);
                    }
                }
                Op::AddRow(a, row) => {
                    if let Some(da) = slot(&mut grads, &self.nodes, *a) {
                        add_into(da, &gy);
                    }
                    if let Some(dr) = slot(&mut grads, &self.nodes, *row) {
                        let n = dr.len();
                        for chunk in gy.chunks_exact(n) {
                            add_into(dr, chunk);
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let c = T::of(*c);
                    if let Some(da) = slot(&mut grads, &self.nodes, *a) {
                        da.iter_mut().zip(&gy).for_each(|(d, &g)| *d = *d + g * c);
                    }
                }
                Op::Act(a, kind) => {
                    let x = &self.nodes[a.0].value;
                    let y = &node.value;
                    if let Some(da) = slot(&mut grads, &self.nodes, *a) {
                        match kind {
                            Activation::Relu => {
                                for ((d, &g), &xv) in da.iter_mut().zip(&gy).zip(x) {
                                    if xv > T::zero() {
                                        *d = *d + g;
                                    }
                                }
                            }
                            Activation::LeakyRelu(s) => {
                                let s = T::of(*s);
                                for ((d, &g), &xv) in da.iter_mut().zip(&gy).zip(x) {
                                    *d = *d + if xv > T::zero() { g } else { g * s };
                                }
                            }
                            Activation::Sigmoid => {
                                for ((d, &g), &yv) in da.iter_mut().zip(&gy).zip(y) {
                                    *d = *d + g * yv * (T::one() - yv);
                                }
                            }
                            Activation::Sine => {
                                for ((d, &g), &xv) in da.iter_mut().zip(&gy).zip(x) {
                                    *d = *d + g * xv.cos();
                                }
                            }
                        }
                    }
                }
                Op::SinLift(a, freqs) => {
                    let block = 1 + 2 * freqs.len();
                    let x = &self.nodes[a.0].value;
                    if let Some(da) = slot(&mut grads, &self.nodes, *a) {
                        for (j, (d, &xv)) in da.iter_mut().zip(x).enumerate() {
                            let g = &gy[j * block..(j + 1) * block];
                            let xv = xv.as_f64();
                            let mut acc = g[0].as_f64();
                            for (f_i, &f) in freqs.iter().enumerate() {
                                let (s, c) = (f * xv).sin_cos();
                                acc += f * (g[1 + 2 * f_i].as_f64() * c - g[2 + 2 * f_i].as_f64() * s);
                            }
                            *d = *d + T::of(acc);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.shape[1];
                    let mut col = 0;
                    for &p in parts {
                        let n = as_matrix(self.shape(p)).expect("validated").1;
                        if let Some(dp) = slot(&mut grads, &self.nodes, p) {
                            for (r, chunk) in dp.chunks_exact_mut(n).enumerate() {
                                add_into(chunk, &gy[r * total + col..r * total + col + n]);
                            }
                        }
                        col += n;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if let Some(dp) = slot(&mut grads, &self.nodes, p) {
                            add_into(dp, &gy[start..start + len]);
                        }
                        start += len;
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = as_matrix(self.shape(*a)).expect("validated");
                    if let Some(da) = slot(&mut grads, &self.nodes, *a) {
                        add_into(da, &transpose_vec(&gy, n, m));
                    }
                }
                Op::Reshape(a) => {
                    if let Some(da) = slot(&mut grads, &self.nodes, *a) {
                        add_into(da, &gy);
                    }
                }
                Op::Conv { x, k, bias, geom } => {
                    let (x, k, bias, geom) = (*x, *k, *bias, *geom);
                    let mut dx = take_slot(&mut grads, &self.nodes, x);
                    let mut dk = take_slot(&mut grads, &self.nodes, k);
                    let mut db = bias.and_then(|b| take_slot(&mut grads, &self.nodes, b));
                    kernels::conv2d_backward(
                        self.value(x),
                        self.value(k),
                        &geom,
                        &gy,
                        dx.as_deref_mut(),
                        dk.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    if dx.is_some() {
                        grads[x.0] = dx;
                    }
                    if dk.is_some() {
                        grads[k.0] = dk;
                    }
                    if let (Some(b), Some(db)) = (bias, db) {
                        grads[b.0] = Some(db);
                    }
                }
                Op::Upsample(a) => {
                    let (c, h, w) = {
                        let s = self.shape(*a);
                        (s[0], s[1], s[2])
                    };
                    if let Some(da) = slot(&mut grads, &self.nodes, *a) {
                        kernels::upsample2x_backward(&gy, c, h, w, da);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let n = *node.shape.last().expect("validated");
                    let y = &node.value;
                    if let Some(da) = slot(&mut grads, &self.nodes, *a) {
                        for ((d_row, g_row), y_row) in da
                            .chunks_exact_mut(n)
                            .zip(gy.chunks_exact(n))
                            .zip(y.chunks_exact(n))
                        {
                            let dot: T = g_row.iter().zip(y_row).map(|(&g, &yv)| g * yv).sum();
                            for ((d, &g), &yv) in d_row.iter_mut().zip(g_row).zip(y_row) {
                                *d = *d + yv * (g - dot);
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(da) = slot(&mut grads, &self.nodes, *a) {
                        da.iter_mut().for_each(|d| *d = *d + gy[0]);
                    }
                }
                Op::Mean(a) => {
                    let n = T::of(self.value(*a).len() as f64);
                    if let Some(da) = slot(&mut grads, &self.nodes, *a) {
                        da.iter_mut().for_each(|d| *d = *d + gy[0] / n);
                    }
                }
                Op::Mse(a, b) => {
                    let n = T::of(self.value(*a).len() as f64);
                    let scale = (T::one() + T::one()) * gy[0] / n;
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    if let Some(da) = slot(&mut grads, &self.nodes, *a) {
                        for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                            *d = *d + scale * (x - y);
                        }
                    }
                    if let Some(db) = slot(&mut grads, &self.nodes, *b) {
                        for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                            *d = *d - scale * (x - y);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradient buffer for `v` if it participates in differentiation.
fn slot<'g, T: Element>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn take_slot<T: Element>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<Vec<T>> {
    slot(grads, nodes, v)?;
    grads[v.0].take()
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn transpose_vec<T: Element>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
