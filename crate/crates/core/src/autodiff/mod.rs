//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. Nodes are appended in evaluation order, so the tape is
//! a topological order of the graph and cannot contain cycles; `backward`
//! walks it once in reverse. Tapes are rebuilt for every forward pass since
//! the forward operator changes from one problem instance to the next.
//!
//! Parameters enter a tape through [`Tape::param`], which binds a name to a
//! leaf. After [`Tape::backward`] the gradients of bound leaves are pushed
//! into a [`ParamStore`] with [`ParamStore::accumulate`].

pub mod gradcheck;
mod kernels;
mod params;

use std::collections::HashMap;
use std::sync::Arc;

pub use kernels::{col2im, conv_out_len, gemm, im2col};
pub use params::{AdamConfig, ParamStore, Parameter};

use crate::error::{Error, Result};
use crate::operators::OperatorHandle;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding applied before a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaddingMode {
    Zero(usize),
    Reflect(usize),
    Valid,
}

/// Index value marking an output entry of a gather that reads zero.
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Arc<Tensor>),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    DivBy(Var, Var),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    Dot(Var, Var),
    Reshape(Var),
    Gather(Var, Arc<Vec<usize>>),
    Concat(Vec<Var>),
    Conv {
        input: Var,
        weight: Var,
        stride: usize,
    },
    ConvTranspose {
        input: Var,
        weight: Var,
        stride: usize,
    },
    Linear {
        input: Var,
        op: OperatorHandle,
        adjoint: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(String, Var)>,
    bound: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (inputs of gradient checks, for instance).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter; binding the same name twice returns the same leaf.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = self.variable(value.clone());
        self.bound.insert(name.to_string(), v);
        self.bindings.push((name.to_string(), v));
        v
    }

    /// Parameters bound on this tape, in binding order.
    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    fn grad2(&self, a: Var, b: Var) -> bool {
        self.needs_grad(a) || self.needs_grad(b)
    }

    fn same_numel(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.numel() != sb.numel() {
            return Err(Error::ShapeMismatch {
                expected: sa.shape().to_vec(),
                actual: sb.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn expect_scalar(&self, s: Var) -> Result<()> {
        if !self.value(s).is_scalar() {
            return Err(Error::invalid(format!(
                "expected a scalar node, got shape {:?}",
                self.shape(s)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_numel(a, b)?;
        let v = self.value(a).add(self.value(b))?;
        let g = self.grad2(a, b);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_numel(a, b)?;
        let v = self.value(a).sub(self.value(b))?;
        let g = self.grad2(a, b);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_numel(a, b)?;
        let v = self.value(a).mul(self.value(b))?;
        let g = self.grad2(a, b);
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor>) -> Result<Var> {
        let v = self.value(a).mul(&c)?;
        let g = self.needs_grad(a);
        Ok(self.push(v, Op::MulConst(a, c), g))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.value(a).scale(alpha);
        let g = self.needs_grad(a);
        self.push(v, Op::Scale(a, alpha), g)
    }

    /// Tensor times a scalar node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.expect_scalar(s)?;
        let v = self.value(a).scale(self.value(s).item());
        let g = self.grad2(a, s);
        Ok(self.push(v, Op::ScaleBy(a, s), g))
    }

    /// Tensor divided by a scalar node.
    pub fn div_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.expect_scalar(s)?;
        let d = self.value(s).item();
        if d == 0.0 {
            return Err(Error::NonFinite("division by zero".into()));
        }
        let v = self.value(a).scale(1.0 / d);
        let g = self.grad2(a, s);
        Ok(self.push(v, Op::DivBy(a, s), g))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let g = self.needs_grad(a);
        self.push(v, Op::Relu(a), g)
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let g = self.needs_grad(a);
        self.push(v, Op::Abs(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let g = self.needs_grad(a);
        self.push(v, Op::Sum(a), g)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).dot(self.value(b))?);
        let g = self.grad2(a, b);
        Ok(self.push(v, Op::Dot(a, b), g))
    }

    /// `‖a‖₂²`.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        self.dot(a, a).expect("same node has matching shape")
    }

    /// `‖a‖₁`.
    pub fn l1_norm(&mut self, a: Var) -> Var {
        let abs = self.abs(a);
        self.sum(abs)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let g = self.needs_grad(a);
        Ok(self.push(v, Op::Reshape(a), g))
    }

    /// `out[i] = a[index[i]]`, or 0 where `index[i] == GATHER_ZERO`.
    pub fn gather(
        &mut self,
        a: Var,
        index: Arc<Vec<usize>>,
        shape: impl Into<Vec<usize>>,
    ) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = index.iter().find(|&&i| i != GATHER_ZERO && i >= src.len()) {
            return Err(Error::invalid(format!("gather index {bad} out of range")));
        }
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i] })
            .collect();
        let v = Tensor::new(shape, data)?;
        let g = self.needs_grad(a);
        Ok(self.push(v, Op::Gather(a, index), g))
    }

    /// Concatenates `(1, C_i, H, W)` (or `(C_i, H, W)`) nodes along channels.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let rank4 = tensors
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?
            .shape()
            .len()
            == 4;
        let cat = Tensor::concat_channels(&tensors)?;
        let cat = if rank4 {
            let s = cat.shape().to_vec();
            cat.reshape(vec![1, s[0], s[1], s[2]])?
        } else {
            cat
        };
        let g = parts.iter().any(|&p| self.needs_grad(p));
        Ok(self.push(cat, Op::Concat(parts.to_vec()), g))
    }

    /// Channel slice of a `(1, C, H, W)` node.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = self.value(a).image_dims()?;
        if len == 0 || start + len > c {
            return Err(Error::invalid("channel slice out of range"));
        }
        let plane = h * w;
        let index: Vec<usize> = (start * plane..(start + len) * plane).collect();
        self.gather(a, Arc::new(index), vec![1, len, h, w])
    }

    /// Pads a `(1, C, H, W)` node spatially.
    pub fn pad(&mut self, a: Var, top: usize, bottom: usize, left: usize, right: usize, reflect: bool) -> Result<Var> {
        let (c, h, w) = self.value(a).image_dims()?;
        let (hp, wp) = (h + top + bottom, w + left + right);
        let mut index = Vec::with_capacity(c * hp * wp);
        for ch in 0..c {
            for y in 0..hp {
                for x in 0..wp {
                    let sy = y as isize - top as isize;
                    let sx = x as isize - left as isize;
                    let idx = if reflect {
                        let ry = reflect_index(sy, h);
                        let rx = reflect_index(sx, w);
                        (ch * h + ry) * w + rx
                    } else if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        GATHER_ZERO
                    } else {
                        (ch * h + sy as usize) * w + sx as usize
                    };
                    index.push(idx);
                }
            }
        }
        self.gather(a, Arc::new(index), vec![1, c, hp, wp])
    }

    /// Keeps the top-left `height x width` window of a `(1, C, H, W)` node.
    pub fn crop(&mut self, a: Var, height: usize, width: usize) -> Result<Var> {
        let (c, h, w) = self.value(a).image_dims()?;
        if height > h || width > w || height == 0 || width == 0 {
            return Err(Error::invalid("crop larger than input"));
        }
        let mut index = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            for y in 0..height {
                for x in 0..width {
                    index.push((ch * h + y) * w + x);
                }
            }
        }
        self.gather(a, Arc::new(index), vec![1, c, height, width])
    }

    /// Bias-free 2-D cross-correlation of a `(N, Cin, H, W)` input with a
    /// `(Cout, Cin, kh, kw)` weight.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: PaddingMode) -> Result<Var> {
        if stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        let kshape = self.shape(weight).to_vec();
        if kshape.len() != 4 {
            return Err(Error::InvalidShape(kshape));
        }
        let padded = match padding {
            PaddingMode::Valid => input,
            PaddingMode::Zero(0) | PaddingMode::Reflect(0) => input,
            PaddingMode::Zero(p) => self.pad_batched(input, p, false)?,
            PaddingMode::Reflect(p) => self.pad_batched(input, p, true)?,
        };
        self.conv_valid(padded, weight, stride)
    }

    fn pad_batched(&mut self, input: Var, p: usize, reflect: bool) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::InvalidShape(shape));
        }
        if shape[0] == 1 {
            return self.pad(input, p, p, p, p, reflect);
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let mut index = Vec::with_capacity(n * c * hp * wp);
        for b in 0..n * c {
            for y in 0..hp {
                for x in 0..wp {
                    let sy = y as isize - p as isize;
                    let sx = x as isize - p as isize;
                    index.push(if reflect {
                        (b * h + reflect_index(sy, h)) * w + reflect_index(sx, w)
                    } else if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        GATHER_ZERO
                    } else {
                        (b * h + sy as usize) * w + sx as usize
                    });
                }
            }
        }
        self.gather(input, Arc::new(index), vec![n, c, hp, wp])
    }

    fn conv_valid(&mut self, input: Var, weight: Var, stride: usize) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(weight).to_vec();
        if ishape.len() != 4 {
            return Err(Error::InvalidShape(ishape));
        }
        let (n, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (cout, kcin, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kcin != cin {
            return Err(Error::ShapeMismatch {
                expected: vec![cout, cin, kh, kw],
                actual: kshape,
            });
        }
        if kh > h || kw > w {
            return Err(Error::invalid(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        let ho = conv_out_len(h, kh, stride);
        let wo = conv_out_len(w, kw, stride);
        let kdim = cin * kh * kw;
        let npix = ho * wo;
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![0.0; n * cout * npix];
        let mut cols = vec![0.0; kdim * npix];
        for b in 0..n {
            im2col(&x[b * cin * h * w..(b + 1) * cin * h * w], cin, h, w, kh, kw, stride, &mut cols);
            gemm(cout, kdim, npix, 1.0, wt, false, &cols, false, 0.0, &mut out[b * cout * npix..(b + 1) * cout * npix]);
        }
        let v = Tensor::new(vec![n, cout, ho, wo], out)?;
        let g = self.grad2(input, weight);
        Ok(self.push(v, Op::Conv { input, weight, stride }, g))
    }

    /// Bias-free transposed convolution of a `(N, Cin, H, W)` input with a
    /// `(Cin, Cout, kh, kw)` weight; output `(N, Cout, (H-1)s+kh, (W-1)s+kw)`.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(weight).to_vec();
        if ishape.len() != 4 || kshape.len() != 4 {
            return Err(Error::InvalidShape(ishape));
        }
        let (n, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (kcin, cout, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kcin != cin {
            return Err(Error::ShapeMismatch {
                expected: vec![cin, cout, kh, kw],
                actual: kshape,
            });
        }
        let (ho, wo) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
        let kdim = cout * kh * kw;
        let npix = h * w;
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![0.0; n * cout * ho * wo];
        let mut cols = vec![0.0; kdim * npix];
        for b in 0..n {
            // cols = W^T x with W viewed as (Cin, Cout*kh*kw)
            gemm(kdim, cin, npix, 1.0, wt, true, &x[b * cin * npix..(b + 1) * cin * npix], false, 0.0, &mut cols);
            col2im(&cols, cout, ho, wo, kh, kw, stride, &mut out[b * cout * ho * wo..(b + 1) * cout * ho * wo]);
        }
        let v = Tensor::new(vec![n, cout, ho, wo], out)?;
        let g = self.grad2(input, weight);
        Ok(self.push(v, Op::ConvTranspose { input, weight, stride }, g))
    }

    /// Learned stride-2 downsampling with a `(Cout, Cin, 2, 2)` weight.
    pub fn downsample2(&mut self, input: Var, weight: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::invalid(format!("downsample2 needs even extents, got {s:?}")));
        }
        if self.shape(weight).len() != 4 || self.shape(weight)[2..] != [2, 2] {
            return Err(Error::InvalidShape(self.shape(weight).to_vec()));
        }
        self.conv2d(input, weight, 2, PaddingMode::Valid)
    }

    /// Learned stride-2 upsampling with a `(Cin, Cout, 2, 2)` weight.
    pub fn upsample2(&mut self, input: Var, weight: Var) -> Result<Var> {
        if self.shape(weight).len() != 4 || self.shape(weight)[2..] != [2, 2] {
            return Err(Error::InvalidShape(self.shape(weight).to_vec()));
        }
        self.conv_transpose2d(input, weight, 2)
    }

    /// Applies a linear operator (or its adjoint) to a node whose element
    /// count matches the operator's domain (range). The output takes the
    /// operator's range (domain) shape.
    pub fn linear(&mut self, input: Var, op: &OperatorHandle, adjoint: bool) -> Result<Var> {
        let x = self.value(input);
        let (src_shape, dst_shape) = if adjoint {
            (op.range_shape(), op.domain_shape())
        } else {
            (op.domain_shape(), op.range_shape())
        };
        let n_src: usize = src_shape.iter().product();
        if x.numel() != n_src {
            return Err(Error::ShapeMismatch {
                expected: src_shape,
                actual: x.shape().to_vec(),
            });
        }
        let out = if adjoint {
            op.adjoint_slice(x.data())
        } else {
            op.apply_slice(x.data())
        };
        let v = Tensor::new(dst_shape, out)?;
        let g = self.needs_grad(input);
        Ok(self.push(
            v,
            Op::Linear {
                input,
                op: op.clone(),
                adjoint,
            },
            g,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, contrib: Tensor| {
            if !self.needs_grad(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (a, b) in existing.data_mut().iter_mut().zip(contrib.data()) {
                        *a += b;
                    }
                }
                slot @ None => {
                    let shape = self.shape(v).to_vec();
                    *slot = Some(contrib.reshape(shape).expect("gradient numel matches node"));
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    acc(*a, g.mul(self.value(*b))?);
                }
                if self.needs_grad(*b) {
                    acc(*b, g.mul(self.value(*a))?);
                }
            }
            Op::MulConst(a, c) => acc(*a, g.mul(c)?),
            Op::Scale(a, alpha) => acc(*a, g.scale(*alpha)),
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).item();
                if self.needs_grad(*a) {
                    acc(*a, g.scale(sv));
                }
                if self.needs_grad(*s) {
                    acc(*s, Tensor::scalar(g.dot(self.value(*a))?));
                }
            }
            Op::DivBy(a, s) => {
                let sv = self.value(*s).item();
                if self.needs_grad(*a) {
                    acc(*a, g.scale(1.0 / sv));
                }
                if self.needs_grad(*s) {
                    acc(*s, Tensor::scalar(-g.dot(self.value(*a))? / (sv * sv)));
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 })?);
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                acc(
                    *a,
                    g.zip_map(x, |gi, xi| {
                        if xi > 0.0 {
                            gi
                        } else if xi < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    })?,
                );
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                acc(*a, Tensor::full(shape, g.item()));
            }
            Op::Dot(a, b) => {
                let gs = g.item();
                if self.needs_grad(*a) {
                    acc(*a, self.value(*b).scale(gs));
                }
                if self.needs_grad(*b) {
                    acc(*b, self.value(*a).scale(gs));
                }
            }
            Op::Reshape(a) => acc(*a, g.clone()),
            Op::Gather(a, index) => {
                let n = self.value(*a).numel();
                let mut out = vec![0.0; n];
                for (&i, &gv) in index.iter().zip(g.data()) {
                    if i != GATHER_ZERO {
                        out[i] += gv;
                    }
                }
                acc(*a, Tensor::new(vec![n], out)?);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.needs_grad(p) {
                        acc(p, Tensor::new(vec![n], g.data()[offset..offset + n].to_vec())?);
                    }
                    offset += n;
                }
            }
            Op::Conv { input, weight, stride } => {
                let (dx, dw) = self.conv_backward(*input, *weight, *stride, g);
                if let Some(dx) = dx {
                    acc(*input, dx);
                }
                if let Some(dw) = dw {
                    acc(*weight, dw);
                }
            }
            Op::ConvTranspose { input, weight, stride } => {
                let (dx, dw) = self.conv_transpose_backward(*input, *weight, *stride, g);
                if let Some(dx) = dx {
                    acc(*input, dx);
                }
                if let Some(dw) = dw {
                    acc(*weight, dw);
                }
            }
            Op::Linear { input, op, adjoint } => {
                let back = if *adjoint {
                    op.apply_slice(g.data())
                } else {
                    op.adjoint_slice(g.data())
                };
                let n = back.len();
                acc(*input, Tensor::new(vec![n], back)?);
            }
        }
        Ok(())
    }

    fn conv_backward(&self, input: Var, weight: Var, stride: usize, g: &Tensor) -> (Option<Tensor>, Option<Tensor>) {
        let ishape = self.shape(input);
        let kshape = self.shape(weight);
        let (n, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (cout, _, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        let ho = conv_out_len(h, kh, stride);
        let wo = conv_out_len(w, kw, stride);
        let (kdim, npix) = (cin * kh * kw, ho * wo);
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let gd = g.data();
        let want_dx = self.needs_grad(input);
        let want_dw = self.needs_grad(weight);
        let mut dx = want_dx.then(|| vec![0.0; n * cin * h * w]);
        let mut dw = want_dw.then(|| vec![0.0; cout * kdim]);
        let mut cols = vec![0.0; kdim * npix];
        for b in 0..n {
            let gb = &gd[b * cout * npix..(b + 1) * cout * npix];
            if let Some(dw) = dw.as_mut() {
                im2col(&x[b * cin * h * w..(b + 1) * cin * h * w], cin, h, w, kh, kw, stride, &mut cols);
                gemm(cout, npix, kdim, 1.0, gb, false, &cols, true, 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(kdim, cout, npix, 1.0, wt, true, gb, false, 0.0, &mut cols);
                col2im(&cols, cin, h, w, kh, kw, stride, &mut dx[b * cin * h * w..(b + 1) * cin * h * w]);
            }
        }
        (
            dx.map(|d| Tensor::new(ishape.to_vec(), d).expect("shape")),
            dw.map(|d| Tensor::new(kshape.to_vec(), d).expect("shape")),
        )
    }

    fn conv_transpose_backward(&self, input: Var, weight: Var, stride: usize, g: &Tensor) -> (Option<Tensor>, Option<Tensor>) {
        let ishape = self.shape(input);
        let kshape = self.shape(weight);
        let (n, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (_, cout, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        let (ho, wo) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
        let (kdim, npix) = (cout * kh * kw, h * w);
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let gd = g.data();
        let mut dx = self.needs_grad(input).then(|| vec![0.0; n * cin * npix]);
        let mut dw = self.needs_grad(weight).then(|| vec![0.0; cin * kdim]);
        let mut cols = vec![0.0; kdim * npix];
        for b in 0..n {
            im2col(&gd[b * cout * ho * wo..(b + 1) * cout * ho * wo], cout, ho, wo, kh, kw, stride, &mut cols);
            if let Some(dx) = dx.as_mut() {
                gemm(cin, kdim, npix, 1.0, wt, false, &cols, false, 0.0, &mut dx[b * cin * npix..(b + 1) * cin * npix]);
            }
            if let Some(dw) = dw.as_mut() {
                gemm(cin, npix, kdim, 1.0, &x[b * cin * npix..(b + 1) * cin * npix], false, &cols, true, 1.0, dw);
            }
        }
        (
            dx.map(|d| Tensor::new(ishape.to_vec(), d).expect("shape")),
            dw.map(|d| Tensor::new(kshape.to_vec(), d).expect("shape")),
        )
    }
}

/// Symmetric reflection without edge repetition (`-1 -> 1`, `n -> n-2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}
