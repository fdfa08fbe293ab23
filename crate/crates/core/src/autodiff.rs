//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value plus whatever
//! it needs for the backward pass. [`Tape::backward`] walks the nodes in
//! exact reverse order, accumulating gradients across fan-out, and consumes
//! the tape.
//!
//! A tape created with [`Tape::meta`] only propagates shapes and counts
//! multiply-accumulates; no values are computed.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::kernels::activation::{self as act, Activation};
use crate::kernels::broadcast;
use crate::kernels::conv::{self, Conv2dSpec, ConvGeom};
use crate::kernels::norm::{self, BatchStats};
use crate::kernels::pool::{self, ChannelPool, GlobalPool};
use crate::kernels::resample;
use crate::params::ParamId;
use crate::tensor::{dims4, gemm, numel, Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower bound applied to probabilities inside the BCE loss.
pub const BCE_EPS: f64 = 1e-7;

enum Op<T> {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, stats: BatchStats<T> },
    BatchNormInfer { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    Act { x: Var, kind: Activation },
    Softmax { x: Var, axis: usize },
    GlobalPool { x: Var, kind: GlobalPool, arg: Vec<usize> },
    ChannelPool { x: Var, kind: ChannelPool, arg: Vec<usize> },
    WindowPool { x: Var, max: bool, k: usize, arg: Vec<usize> },
    Resize { x: Var },
    Gather { x: Var, idx: Vec<usize> },
    Dense { x: Var, w: Var, b: Option<Var> },
    Matmul { a: Var, b: Var, trans_b: bool },
    Concat { xs: Vec<Var>, axis: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Reshape { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Bce { pred: Var, target: Tensor<T> },
}

struct Node<T> {
    op: Op<T>,
    name: &'static str,
    shape: Vec<usize>,
    value: Option<Tensor<T>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    meta: bool,
    macs: u64,
    fault: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf (input or parameter) node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients in tape order. Parameters that did not influence
    /// the loss are absent.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params.iter().filter_map(|&(id, n)| self.grads[n].as_ref().map(|g| (id, g)))
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), meta: false, macs: 0, fault: false }
    }

    /// Shape-only tape for cost accounting.
    pub fn meta() -> Self {
        Self { meta: true, ..Self::new() }
    }

    pub fn is_meta(&self) -> bool {
        self.meta
    }

    /// Multiply-accumulates issued so far by convolutions, dense layers and
    /// matrix products.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Corrupts one backward rule. Only used to prove the gradient checker
    /// detects wrong gradients.
    #[doc(hidden)]
    pub fn set_fault_injection(&mut self, on: bool) {
        self.fault = on;
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a node. Panics on a meta tape.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.as_ref().expect("meta tape holds no values")
    }

    /// Fingerprint of every branch taken by piecewise operations: the sign
    /// pattern entering each (leaky) ReLU, the winners of max/min pooling and
    /// which side of the BCE clamp each prediction fell on. Two evaluations
    /// with equal fingerprints lie in the same smooth piece.
    pub fn branch_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Act { x, kind: Activation::Relu | Activation::LeakyRelu(_) } => {
                    if let Some(v) = &self.nodes[x.0].value {
                        v.data().iter().for_each(|e| (*e > T::zero()).hash(&mut h));
                    }
                }
                Op::GlobalPool { arg, .. } | Op::ChannelPool { arg, .. } | Op::WindowPool { arg, .. } => {
                    arg.hash(&mut h)
                }
                Op::Bce { pred, .. } => {
                    if let Some(v) = &self.nodes[pred.0].value {
                        let lo = T::lit(BCE_EPS);
                        let hi = T::one() - lo;
                        v.data().iter().for_each(|e| ((*e < lo) as u8 + 2 * (*e > hi) as u8).hash(&mut h));
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    fn val(&self, v: Var) -> &[T] {
        self.value(v).data()
    }

    fn push(&mut self, name: &'static str, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let shape = value.shape().to_vec();
        self.nodes.push(Node { op, name, shape, value: Some(value) });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a shape-only node on a meta tape. Returns `None` on a real
    /// tape so the caller goes on to compute values.
    fn meta_node(&mut self, name: &'static str, op: impl FnOnce() -> Op<T>, shape: &[usize], macs: u64) -> Option<Var> {
        self.macs += macs;
        if !self.meta {
            return None;
        }
        self.nodes.push(Node { op: op(), name, shape: shape.to_vec(), value: None });
        Some(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.leaf(Op::Param(id), value)
    }

    /// Leaf with a known shape but no value, for meta tapes.
    pub fn meta_leaf(&mut self, id: Option<ParamId>, shape: &[usize]) -> Var {
        assert!(self.meta, "meta_leaf on a value tape");
        let op = id.map_or(Op::Input, Op::Param);
        self.nodes.push(Node { op, name: "leaf", shape: shape.to_vec(), value: None });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        assert!(!self.meta, "value leaf on a meta tape");
        let shape = value.shape().to_vec();
        self.nodes.push(Node { op, name: "leaf", shape, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    // ---- convolution -------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), spec)?;
        self.check_bias(b, geom.cout)?;
        let out_shape = geom.output_shape();
        if let Some(v) = self.meta_node("conv2d", || Op::Conv { x, w, b, geom }, &out_shape, geom.macs()) {
            return Ok(v);
        }
        let mut out = conv::conv_forward(self.val(x), self.val(w), &geom);
        if let Some(b) = b {
            conv::add_bias(&mut out, self.val(b));
        }
        self.push("conv2d", Op::Conv { x, w, b, geom }, Tensor::new(out_shape, out)?)
    }

    /// Transposed convolution with kernel `(kh, kw, c_out, c_in)`: the adjoint
    /// of a same-padded stride-`stride` convolution. Spatial extents are
    /// multiplied by `stride`.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let geom = ConvGeom::for_transpose(self.shape(x), self.shape(w), stride)?;
        self.check_bias(b, geom.cin)?;
        let out_shape = geom.input_shape();
        if let Some(v) =
            self.meta_node("conv2d_transpose", || Op::ConvTranspose { x, w, b, geom }, &out_shape, geom.macs())
        {
            return Ok(v);
        }
        let mut out = conv::conv_backward_data(self.val(x), self.val(w), &geom);
        if let Some(b) = b {
            conv::add_bias(&mut out, self.val(b));
        }
        self.push("conv2d_transpose", Op::ConvTranspose { x, w, b, geom }, Tensor::new(out_shape, out)?)
    }

    fn check_bias(&self, b: Option<Var>, channels: usize) -> Result<()> {
        match b {
            Some(b) if self.shape(b) != [channels] => {
                Err(Error::shape(format!("bias shape {:?}, expected [{channels}]", self.shape(b))))
            }
            _ => Ok(()),
        }
    }

    // ---- normalization -----------------------------------------------

    fn check_affine(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = *self.shape(x).last().ok_or_else(|| Error::shape("batch_norm on a scalar"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batch_norm: {c} channels but gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(c)
    }

    /// Training-mode batch normalization. Returns the output and the batch
    /// `(mean, biased variance)` per channel for running-statistic updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        self.check_affine(x, gamma, beta)?;
        let shape = self.shape(x).to_vec();
        let dummy = || Op::Act { x, kind: Activation::Relu };
        if let Some(v) = self.meta_node("batch_norm", dummy, &shape, 0) {
            return Ok((v, None));
        }
        let (y, stats) = norm::batch_norm_train(self.val(x), self.val(gamma), self.val(beta), T::lit(eps));
        let batch = (stats.mean.clone(), stats.var.clone());
        let v = self.push("batch_norm", Op::BatchNormTrain { x, gamma, beta, stats }, Tensor::new(shape, y)?)?;
        Ok((v, Some(batch)))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let c = self.check_affine(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm: running statistics length mismatch"));
        }
        let shape = self.shape(x).to_vec();
        let dummy = || Op::Act { x, kind: Activation::Relu };
        if let Some(v) = self.meta_node("batch_norm", dummy, &shape, 0) {
            return Ok(v);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + T::lit(eps)).sqrt().recip()).collect();
        let y = norm::batch_norm_infer(self.val(x), self.val(gamma), self.val(beta), mean, &inv_std);
        let op = Op::BatchNormInfer { x, gamma, beta, mean: mean.to_vec(), inv_std };
        self.push("batch_norm", op, Tensor::new(shape, y)?)
    }

    // ---- elementwise -------------------------------------------------

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if let Some(v) = self.meta_node(kind.name(), || Op::Act { x, kind }, &shape, 0) {
            return Ok(v);
        }
        let y = act::forward(kind, self.val(x));
        self.push(kind.name(), Op::Act { x, kind }, Tensor::new(shape, y)?)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.activation(Activation::LeakyRelu(slope), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Swish, x)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        if let Some(v) = self.meta_node("softmax", || Op::Softmax { x, axis }, &shape, 0) {
            return Ok(v);
        }
        let y = act::softmax(self.val(x), &shape, axis);
        self.push("softmax", Op::Softmax { x, axis }, Tensor::new(shape, y)?)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast::broadcast_shape(self.shape(a), self.shape(b))?;
        let make = || match name {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        if let Some(v) = self.meta_node(name, make, &out_shape, 0) {
            return Ok(v);
        }
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (va, vb) = (self.val(a), self.val(b));
        let y = match name {
            "add" => broadcast::binary(va, sa, vb, sb, &out_shape, |p, q| p + q),
            "sub" => broadcast::binary(va, sa, vb, sb, &out_shape, |p, q| p - q),
            _ => broadcast::binary(va, sa, vb, sb, &out_shape, |p, q| p * q),
        };
        self.push(name, make(), Tensor::new(out_shape, y)?)
    }

    /// Elementwise sum; same-rank operands broadcast over unit extents.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b)
    }

    /// Elementwise product; e.g. an `(N,1,1,C)` or `(N,H,W,1)` gate against
    /// an `(N,H,W,C)` map.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = T::lit(c);
        if let Some(v) = self.meta_node("scale", || Op::Scale { x, c }, &shape, 0) {
            return Ok(v);
        }
        let y = self.val(x).iter().map(|&v| v * c).collect();
        self.push("scale", Op::Scale { x, c }, Tensor::new(shape, y)?)
    }

    // ---- pooling -----------------------------------------------------

    /// Reduces H and W: `(N,H,W,C) -> (N,1,1,C)`.
    pub fn pool_global(&mut self, kind: GlobalPool, x: Var) -> Result<Var> {
        let (n, h, w, c) = dims4(self.shape(x))?;
        let out_shape = [n, 1, 1, c];
        let name = match kind {
            GlobalPool::Avg => "global_avg_pool",
            GlobalPool::Max => "global_max_pool",
        };
        if let Some(v) = self.meta_node(name, || Op::GlobalPool { x, kind, arg: vec![] }, &out_shape, 0) {
            return Ok(v);
        }
        let (y, arg) = pool::global_pool(kind, self.val(x), n, h * w, c);
        self.push(name, Op::GlobalPool { x, kind, arg }, Tensor::new(out_shape, y)?)
    }

    /// Reduces the channel axis: `(N,H,W,C) -> (N,H,W,1)`.
    pub fn pool_channel(&mut self, kind: ChannelPool, x: Var) -> Result<Var> {
        let (n, h, w, c) = dims4(self.shape(x))?;
        let out_shape = [n, h, w, 1];
        if let Some(v) = self.meta_node("channel_pool", || Op::ChannelPool { x, kind, arg: vec![] }, &out_shape, 0) {
            return Ok(v);
        }
        let (y, arg) = pool::channel_pool(kind, self.val(x), c);
        self.push("channel_pool", Op::ChannelPool { x, kind, arg }, Tensor::new(out_shape, y)?)
    }

    fn window_pool(&mut self, max: bool, x: Var, k: usize) -> Result<Var> {
        let name = if max { "max_pool" } else { "avg_pool" };
        let (n, h, w, c) = dims4(self.shape(x))?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(format!("{name}: {h}x{w} not divisible by window {k}")));
        }
        let out_shape = [n, h / k, w / k, c];
        if let Some(v) = self.meta_node(name, || Op::WindowPool { x, max, k, arg: vec![] }, &out_shape, 0) {
            return Ok(v);
        }
        let (y, arg) = pool::window_pool(max, self.val(x), (n, h, w, c), k);
        self.push(name, Op::WindowPool { x, max, k, arg }, Tensor::new(out_shape, y)?)
    }

    /// Non-overlapping `k x k` max pooling.
    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        self.window_pool(true, x, k)
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        self.window_pool(false, x, k)
    }

    // ---- resampling --------------------------------------------------

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, h, w, c) = dims4(self.shape(x))?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::arg("resize to empty extent"));
        }
        let out_shape = [n, out_h, out_w, c];
        if let Some(v) = self.meta_node("bilinear", || Op::Resize { x }, &out_shape, 0) {
            return Ok(v);
        }
        let y = resample::resize_bilinear(self.val(x), (n, h, w, c), (out_h, out_w));
        self.push("bilinear", Op::Resize { x }, Tensor::new(out_shape, y)?)
    }

    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::arg("upsample factor must be at least 1"));
        }
        let (_, h, w, _) = dims4(self.shape(x))?;
        self.resize_bilinear(x, h * factor, w * factor)
    }

    /// `(N,H,W,C) -> (N,H*b,W*b,C/b^2)`; output pixel `(y*b+dy, x*b+dx, c)`
    /// reads input channel `c*b^2 + dy*b + dx`.
    pub fn depth_to_space(&mut self, x: Var, block: usize) -> Result<Var> {
        let (n, h, w, c) = dims4(self.shape(x))?;
        if block == 0 || c % (block * block) != 0 {
            return Err(Error::shape(format!("depth_to_space: {c} channels not divisible by {block}^2")));
        }
        let out_shape = [n, h * block, w * block, c / (block * block)];
        if let Some(v) = self.meta_node("depth_to_space", || Op::Gather { x, idx: vec![] }, &out_shape, 0) {
            return Ok(v);
        }
        let idx = resample::depth_to_space_index((n, h, w, c), block);
        let y = resample::gather(self.val(x), &idx);
        self.push("depth_to_space", Op::Gather { x, idx }, Tensor::new(out_shape, y)?)
    }

    /// Exact inverse of [`Tape::depth_to_space`].
    pub fn space_to_depth(&mut self, x: Var, block: usize) -> Result<Var> {
        let (n, h, w, c) = dims4(self.shape(x))?;
        if block == 0 || h % block != 0 || w % block != 0 {
            return Err(Error::shape(format!("space_to_depth: {h}x{w} not divisible by {block}")));
        }
        let out_shape = [n, h / block, w / block, c * block * block];
        if let Some(v) = self.meta_node("space_to_depth", || Op::Gather { x, idx: vec![] }, &out_shape, 0) {
            return Ok(v);
        }
        let idx = resample::space_to_depth_index((n, h, w, c), block);
        let y = resample::gather(self.val(x), &idx);
        self.push("space_to_depth", Op::Gather { x, idx }, Tensor::new(out_shape, y)?)
    }

    // ---- linear algebra ----------------------------------------------

    /// Affine map over the trailing axis: `x @ w + b` with `w: (in, out)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&d_in, lead) = xs.split_last().ok_or_else(|| Error::shape("dense on a scalar"))?;
        let (win, wout) = match *ws {
            [i, o] => (i, o),
            _ => return Err(Error::shape(format!("dense weight must be rank 2, got {ws:?}"))),
        };
        if win != d_in {
            return Err(Error::shape(format!("dense: input width {d_in}, weight {ws:?}")));
        }
        self.check_bias(b, wout)?;
        let mut out_shape = lead.to_vec();
        out_shape.push(wout);
        let rows = numel(lead);
        if let Some(v) = self.meta_node("dense", || Op::Dense { x, w, b }, &out_shape, (rows * d_in * wout) as u64) {
            return Ok(v);
        }
        let mut y = vec![T::zero(); rows * wout];
        gemm(rows, d_in, wout, self.val(x), false, self.val(w), false, &mut y, false);
        if let Some(b) = b {
            conv::add_bias(&mut y, self.val(b));
        }
        self.push("dense", Op::Dense { x, w, b }, Tensor::new(out_shape, y)?)
    }

    fn matmul_dims(&self, a: Var, b: Var, trans_b: bool) -> Result<(usize, usize, usize, usize, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(Error::shape(format!("matmul: incompatible shapes {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(Error::shape(format!("matmul: inner extents {k} and {kb} differ")));
        }
        let batch = numel(&sa[..r - 2]);
        let mut out = sa[..r - 2].to_vec();
        out.extend([m, n]);
        Ok((batch, m, k, n, out))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (batch, m, k, n, out_shape) = self.matmul_dims(a, b, trans_b)?;
        if let Some(v) =
            self.meta_node("matmul", || Op::Matmul { a, b, trans_b }, &out_shape, (batch * m * k * n) as u64)
        {
            return Ok(v);
        }
        let mut y = vec![T::zero(); batch * m * n];
        let (va, vb) = (self.val(a), self.val(b));
        for i in 0..batch {
            gemm(m, k, n, &va[i * m * k..], false, &vb[i * k * n..], trans_b, &mut y[i * m * n..], false);
        }
        self.push("matmul", Op::Matmul { a, b, trans_b }, Tensor::new(out_shape, y)?)
    }

    /// Batched matrix product over the two trailing axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a @ b^T` over the two trailing axes.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    // ---- structure ---------------------------------------------------

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::arg("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::arg(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat: {s:?} incompatible with {first:?} on axis {axis}")));
            }
            out_shape[axis] += s[axis];
        }
        let xs_v = xs.to_vec();
        if let Some(v) = self.meta_node("concat", || Op::Concat { xs: xs_v.clone(), axis }, &out_shape, 0) {
            return Ok(v);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut y = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &x in xs {
                let chunk = self.shape(x)[axis] * inner;
                y.extend_from_slice(&self.val(x)[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push("concat", Op::Concat { xs: xs_v, axis }, Tensor::new(out_shape, y)?)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        if let Some(v) = self.meta_node("reshape", || Op::Reshape { x }, shape, 0) {
            return Ok(v);
        }
        let y = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", Op::Reshape { x }, y)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.meta_node("sum", || Op::Sum { x }, &[], 0) {
            return Ok(v);
        }
        let s = self.value(x).sum();
        self.push("sum", Op::Sum { x }, Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.meta_node("mean", || Op::Mean { x }, &[], 0) {
            return Ok(v);
        }
        let t = self.value(x);
        let m = t.sum() / T::from_usize(t.len().max(1)).unwrap();
        self.push("mean", Op::Mean { x }, Tensor::scalar(m))
    }

    /// Mean binary cross-entropy of probabilities against a `{0,1}` target.
    /// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]`; the clamp passes
    /// no gradient.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape("bce_loss", self.shape(pred), target.shape())?;
        if let Some(v) = self.meta_node("bce_loss", || Op::Bce { pred, target: target.clone() }, &[], 0) {
            return Ok(v);
        }
        let (lo, hi) = (T::lit(BCE_EPS), T::one() - T::lit(BCE_EPS));
        let total: T = self
            .val(pred)
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.max(lo).min(hi);
                -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            })
            .sum();
        let loss = total / T::from_usize(target.len()).unwrap();
        self.push("bce_loss", Op::Bce { pred, target: target.clone() }, Tensor::scalar(loss))
    }

    // ---- backward ----------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.meta {
            return Err(Error::Backward("meta tape has no values".into()));
        }
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        if matches!(self.nodes[loss.0].op, Op::Input | Op::Param(_)) {
            return Err(Error::Backward("loss is a detached leaf".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            match node.op {
                Op::Input => continue,
                Op::Param(id) => {
                    params.push((id, i));
                    continue;
                }
                _ => {}
            }
            let Some(dy) = grads[i].take() else { continue };
            for (v, g) in self.node_backward(node, &dy)? {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient { op: node.name });
                }
                accumulate(&mut grads, v, g, &self.nodes[v.0].shape)?;
            }
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn node_backward(&self, node: &Node<T>, dy_t: &Tensor<T>) -> Result<Vec<(Var, Vec<T>)>> {
        let dy = dy_t.data();
        let y = node.value.as_ref().map(Tensor::data).unwrap_or(&[]);
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv { x, w, b, geom } => {
                out.push((*x, conv::conv_backward_data(dy, self.val(*w), geom)));
                out.push((*w, conv::conv_backward_weight(dy, self.val(*x), geom)));
                if let Some(b) = b {
                    out.push((*b, conv::bias_grad(dy, geom.cout)));
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                // Forward was `conv_backward_data(x)`, so its adjoint is the
                // plain convolution of the incoming gradient.
                out.push((*x, conv::conv_forward(dy, self.val(*w), geom)));
                out.push((*w, conv::conv_backward_weight(self.val(*x), dy, geom)));
                if let Some(b) = b {
                    out.push((*b, conv::bias_grad(dy, geom.cin)));
                }
            }
            Op::BatchNormTrain { x, gamma, beta, stats } => {
                let (dx, dg, db) = norm::batch_norm_train_backward(dy, self.val(*gamma), stats);
                out.extend([(*x, dx), (*gamma, dg), (*beta, db)]);
            }
            Op::BatchNormInfer { x, gamma, beta, mean, inv_std } => {
                let (dx, dg, db) = norm::batch_norm_infer_backward(dy, self.val(*x), self.val(*gamma), mean, inv_std);
                out.extend([(*x, dx), (*gamma, dg), (*beta, db)]);
            }
            Op::Act { x, kind } => {
                let mut dx = act::backward(*kind, self.val(*x), y, dy);
                if self.fault && matches!(kind, Activation::LeakyRelu(_)) {
                    dx.iter_mut().for_each(|g| *g = *g * T::lit(1.05));
                }
                out.push((*x, dx));
            }
            Op::Softmax { x, axis } => out.push((*x, act::softmax_backward(y, dy, &node.shape, *axis))),
            Op::GlobalPool { x, kind, arg } => {
                let (n, h, w, c) = dims4(self.shape(*x))?;
                out.push((*x, pool::global_pool_backward(*kind, dy, arg, n, h * w, c)));
            }
            Op::ChannelPool { x, kind, arg } => {
                let c = self.shape(*x)[3];
                out.push((*x, pool::channel_pool_backward(*kind, dy, arg, c)));
            }
            Op::WindowPool { x, max, k, arg } => {
                let dims = dims4(self.shape(*x))?;
                out.push((*x, pool::window_pool_backward(*max, dy, arg, dims, *k)));
            }
            Op::Resize { x } => {
                let dims = dims4(self.shape(*x))?;
                out.push((*x, resample::resize_bilinear_backward(dy, dims, (node.shape[1], node.shape[2]))));
            }
            Op::Gather { x, idx } => out.push((*x, resample::scatter(dy, idx, numel(self.shape(*x))))),
            Op::Dense { x, w, b } => {
                let ws = self.shape(*w);
                let (d_in, d_out) = (ws[0], ws[1]);
                let rows = dy.len() / d_out;
                let mut dx = vec![T::zero(); rows * d_in];
                gemm(rows, d_out, d_in, dy, false, self.val(*w), true, &mut dx, false);
                let mut dw = vec![T::zero(); d_in * d_out];
                gemm(d_in, rows, d_out, self.val(*x), true, dy, false, &mut dw, false);
                out.extend([(*x, dx), (*w, dw)]);
                if let Some(b) = b {
                    out.push((*b, conv::bias_grad(dy, d_out)));
                }
            }
            Op::Matmul { a, b, trans_b } => {
                let (batch, m, k, n, _) = self.matmul_dims(*a, *b, *trans_b)?;
                let (va, vb) = (self.val(*a), self.val(*b));
                let mut da = vec![T::zero(); batch * m * k];
                let mut db = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let g = &dy[i * m * n..];
                    // dA = dY B^T (or dY B when B was transposed)
                    gemm(m, n, k, g, false, &vb[i * k * n..], !trans_b, &mut da[i * m * k..], false);
                    if *trans_b {
                        // B is (n, k): dB = dY^T A
                        gemm(n, m, k, g, true, &va[i * m * k..], false, &mut db[i * k * n..], false);
                    } else {
                        gemm(k, m, n, &va[i * m * k..], true, g, false, &mut db[i * k * n..], false);
                    }
                }
                out.extend([(*a, da), (*b, db)]);
            }
            Op::Concat { xs, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let row = node.shape[*axis] * inner;
                let mut offset = 0;
                for &x in xs {
                    let chunk = self.shape(x)[*axis] * inner;
                    let mut dx = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        dx.extend_from_slice(&dy[o * row + offset..o * row + offset + chunk]);
                    }
                    offset += chunk;
                    out.push((x, dx));
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                out.push((*a, broadcast::reduce_to(dy, &node.shape, sa, sb, |_, _| T::one())));
                out.push((*b, broadcast::reduce_to(dy, &node.shape, sb, sa, |_, _| sign)));
            }
            Op::Mul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.val(*a), self.val(*b));
                out.push((*a, broadcast::reduce_to(dy, &node.shape, sa, sb, |_, j| vb[j])));
                out.push((*b, broadcast::reduce_to(dy, &node.shape, sb, sa, |_, j| va[j])));
            }
            Op::Scale { x, c } => out.push((*x, dy.iter().map(|&g| g * *c).collect())),
            Op::Reshape { x } => out.push((*x, dy.to_vec())),
            Op::Sum { x } => out.push((*x, vec![dy[0]; numel(self.shape(*x))])),
            Op::Mean { x } => {
                let n = numel(self.shape(*x));
                out.push((*x, vec![dy[0] / T::from_usize(n.max(1)).unwrap(); n]));
            }
            Op::Bce { pred, target } => {
                let (lo, hi) = (T::lit(BCE_EPS), T::one() - T::lit(BCE_EPS));
                let scale = dy[0] / T::from_usize(target.len()).unwrap();
                let dp =
                    self.val(*pred)
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| {
                            if p < lo || p > hi {
                                T::zero()
                            } else {
                                scale * ((T::one() - t) / (T::one() - p) - t / p)
                            }
                        })
                        .collect();
                out.push((*pred, dp));
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>, shape: &[usize]) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), g)?),
    }
    Ok(())
}
