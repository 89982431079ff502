//! Reverse-mode automatic differentiation over the small operation set the
//! supernet needs.
//!
//! Model code is written once against [`Graph`]. [`Tape`] records every
//! operation so [`Tape::backward`] can replay it in reverse; [`Eager`]
//! computes values only and drops intermediates as soon as they go out of
//! scope, which keeps full-batch evaluation cheap.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, BnSaved, ConvGeom};
use crate::simplex::Normalizer;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Operation set shared by the recording and the eager backends.
pub trait Graph {
    type Value: Clone;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    /// Binds a stored parameter as a leaf.
    fn param(&mut self, store: &ParamStore, id: ParamId) -> Self::Value;

    /// Binds a constant leaf that never receives gradient.
    fn constant(&mut self, t: Tensor) -> Self::Value;

    /// Cross-correlation of `x [N,C_in,H,W]` with `kernel [C_out,C_in,k,k]` plus bias.
    fn conv2d(
        &mut self,
        x: &Self::Value,
        kernel: &Self::Value,
        bias: &Self::Value,
        stride: usize,
        pad: usize,
    ) -> Result<Self::Value>;

    /// Centered `k×k` crop of a square kernel bank.
    fn crop_kernel(&mut self, kernel: &Self::Value, k: usize) -> Result<Self::Value>;

    /// `Σ_i p_i · pad(crop(bank, sizes[i]))`: a `k_max` kernel equal to the
    /// probability blend of the bank's centered crops.
    fn blend_kernels(&mut self, bank: &Self::Value, probs: &Self::Value, sizes: &[usize]) -> Result<Self::Value>;

    fn avg_pool(&mut self, x: &Self::Value, k: usize, stride: usize, pad: usize) -> Result<Self::Value>;

    /// Batch-statistics normalization; `None` affine terms mean scale 1 / shift 0.
    fn batch_norm(
        &mut self,
        x: &Self::Value,
        scale: Option<&Self::Value>,
        shift: Option<&Self::Value>,
        eps: f64,
    ) -> Result<Self::Value>;

    fn relu(&mut self, x: &Self::Value) -> Self::Value;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn scale(&mut self, x: &Self::Value, c: f64) -> Self::Value;

    fn add_scalar(&mut self, x: &Self::Value, c: f64) -> Self::Value;

    /// Sum of all elements as a scalar.
    fn sum(&mut self, x: &Self::Value) -> Self::Value;

    /// Contiguous 1-D window `[offset, offset+len)` of the flattened tensor.
    fn slice(&mut self, x: &Self::Value, offset: usize, len: usize) -> Result<Self::Value>;

    /// Probability vector `normalizer(z / tau)`.
    fn normalize(&mut self, z: &Self::Value, normalizer: Normalizer, tau: f64) -> Result<Self::Value>;

    /// `Σ weights[idx] · term` over equally shaped terms.
    fn weighted_sum(&mut self, terms: &[(Self::Value, usize)], weights: &Self::Value) -> Result<Self::Value>;

    /// Scalar `Σ x_i c_i` against a constant vector.
    fn dot_const(&mut self, x: &Self::Value, c: &[f64]) -> Result<Self::Value>;

    /// Global average pool then affine map to logits `[N, classes]`.
    fn dense_classifier(&mut self, x: &Self::Value, weight: &Self::Value, bias: &Self::Value) -> Result<Self::Value>;

    fn cross_entropy(&mut self, logits: &Self::Value, labels: &[usize]) -> Result<Self::Value>;
}

// ---------------------------------------------------------------------------
// Shared forward implementations.

fn conv_fwd(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<(Tensor, ConvGeom)> {
    let g = kernels::conv_geometry(x.shape(), k.shape(), b.shape(), stride, pad)?;
    let out = kernels::conv2d_forward(&g, x.data(), k.data(), b.data());
    Ok((Tensor::new(g.out_shape().to_vec(), out)?, g))
}

fn crop_fwd(kernel: &Tensor, k: usize) -> Result<Tensor> {
    let s = kernel.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::shape("crop_kernel", format!("expected square rank-4 kernel, got {s:?}")));
    }
    let big = s[2];
    if k > big || (big - k) % 2 != 0 {
        return Err(Error::shape(
            "crop_kernel",
            format!("cannot center-crop extent {big} to {k}"),
        ));
    }
    let off = (big - k) / 2;
    let mut out = Vec::with_capacity(s[0] * s[1] * k * k);
    for plane in kernel.data().chunks_exact(big * big) {
        for y in 0..k {
            out.extend_from_slice(&plane[(y + off) * big + off..][..k]);
        }
    }
    Tensor::new(vec![s[0], s[1], k, k], out)
}

/// Per-position multiplier `Σ p_i` over the crops covering that tap.
fn blend_mask(big: usize, p: &[f64], sizes: &[usize]) -> Result<Vec<f64>> {
    if p.len() != sizes.len() {
        return Err(Error::shape(
            "blend_kernels",
            format!("{} probabilities for {} kernel sizes", p.len(), sizes.len()),
        ));
    }
    let mut mask = vec![0.0; big * big];
    for (&pi, &k) in p.iter().zip(sizes) {
        if k > big || k % 2 == 0 {
            return Err(Error::shape("blend_kernels", format!("crop {k} of a {big}x{big} bank")));
        }
        let off = (big - k) / 2;
        for y in off..off + k {
            for x in off..off + k {
                mask[y * big + x] += pi;
            }
        }
    }
    Ok(mask)
}

fn blend_fwd(bank: &Tensor, p: &Tensor, sizes: &[usize]) -> Result<Tensor> {
    let s = bank.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::shape("blend_kernels", format!("bank must be [C_out,C_in,k,k], got {s:?}")));
    }
    let big = s[2];
    let mask = blend_mask(big, p.data(), sizes)?;
    let mut out = bank.data().to_vec();
    for plane in out.chunks_exact_mut(big * big) {
        for (v, m) in plane.iter_mut().zip(&mask) {
            *v *= m;
        }
    }
    Tensor::new(s.to_vec(), out)
}

fn pool_fwd(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<(Tensor, ConvGeom)> {
    let g = kernels::pool_geometry(x.shape(), k, stride, pad)?;
    let out = kernels::avg_pool_forward(&g, x.data());
    Ok((Tensor::new(g.out_shape().to_vec(), out)?, g))
}

fn bn_fwd(x: &Tensor, scale: Option<&Tensor>, shift: Option<&Tensor>, eps: f64) -> Result<(Tensor, BnSaved)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape("batch_norm", format!("input must be at least rank 2, got {s:?}")));
    }
    if s[0] * s[2..].iter().product::<usize>() == 0 {
        return Err(Error::shape("batch_norm", "N·H·W must be at least 1"));
    }
    for (name, t) in [("scale", scale), ("shift", shift)] {
        if let Some(t) = t {
            if t.shape() != [s[1]] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} shape {:?} does not match channel count {}", t.shape(), s[1]),
                ));
            }
        }
    }
    let (y, saved) = kernels::batch_norm_forward(s, x.data(), scale.map(Tensor::data), shift.map(Tensor::data), eps);
    Ok((Tensor::new(s.to_vec(), y)?, saved))
}

fn relu_fwd(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

fn add_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn map_fwd(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect()).expect("shape preserved")
}

fn slice_fwd(x: &Tensor, offset: usize, len: usize) -> Result<Tensor> {
    if offset + len > x.len() || len == 0 {
        return Err(Error::shape(
            "slice",
            format!("window [{offset}, {}) outside {} elements", offset + len, x.len()),
        ));
    }
    Ok(Tensor::from_vec(x.data()[offset..offset + len].to_vec()))
}

fn normalize_fwd(z: &Tensor, normalizer: Normalizer, tau: f64) -> Result<Tensor> {
    if z.rank() != 1 {
        return Err(Error::shape("normalize", format!("expected a vector, got {:?}", z.shape())));
    }
    Ok(Tensor::from_vec(normalizer.apply(z.data(), tau)?))
}

fn weighted_sum_fwd<'a>(terms: impl Iterator<Item = (&'a Tensor, usize)>, w: &Tensor) -> Result<Tensor> {
    let mut out: Option<Tensor> = None;
    for (t, idx) in terms {
        let p = *w.data().get(idx).ok_or_else(|| {
            Error::shape("weighted_sum", format!("weight index {idx} outside {} weights", w.len()))
        })?;
        match out.as_mut() {
            None => out = Some(map_fwd(t, |v| p * v)),
            Some(acc) => {
                if acc.shape() != t.shape() {
                    return Err(Error::shape(
                        "weighted_sum",
                        format!("term shapes differ: {:?} vs {:?}", acc.shape(), t.shape()),
                    ));
                }
                for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                    *a += p * v;
                }
            }
        }
    }
    out.ok_or_else(|| Error::InvalidArgument("weighted_sum needs at least one term".into()))
}

fn dot_const_fwd(x: &Tensor, c: &[f64]) -> Result<Tensor> {
    if x.len() != c.len() {
        return Err(Error::shape("dot_const", format!("{} values vs {} constants", x.len(), c.len())));
    }
    Ok(Tensor::scalar(x.data().iter().zip(c).map(|(a, b)| a * b).sum()))
}

fn dense_fwd(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    const OP: &str = "dense_classifier";
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(OP, format!("input must be rank 4 [N,C,H,W], got {s:?}")));
    }
    if w.rank() != 2 || w.shape()[1] != s[1] {
        return Err(Error::shape(
            OP,
            format!("weight shape {:?} incompatible with C={}", w.shape(), s[1]),
        ));
    }
    if b.shape() != [w.shape()[0]] {
        return Err(Error::shape(
            OP,
            format!("bias shape {:?} incompatible with num_classes={}", b.shape(), w.shape()[0]),
        ));
    }
    let (logits, pooled) = kernels::dense_forward(s, x.data(), w.data(), b.data());
    Ok((Tensor::new(vec![s[0], w.shape()[0]], logits)?, pooled))
}

fn ce_fwd(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, Vec<f64>)> {
    const OP: &str = "cross_entropy";
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::shape(
            OP,
            format!("logits {s:?} incompatible with {} labels", labels.len()),
        ));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= s[1]) {
        return Err(Error::InvalidArgument(format!(
            "label {y} at position {i} outside [0, {})",
            s[1]
        )));
    }
    let (loss, probs) = kernels::cross_entropy_forward(logits.data(), s[1], labels);
    Ok((Tensor::scalar(loss), probs))
}

// ---------------------------------------------------------------------------
// Recording backend.

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, kernel: Var, bias: Var, geom: ConvGeom },
    Crop { src: Var, k: usize },
    Blend { bank: Var, probs: Var, sizes: Vec<usize> },
    AvgPool { x: Var, geom: ConvGeom },
    BatchNorm { x: Var, scale: Option<Var>, shift: Option<Var>, saved: BnSaved },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Sum { x: Var },
    Slice { x: Var, offset: usize },
    Normalize { z: Var, normalizer: Normalizer, tau: f64 },
    WeightedSum { terms: Vec<(Var, usize)>, weights: Var },
    DotConst { x: Var, c: Vec<f64> },
    Dense { x: Var, weight: Var, bias: Var, pooled: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
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

    /// Registers a free leaf (not bound to a parameter store).
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad, None)
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool, param: Option<ParamId>) -> Var {
        value.clear_grad();
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.ng(v));
        self.push(value, op, needs, None)
    }

    /// Propagates `∂loss/∂node` to every node in exact reverse execution order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !root.needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds every parameter leaf's gradient into
    /// the matching slot of `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].as_deref()) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (a, d) in existing.iter_mut().zip(&delta) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, kernel, bias, geom } => {
                let need = [self.ng(*x), self.ng(*kernel), self.ng(*bias)];
                let r = kernels::conv2d_backward(geom, val(*x).data(), val(*kernel).data(), g, need);
                if let Some(d) = r.dx {
                    acc(*x, d);
                }
                if let Some(d) = r.dkernel {
                    acc(*kernel, d);
                }
                if let Some(d) = r.dbias {
                    acc(*bias, d);
                }
            }
            Op::Crop { src, k } => {
                let s = val(*src).shape();
                let big = s[2];
                let off = (big - k) / 2;
                let mut d = vec![0.0; val(*src).len()];
                for (plane, gp) in d.chunks_exact_mut(big * big).zip(g.chunks_exact(k * k)) {
                    for y in 0..*k {
                        plane[(y + off) * big + off..][..*k].copy_from_slice(&gp[y * k..][..*k]);
                    }
                }
                acc(*src, d);
            }
            Op::Blend { bank, probs, sizes } => {
                let b = val(*bank);
                let big = b.shape()[2];
                let p = val(*probs).data();
                if self.ng(*bank) {
                    let mask = blend_mask(big, p, sizes).expect("validated in forward");
                    let mut d = g.to_vec();
                    for plane in d.chunks_exact_mut(big * big) {
                        for (v, m) in plane.iter_mut().zip(&mask) {
                            *v *= m;
                        }
                    }
                    acc(*bank, d);
                }
                if self.ng(*probs) {
                    let mut prod = vec![0.0; big * big];
                    for (bp, gp) in b.data().chunks_exact(big * big).zip(g.chunks_exact(big * big)) {
                        for i in 0..big * big {
                            prod[i] += bp[i] * gp[i];
                        }
                    }
                    let dp = sizes
                        .iter()
                        .map(|&k| {
                            let off = (big - k) / 2;
                            (off..off + k)
                                .map(|y| prod[y * big + off..y * big + off + k].iter().sum::<f64>())
                                .sum()
                        })
                        .collect();
                    acc(*probs, dp);
                }
            }
            Op::AvgPool { x, geom } => acc(*x, kernels::avg_pool_backward(geom, g)),
            Op::BatchNorm { x, scale, shift, saved } => {
                let sv = scale.map(|s| val(s).data());
                let (dx, dscale, dshift) = kernels::batch_norm_backward(val(*x).shape(), saved, sv, g);
                acc(*x, dx);
                if let Some(s) = scale {
                    acc(*s, dscale);
                }
                if let Some(s) = shift {
                    acc(*s, dshift);
                }
            }
            Op::Relu { x } => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(xi, gi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                acc(*x, d);
            }
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Scale { x, c } => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar { x } => acc(*x, g.to_vec()),
            Op::Sum { x } => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Slice { x, offset } => {
                let mut d = vec![0.0; val(*x).len()];
                d[*offset..*offset + g.len()].copy_from_slice(g);
                acc(*x, d);
            }
            Op::Normalize { z, normalizer, tau } => {
                acc(*z, normalizer.vjp(node.value.data(), g, *tau));
            }
            Op::WeightedSum { terms, weights } => {
                let w = val(*weights).data();
                let mut dw = vec![0.0; w.len()];
                for (t, idx) in terms {
                    let tv = val(*t).data();
                    dw[*idx] += tv.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    if self.ng(*t) {
                        acc(*t, g.iter().map(|v| v * w[*idx]).collect());
                    }
                }
                acc(*weights, dw);
            }
            Op::DotConst { x, c } => acc(*x, c.iter().map(|v| v * g[0]).collect()),
            Op::Dense { x, weight, bias, pooled } => {
                let k = val(*bias).len();
                let (dx, dw, db) = kernels::dense_backward(val(*x).shape(), pooled, val(*weight).data(), g, k);
                acc(*x, dx);
                acc(*weight, dw);
                acc(*bias, db);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = val(*logits).shape()[1];
                acc(*logits, kernels::cross_entropy_backward(probs, k, labels, g[0]));
            }
        }
    }
}

impl Graph for Tape {
    type Value = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let needs = t.requires_grad();
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("consistent tensor");
        self.push(value, Op::Leaf, needs, Some(id))
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false, None)
    }

    fn conv2d(&mut self, x: &Var, kernel: &Var, bias: &Var, stride: usize, pad: usize) -> Result<Var> {
        let (out, geom) = conv_fwd(self.value(x), self.value(kernel), self.value(bias), stride, pad)?;
        let op = Op::Conv2d {
            x: *x,
            kernel: *kernel,
            bias: *bias,
            geom,
        };
        Ok(self.record(out, op, &[*x, *kernel, *bias]))
    }

    fn crop_kernel(&mut self, kernel: &Var, k: usize) -> Result<Var> {
        if self.value(kernel).shape().get(2) == Some(&k) {
            return Ok(*kernel);
        }
        let out = crop_fwd(self.value(kernel), k)?;
        Ok(self.record(out, Op::Crop { src: *kernel, k }, &[*kernel]))
    }

    fn blend_kernels(&mut self, bank: &Var, probs: &Var, sizes: &[usize]) -> Result<Var> {
        let out = blend_fwd(self.value(bank), self.value(probs), sizes)?;
        let op = Op::Blend {
            bank: *bank,
            probs: *probs,
            sizes: sizes.to_vec(),
        };
        Ok(self.record(out, op, &[*bank, *probs]))
    }

    fn avg_pool(&mut self, x: &Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (out, geom) = pool_fwd(self.value(x), k, stride, pad)?;
        Ok(self.record(out, Op::AvgPool { x: *x, geom }, &[*x]))
    }

    fn batch_norm(&mut self, x: &Var, scale: Option<&Var>, shift: Option<&Var>, eps: f64) -> Result<Var> {
        let (out, saved) = bn_fwd(
            self.value(x),
            scale.map(|s| self.value(s)),
            shift.map(|s| self.value(s)),
            eps,
        )?;
        let mut inputs = vec![*x];
        inputs.extend(scale.copied());
        inputs.extend(shift.copied());
        let op = Op::BatchNorm {
            x: *x,
            scale: scale.copied(),
            shift: shift.copied(),
            saved,
        };
        Ok(self.record(out, op, &inputs))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let out = relu_fwd(self.value(x));
        self.record(out, Op::Relu { x: *x }, &[*x])
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = add_fwd(self.value(a), self.value(b))?;
        Ok(self.record(out, Op::Add { a: *a, b: *b }, &[*a, *b]))
    }

    fn scale(&mut self, x: &Var, c: f64) -> Var {
        let out = map_fwd(self.value(x), |v| v * c);
        self.record(out, Op::Scale { x: *x, c }, &[*x])
    }

    fn add_scalar(&mut self, x: &Var, c: f64) -> Var {
        let out = map_fwd(self.value(x), |v| v + c);
        self.record(out, Op::AddScalar { x: *x }, &[*x])
    }

    fn sum(&mut self, x: &Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.record(out, Op::Sum { x: *x }, &[*x])
    }

    fn slice(&mut self, x: &Var, offset: usize, len: usize) -> Result<Var> {
        let out = slice_fwd(self.value(x), offset, len)?;
        Ok(self.record(out, Op::Slice { x: *x, offset }, &[*x]))
    }

    fn normalize(&mut self, z: &Var, normalizer: Normalizer, tau: f64) -> Result<Var> {
        let out = normalize_fwd(self.value(z), normalizer, tau)?;
        Ok(self.record(out, Op::Normalize { z: *z, normalizer, tau }, &[*z]))
    }

    fn weighted_sum(&mut self, terms: &[(Var, usize)], weights: &Var) -> Result<Var> {
        let out = weighted_sum_fwd(terms.iter().map(|(t, i)| (self.value(t), *i)), self.value(weights))?;
        let mut inputs: Vec<Var> = terms.iter().map(|(t, _)| *t).collect();
        inputs.push(*weights);
        let op = Op::WeightedSum {
            terms: terms.to_vec(),
            weights: *weights,
        };
        Ok(self.record(out, op, &inputs))
    }

    fn dot_const(&mut self, x: &Var, c: &[f64]) -> Result<Var> {
        let out = dot_const_fwd(self.value(x), c)?;
        Ok(self.record(out, Op::DotConst { x: *x, c: c.to_vec() }, &[*x]))
    }

    fn dense_classifier(&mut self, x: &Var, weight: &Var, bias: &Var) -> Result<Var> {
        let (out, pooled) = dense_fwd(self.value(x), self.value(weight), self.value(bias))?;
        let op = Op::Dense {
            x: *x,
            weight: *weight,
            bias: *bias,
            pooled,
        };
        Ok(self.record(out, op, &[*x, *weight, *bias]))
    }

    fn cross_entropy(&mut self, logits: &Var, labels: &[usize]) -> Result<Var> {
        let (out, probs) = ce_fwd(self.value(logits), labels)?;
        let op = Op::CrossEntropy {
            logits: *logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.record(out, op, &[*logits]))
    }
}

// ---------------------------------------------------------------------------
// Value-only backend.

/// Forward-only backend; values are reference counted and freed when unused.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Graph for Eager {
    type Value = Rc<Tensor>;

    fn value<'a>(&'a self, v: &'a Rc<Tensor>) -> &'a Tensor {
        v
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Rc<Tensor> {
        let t = store.get(id);
        Rc::new(Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("consistent tensor"))
    }

    fn constant(&mut self, t: Tensor) -> Rc<Tensor> {
        Rc::new(t)
    }

    fn conv2d(&mut self, x: &Rc<Tensor>, kernel: &Rc<Tensor>, bias: &Rc<Tensor>, stride: usize, pad: usize) -> Result<Rc<Tensor>> {
        Ok(Rc::new(conv_fwd(x, kernel, bias, stride, pad)?.0))
    }

    fn crop_kernel(&mut self, kernel: &Rc<Tensor>, k: usize) -> Result<Rc<Tensor>> {
        if kernel.shape().get(2) == Some(&k) {
            return Ok(kernel.clone());
        }
        Ok(Rc::new(crop_fwd(kernel, k)?))
    }

    fn blend_kernels(&mut self, bank: &Rc<Tensor>, probs: &Rc<Tensor>, sizes: &[usize]) -> Result<Rc<Tensor>> {
        Ok(Rc::new(blend_fwd(bank, probs, sizes)?))
    }

    fn avg_pool(&mut self, x: &Rc<Tensor>, k: usize, stride: usize, pad: usize) -> Result<Rc<Tensor>> {
        Ok(Rc::new(pool_fwd(x, k, stride, pad)?.0))
    }

    fn batch_norm(&mut self, x: &Rc<Tensor>, scale: Option<&Rc<Tensor>>, shift: Option<&Rc<Tensor>>, eps: f64) -> Result<Rc<Tensor>> {
        Ok(Rc::new(bn_fwd(x, scale.map(|s| &**s), shift.map(|s| &**s), eps)?.0))
    }

    fn relu(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(relu_fwd(x))
    }

    fn add(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(add_fwd(a, b)?))
    }

    fn scale(&mut self, x: &Rc<Tensor>, c: f64) -> Rc<Tensor> {
        Rc::new(map_fwd(x, |v| v * c))
    }

    fn add_scalar(&mut self, x: &Rc<Tensor>, c: f64) -> Rc<Tensor> {
        Rc::new(map_fwd(x, |v| v + c))
    }

    fn sum(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(Tensor::scalar(x.data().iter().sum()))
    }

    fn slice(&mut self, x: &Rc<Tensor>, offset: usize, len: usize) -> Result<Rc<Tensor>> {
        Ok(Rc::new(slice_fwd(x, offset, len)?))
    }

    fn normalize(&mut self, z: &Rc<Tensor>, normalizer: Normalizer, tau: f64) -> Result<Rc<Tensor>> {
        Ok(Rc::new(normalize_fwd(z, normalizer, tau)?))
    }

    fn weighted_sum(&mut self, terms: &[(Rc<Tensor>, usize)], weights: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(weighted_sum_fwd(terms.iter().map(|(t, i)| (&**t, *i)), weights)?))
    }

    fn dot_const(&mut self, x: &Rc<Tensor>, c: &[f64]) -> Result<Rc<Tensor>> {
        Ok(Rc::new(dot_const_fwd(x, c)?))
    }

    fn dense_classifier(&mut self, x: &Rc<Tensor>, weight: &Rc<Tensor>, bias: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(dense_fwd(x, weight, bias)?.0))
    }

    fn cross_entropy(&mut self, logits: &Rc<Tensor>, labels: &[usize]) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ce_fwd(logits, labels)?.0))
    }
}
