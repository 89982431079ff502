//! Fixed network blocks shared by the supernet and materialized models.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Graph;
use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tensor};

pub(crate) fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let std = gain / (fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data)
        .expect("consistent shape")
        .with_grad()
}

/// Convolution weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub k: usize,
}

impl ConvParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            he_normal(rng, &[c_out, c_in, k, k], c_in * k * k, 2f64.sqrt()),
        );
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]).with_grad());
        Self { weight, bias, k }
    }

    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        store: &ParamStore,
        x: &G::Value,
        stride: usize,
    ) -> Result<G::Value> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, &w, &b, stride, self.k / 2)
    }
}

/// ReLU → conv → batch norm. Affine normalization terms are optional.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: ConvParams,
    pub scale: Option<ParamId>,
    pub shift: Option<ParamId>,
    pub stride: usize,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        affine: bool,
    ) -> Self {
        let conv = ConvParams::init(store, rng, &format!("{name}.conv"), c_in, c_out, k);
        let (scale, shift) = if affine {
            (
                Some(store.insert(format!("{name}.bn.scale"), Tensor::full(&[c_out], 1.0).with_grad())),
                Some(store.insert(format!("{name}.bn.shift"), Tensor::zeros(&[c_out]).with_grad())),
            )
        } else {
            (None, None)
        };
        Self {
            conv,
            scale,
            shift,
            stride,
        }
    }

    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        store: &ParamStore,
        x: &G::Value,
        eps: f64,
    ) -> Result<G::Value> {
        let a = g.relu(x);
        let c = self.conv.forward(g, store, &a, self.stride)?;
        batch_norm(g, store, &c, self.scale, self.shift, eps)
    }
}

pub(crate) fn batch_norm<G: Graph>(
    g: &mut G,
    store: &ParamStore,
    x: &G::Value,
    scale: Option<ParamId>,
    shift: Option<ParamId>,
    eps: f64,
) -> Result<G::Value> {
    let s = scale.map(|id| g.param(store, id));
    let t = shift.map(|id| g.param(store, id));
    g.batch_norm(x, s.as_ref(), t.as_ref(), eps)
}

/// Down-sampling residual block: two 3×3 conv blocks (stride 2 on the
/// first) plus a strided 1×1 shortcut; doubles the channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionBlock {
    pub conv_a: ConvBlock,
    pub conv_b: ConvBlock,
    pub shortcut: ConvParams,
}

impl ReductionBlock {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c_in: usize) -> Self {
        let c_out = 2 * c_in;
        Self {
            conv_a: ConvBlock::init(store, rng, &format!("{name}.conv_a"), c_in, c_out, 3, 2, true),
            conv_b: ConvBlock::init(store, rng, &format!("{name}.conv_b"), c_out, c_out, 3, 1, true),
            shortcut: ConvParams::init(store, rng, &format!("{name}.shortcut"), c_in, c_out, 1),
        }
    }

    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        store: &ParamStore,
        x: &G::Value,
        eps: f64,
    ) -> Result<G::Value> {
        let a = self.conv_a.forward(g, store, x, eps)?;
        let b = self.conv_b.forward(g, store, &a, eps)?;
        let s = self.shortcut.forward(g, store, x, 2)?;
        g.add(&b, &s)
    }

    pub fn param_count(c_in: usize) -> usize {
        let c_out = 2 * c_in;
        conv_param_cost(3, c_in, c_out) + 2 * c_out + conv_param_cost(3, c_out, c_out) + 2 * c_out
            + conv_param_cost(1, c_in, c_out)
    }
}

/// ReLU → global average pool → affine map to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Classifier {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, c_in: usize, classes: usize) -> Self {
        Self {
            weight: store.insert("classifier.weight", he_normal(rng, &[classes, c_in], c_in, 1.0)),
            bias: store.insert("classifier.bias", Tensor::zeros(&[classes]).with_grad()),
        }
    }

    pub fn forward<G: Graph>(&self, g: &mut G, store: &ParamStore, x: &G::Value) -> Result<G::Value> {
        let a = g.relu(x);
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.dense_classifier(&a, &w, &b)
    }

    pub fn param_count(c_in: usize, classes: usize) -> usize {
        c_in * classes + classes
    }
}

/// Scalar parameters of a `k×k` convolution with bias: `k²·C_in·C_out + C_out`.
pub fn conv_param_cost(k: usize, c_in: usize, c_out: usize) -> usize {
    k * k * c_in * c_out + c_out
}
