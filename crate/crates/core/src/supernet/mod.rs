//! The searchable network.
//!
//! A stem conv block feeds `stages` stages of NAS-Bench-201 style cells.
//! Each cell is a fully connected DAG over `node_count` nodes whose edges
//! carry a probability-weighted mixture of five candidate operations.
//! Cells in a stage share their operation scores (α) and kernel scores
//! (β); each stage has depth scores (γ) that mix the outputs of its first
//! `d` cells. Stages are joined by fixed residual reduction blocks and the
//! network ends in a fixed dense classifier.

mod blocks;
mod cost;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::simplex::Normalizer;
use crate::tensor::{ParamId, ParamStore, Tensor};

pub use blocks::{conv_param_cost, Classifier, ConvBlock, ConvParams, ReductionBlock};
pub use cost::ParamCostTable;
pub(crate) use blocks::batch_norm;

/// Candidate operation on a cell edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperationKind {
    Zeroise,
    SkipConnect,
    Conv1x1,
    /// The kernel-variable convolution; a fixed `k_max × k_max` conv before
    /// the size-variable phase.
    ConvKxK,
    AvgPool3x3,
}

impl OperationKind {
    pub const ALL: [OperationKind; 5] = [
        OperationKind::Zeroise,
        OperationKind::SkipConnect,
        OperationKind::Conv1x1,
        OperationKind::ConvKxK,
        OperationKind::AvgPool3x3,
    ];

    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OperationKind::Zeroise => "none",
            OperationKind::SkipConnect => "skip_connect",
            OperationKind::Conv1x1 => "conv_1x1",
            OperationKind::ConvKxK => "conv_kxk",
            OperationKind::AvgPool3x3 => "avg_pool_3x3",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }

    pub fn is_parametric(self) -> bool {
        matches!(self, OperationKind::Conv1x1 | OperationKind::ConvKxK)
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Edges of a fully connected cell DAG, ordered by target node then source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellTopology {
    pub node_count: usize,
    pub edges: Vec<(usize, usize)>,
}

impl CellTopology {
    pub fn new(node_count: usize) -> Self {
        let mut edges = Vec::new();
        for j in 1..node_count {
            for i in 0..j {
                edges.push((i, j));
            }
        }
        Self { node_count, edges }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
}

/// Structural hyperparameters of the supernet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupernetConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub stages: usize,
    pub cells_per_stage: usize,
    pub node_count: usize,
    pub kernel_sizes: Vec<usize>,
    pub depths: Vec<usize>,
    pub bn_eps: f64,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            input_size: 28,
            num_classes: 10,
            base_channels: 16,
            stages: 3,
            cells_per_stage: 3,
            node_count: 4,
            kernel_sizes: vec![3, 5, 7],
            depths: vec![1, 2, 3],
            bn_eps: 1e-5,
        }
    }
}

impl SupernetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("input_channels", self.input_channels),
            ("input_size", self.input_size),
            ("base_channels", self.base_channels),
            ("stages", self.stages),
            ("cells_per_stage", self.cells_per_stage),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.node_count < 2 {
            return bad(format!("node_count must be at least 2, got {}", self.node_count));
        }
        if self.kernel_sizes.is_empty() {
            return bad("kernel_sizes must not be empty".into());
        }
        if !self.kernel_sizes.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!("kernel_sizes must be strictly ascending, got {:?}", self.kernel_sizes));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|k| *k % 2 == 0) {
            return bad(format!("kernel size {k} must be odd"));
        }
        if self.depths.is_empty() {
            return bad("depths must not be empty".into());
        }
        if !self.depths.windows(2).all(|w| w[0] < w[1]) || self.depths[0] == 0 {
            return bad(format!("depths must be strictly ascending and positive, got {:?}", self.depths));
        }
        let max_depth = *self.depths.last().expect("non-empty");
        if max_depth > self.cells_per_stage {
            return bad(format!(
                "max depth {max_depth} exceeds cells_per_stage {}",
                self.cells_per_stage
            ));
        }
        if !(self.bn_eps > 0.0) {
            return bad("bn_eps must be positive".into());
        }
        Ok(())
    }

    pub fn topology(&self) -> CellTopology {
        CellTopology::new(self.node_count)
    }

    pub fn edge_count(&self) -> usize {
        self.node_count * (self.node_count - 1) / 2
    }

    pub fn k_max(&self) -> usize {
        *self.kernel_sizes.last().expect("validated")
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Number of α scalars: `|S|·N·|O|`.
    pub fn alpha_len(&self) -> usize {
        self.stages * self.edge_count() * OperationKind::COUNT
    }

    pub fn beta_len(&self) -> usize {
        self.stages * self.edge_count() * self.kernel_sizes.len()
    }

    pub fn gamma_len(&self) -> usize {
        self.stages * self.depths.len()
    }
}

/// How architecture scores are turned into mixture weights for one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchMode {
    pub normalizer: Normalizer,
    pub temperature: f64,
    /// Kernel and depth mixtures active (epoch ≥ θ).
    pub size_variable: bool,
}

impl ArchMode {
    pub fn new(normalizer: Normalizer, temperature: f64, size_variable: bool) -> Self {
        Self {
            normalizer,
            temperature,
            size_variable,
        }
    }
}

/// Architecture parameter tensors: α `[S,N,|O|]`, β `[S,N,|K|]`, γ `[S,|D|]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchParams {
    pub alpha: ParamId,
    pub beta: ParamId,
    pub gamma: ParamId,
}

impl ArchParams {
    pub fn all(&self) -> [ParamId; 3] {
        [self.alpha, self.beta, self.gamma]
    }
}

/// One shared `k_max` kernel bank plus a bias per candidate kernel size.
/// Smaller kernels use the centered crop of the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    pub kernel_sizes: Vec<usize>,
    pub weight: ParamId,
    pub biases: Vec<ParamId>,
}

impl KernelBank {
    fn init<R: rand::Rng>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize, kernel_sizes: &[usize]) -> Self {
        let k_max = *kernel_sizes.last().expect("validated");
        let weight = store.insert(
            format!("{name}.weight"),
            blocks::he_normal(rng, &[channels, channels, k_max, k_max], channels * k_max * k_max, 2f64.sqrt()),
        );
        let biases = kernel_sizes
            .iter()
            .map(|k| store.insert(format!("{name}.bias_k{k}"), Tensor::zeros(&[channels]).with_grad()))
            .collect();
        Self {
            kernel_sizes: kernel_sizes.to_vec(),
            weight,
            biases,
        }
    }

    pub fn k_max(&self) -> usize {
        *self.kernel_sizes.last().expect("non-empty")
    }

    /// Centered `k×k` crop of the shared bank.
    pub fn effective_weight(&self, store: &ParamStore, k: usize) -> Result<Tensor> {
        let mut g = crate::autodiff::Eager;
        let w = g.param(store, self.weight);
        let c = g.crop_kernel(&w, k)?;
        Ok((*c).clone())
    }

    /// Mixed convolution `Σ_k p_k · conv_k(x)` with "same" padding. With
    /// `probs == None` only the largest kernel runs.
    ///
    /// The mixture is linear in the kernels, so it runs as one convolution
    /// with the blended kernel and blended bias. Probabilities that are
    /// exactly zero receive no gradient.
    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        store: &ParamStore,
        x: &G::Value,
        probs: Option<&G::Value>,
    ) -> Result<G::Value> {
        let bank = g.param(store, self.weight);
        let pad = self.k_max() / 2;
        let Some(probs) = probs else {
            let b = g.param(store, *self.biases.last().expect("non-empty"));
            return g.conv2d(x, &bank, &b, 1, pad);
        };
        let p = g.value(probs).data().to_vec();
        if p.len() != self.kernel_sizes.len() {
            return Err(Error::shape(
                "kernel_variable_conv",
                format!("{} kernel probabilities for {} kernel sizes", p.len(), self.kernel_sizes.len()),
            ));
        }
        // Trailing sizes with exactly zero probability add nothing, so the
        // blend runs inside the largest crop that still carries weight.
        let used = p.iter().rposition(|&v| v != 0.0).map_or(self.kernel_sizes.len(), |i| i + 1);
        let k_eff = self.kernel_sizes[used - 1];
        let (bank, probs_used) = if used < self.kernel_sizes.len() {
            (g.crop_kernel(&bank, k_eff)?, g.slice(probs, 0, used)?)
        } else {
            (bank, probs.clone())
        };
        let kernel = g.blend_kernels(&bank, &probs_used, &self.kernel_sizes[..used])?;
        let biases: Vec<(G::Value, usize)> = self.biases[..used]
            .iter()
            .enumerate()
            .map(|(i, &b)| (g.param(store, b), i))
            .collect();
        let bias = g.weighted_sum(&biases, &probs_used)?;
        g.conv2d(x, &kernel, &bias, 1, k_eff / 2)
    }

    /// Reference form of [`KernelBank::forward`]: one convolution per
    /// kernel size with non-zero probability, summed.
    pub fn forward_per_kernel<G: Graph>(
        &self,
        g: &mut G,
        store: &ParamStore,
        x: &G::Value,
        probs: &G::Value,
    ) -> Result<G::Value> {
        let bank = g.param(store, self.weight);
        let p = g.value(probs).data().to_vec();
        if p.len() != self.kernel_sizes.len() {
            return Err(Error::shape(
                "kernel_variable_conv",
                format!("{} kernel probabilities for {} kernel sizes", p.len(), self.kernel_sizes.len()),
            ));
        }
        let mut terms = Vec::new();
        for (i, &k) in self.kernel_sizes.iter().enumerate() {
            if p[i] == 0.0 {
                continue;
            }
            let w = g.crop_kernel(&bank, k)?;
            let b = g.param(store, self.biases[i]);
            terms.push((g.conv2d(x, &w, &b, 1, k / 2)?, i));
        }
        g.weighted_sum(&terms, probs)
    }
}

/// Parameters of one mixed edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeParams {
    pub conv1x1: ConvParams,
    pub bank: KernelBank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub edges: Vec<EdgeParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub channels: usize,
    pub cells: Vec<Cell>,
}

/// Mixture weights bound for one forward pass of a stage.
struct StageWeights<V> {
    ops: Vec<V>,
    kernels: Option<Vec<V>>,
    depth: Option<V>,
}

/// The full searchable network and all of its parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Supernet {
    pub config: SupernetConfig,
    pub store: ParamStore,
    pub stem: ConvBlock,
    pub stages: Vec<Stage>,
    pub reductions: Vec<ReductionBlock>,
    pub classifier: Classifier,
    pub arch: ArchParams,
    weight_ids: Vec<ParamId>,
}

impl Supernet {
    /// Allocates every parameter group. Weights use fan-in scaled normal
    /// draws from `seed`; biases start at zero and α, β, γ at zero.
    pub fn build(config: SupernetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c0 = config.base_channels;
        let stem = ConvBlock::init(&mut store, &mut rng, "stem", config.input_channels, c0, 3, 1, true);
        let mut stages = Vec::with_capacity(config.stages);
        let mut reductions = Vec::new();
        for s in 0..config.stages {
            let c = config.stage_channels(s);
            let cells = (0..config.cells_per_stage)
                .map(|ci| Cell {
                    edges: (0..config.edge_count())
                        .map(|e| {
                            let name = format!("stage{s}.cell{ci}.edge{e}");
                            EdgeParams {
                                conv1x1: ConvParams::init(&mut store, &mut rng, &format!("{name}.conv1x1"), c, c, 1),
                                bank: KernelBank::init(&mut store, &mut rng, &format!("{name}.bank"), c, &config.kernel_sizes),
                            }
                        })
                        .collect(),
                })
                .collect();
            stages.push(Stage { channels: c, cells });
            if s + 1 < config.stages {
                reductions.push(ReductionBlock::init(&mut store, &mut rng, &format!("reduce{s}"), c));
            }
        }
        let classifier = Classifier::init(&mut store, &mut rng, config.stage_channels(config.stages - 1), config.num_classes);
        let weight_ids: Vec<ParamId> = store.ids().collect();
        let (s, n, k, d) = (config.stages, config.edge_count(), config.kernel_sizes.len(), config.depths.len());
        let arch = ArchParams {
            alpha: store.insert("arch.alpha", Tensor::zeros(&[s, n, OperationKind::COUNT]).with_grad()),
            beta: store.insert("arch.beta", Tensor::zeros(&[s, n, k]).with_grad()),
            gamma: store.insert("arch.gamma", Tensor::zeros(&[s, d]).with_grad()),
        };
        Ok(Self {
            config,
            store,
            stem,
            stages,
            reductions,
            classifier,
            arch,
            weight_ids,
        })
    }

    /// Model weights `w` in canonical order.
    pub fn weight_ids(&self) -> &[ParamId] {
        &self.weight_ids
    }

    /// Architecture parameters active in the given phase: α alone, or α, β, γ.
    pub fn arch_ids(&self, size_variable: bool) -> Vec<ParamId> {
        if size_variable {
            self.arch.all().to_vec()
        } else {
            vec![self.arch.alpha]
        }
    }

    fn alpha_offset(&self, stage: usize, edge: usize) -> usize {
        (stage * self.config.edge_count() + edge) * OperationKind::COUNT
    }

    fn beta_offset(&self, stage: usize, edge: usize) -> usize {
        (stage * self.config.edge_count() + edge) * self.config.kernel_sizes.len()
    }

    fn gamma_offset(&self, stage: usize) -> usize {
        stage * self.config.depths.len()
    }

    fn stage_weights<G: Graph>(&self, g: &mut G, stage: usize, mode: &ArchMode) -> Result<StageWeights<G::Value>> {
        let n = self.config.edge_count();
        let alpha = g.param(&self.store, self.arch.alpha);
        let mut ops = Vec::with_capacity(n);
        for e in 0..n {
            let z = g.slice(&alpha, self.alpha_offset(stage, e), OperationKind::COUNT)?;
            ops.push(g.normalize(&z, mode.normalizer, mode.temperature)?);
        }
        if !mode.size_variable {
            return Ok(StageWeights {
                ops,
                kernels: None,
                depth: None,
            });
        }
        let beta = g.param(&self.store, self.arch.beta);
        let nk = self.config.kernel_sizes.len();
        let mut kernels = Vec::with_capacity(n);
        for e in 0..n {
            let z = g.slice(&beta, self.beta_offset(stage, e), nk)?;
            kernels.push(g.normalize(&z, mode.normalizer, mode.temperature)?);
        }
        let gamma = g.param(&self.store, self.arch.gamma);
        let z = g.slice(&gamma, self.gamma_offset(stage), self.config.depths.len())?;
        let depth = g.normalize(&z, mode.normalizer, mode.temperature)?;
        Ok(StageWeights {
            ops,
            kernels: Some(kernels),
            depth: Some(depth),
        })
    }

    /// Operation probabilities of one edge.
    pub fn edge_probabilities(&self, stage: usize, edge: usize, mode: &ArchMode) -> Result<Vec<f64>> {
        let a = self.store.get(self.arch.alpha).data();
        let off = self.alpha_offset(stage, edge);
        mode.normalizer.apply(&a[off..off + OperationKind::COUNT], mode.temperature)
    }

    /// Kernel-size probabilities of one edge (meaningful once size-variable).
    pub fn kernel_probabilities(&self, stage: usize, edge: usize, mode: &ArchMode) -> Result<Vec<f64>> {
        let b = self.store.get(self.arch.beta).data();
        let off = self.beta_offset(stage, edge);
        mode.normalizer.apply(&b[off..off + self.config.kernel_sizes.len()], mode.temperature)
    }

    /// Depth probabilities of one stage (meaningful once size-variable).
    pub fn depth_probabilities(&self, stage: usize, mode: &ArchMode) -> Result<Vec<f64>> {
        let c = self.store.get(self.arch.gamma).data();
        let off = self.gamma_offset(stage);
        mode.normalizer.apply(&c[off..off + self.config.depths.len()], mode.temperature)
    }

    /// Probability-weighted sum of the candidate operations on one edge.
    /// Operations with probability exactly zero are not evaluated.
    #[allow(clippy::too_many_arguments)]
    pub fn mixed_edge_forward<G: Graph>(
        &self,
        g: &mut G,
        x: &G::Value,
        stage: usize,
        cell: usize,
        edge: usize,
        op_probs: &G::Value,
        kernel_probs: Option<&G::Value>,
    ) -> Result<G::Value> {
        let params = &self.stages[stage].cells[cell].edges[edge];
        let eps = self.config.bn_eps;
        let p = g.value(op_probs).data().to_vec();
        if p.len() != OperationKind::COUNT {
            return Err(Error::shape(
                "mixed_edge",
                format!("{} operation probabilities, expected {}", p.len(), OperationKind::COUNT),
            ));
        }
        let mut terms = Vec::with_capacity(OperationKind::COUNT);
        for op in OperationKind::ALL {
            if p[op.index()] == 0.0 {
                continue;
            }
            let out = match op {
                OperationKind::Zeroise => continue,
                OperationKind::SkipConnect => x.clone(),
                OperationKind::Conv1x1 => {
                    let a = g.relu(x);
                    let c = params.conv1x1.forward(g, &self.store, &a, 1)?;
                    g.batch_norm(&c, None, None, eps)?
                }
                OperationKind::ConvKxK => {
                    let a = g.relu(x);
                    let c = params.bank.forward(g, &self.store, &a, kernel_probs)?;
                    g.batch_norm(&c, None, None, eps)?
                }
                OperationKind::AvgPool3x3 => g.avg_pool(x, 3, 1, 1)?,
            };
            terms.push((out, op.index()));
        }
        if terms.is_empty() {
            let shape = g.value(x).shape().to_vec();
            return Ok(g.constant(Tensor::zeros(&shape)));
        }
        g.weighted_sum(&terms, op_probs)
    }

    fn cell_forward<G: Graph>(
        &self,
        g: &mut G,
        x: &G::Value,
        stage: usize,
        cell: usize,
        weights: &StageWeights<G::Value>,
    ) -> Result<G::Value> {
        let topo = self.config.topology();
        let mut nodes: Vec<G::Value> = vec![x.clone()];
        for j in 1..topo.node_count {
            let mut acc: Option<G::Value> = None;
            for (e, &(src, dst)) in topo.edges.iter().enumerate() {
                if dst != j {
                    continue;
                }
                let kp = weights.kernels.as_ref().map(|k| &k[e]);
                let out = self.mixed_edge_forward(g, &nodes[src], stage, cell, e, &weights.ops[e], kp)?;
                acc = Some(match acc {
                    None => out,
                    Some(a) => g.add(&a, &out)?,
                });
            }
            nodes.push(acc.expect("every node past the input has an incoming edge"));
        }
        Ok(nodes.pop().expect("node_count >= 2"))
    }

    /// Runs a stage's cells in sequence. When depth mixing is active the
    /// output is `Σ_d p_d · output_d`; otherwise the last cell's output.
    /// Cells past the deepest depth with non-zero probability are skipped.
    fn stage_forward<G: Graph>(
        &self,
        g: &mut G,
        x: &G::Value,
        stage: usize,
        weights: &StageWeights<G::Value>,
    ) -> Result<G::Value> {
        let Some(depth) = weights.depth.as_ref() else {
            let mut h = x.clone();
            for c in 0..self.config.cells_per_stage {
                h = self.cell_forward(g, &h, stage, c, weights)?;
            }
            return Ok(h);
        };
        let p = g.value(depth).data().to_vec();
        let depths = &self.config.depths;
        let deepest = depths
            .iter()
            .zip(&p)
            .filter(|(_, pi)| **pi > 0.0)
            .map(|(d, _)| *d)
            .max()
            .expect("probabilities sum to one");
        let mut h = x.clone();
        let mut terms = Vec::new();
        for c in 0..deepest {
            h = self.cell_forward(g, &h, stage, c, weights)?;
            if let Some(i) = depths.iter().position(|&d| d == c + 1) {
                if p[i] > 0.0 {
                    terms.push((h.clone(), i));
                }
            }
        }
        g.weighted_sum(&terms, depth)
    }

    /// Depth-mixed stage output with externally supplied weights; `None`
    /// depth weights run every cell.
    pub fn stage_forward_depth_mixed<G: Graph>(
        &self,
        g: &mut G,
        x: &G::Value,
        stage: usize,
        mode: &ArchMode,
        depth_probs: Option<&G::Value>,
    ) -> Result<G::Value> {
        let mut w = self.stage_weights(g, stage, mode)?;
        w.depth = depth_probs.cloned();
        self.stage_forward(g, x, stage, &w)
    }

    /// Output of every cell of a stage run in sequence (no mixing).
    pub fn stage_cell_outputs<G: Graph>(
        &self,
        g: &mut G,
        x: &G::Value,
        stage: usize,
        mode: &ArchMode,
    ) -> Result<Vec<G::Value>> {
        let w = self.stage_weights(g, stage, mode)?;
        let mut h = x.clone();
        let mut outs = Vec::new();
        for c in 0..self.config.cells_per_stage {
            h = self.cell_forward(g, &h, stage, c, &w)?;
            outs.push(h.clone());
        }
        Ok(outs)
    }

    /// Stem output, which is the input of the first stage.
    pub fn stem_forward<G: Graph>(&self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        self.stem.forward(g, &self.store, x, self.config.bn_eps)
    }

    /// Logits `[N, num_classes]`.
    pub fn forward<G: Graph>(&self, g: &mut G, x: &G::Value, mode: &ArchMode) -> Result<G::Value> {
        let eps = self.config.bn_eps;
        let mut h = self.stem_forward(g, x)?;
        for s in 0..self.config.stages {
            let w = self.stage_weights(g, s, mode)?;
            h = self.stage_forward(g, &h, s, &w)?;
            if let Some(r) = self.reductions.get(s) {
                h = r.forward(g, &self.store, &h, eps)?;
            }
        }
        self.classifier.forward(g, &self.store, &h)
    }

    pub fn cost_table(&self) -> ParamCostTable {
        ParamCostTable::new(&self.config)
    }

    /// Expected parameter count `C`, differentiable with respect to α, β, γ.
    pub fn expected_param_count<G: Graph>(&self, g: &mut G, mode: &ArchMode) -> Result<G::Value> {
        let table = self.cost_table();
        let mut total: Option<G::Value> = None;
        for s in 0..self.config.stages {
            let w = self.stage_weights(g, s, mode)?;
            let stage_cost = table.stage_expectation(g, s, &w.ops, w.kernels.as_deref(), w.depth.as_ref())?;
            total = Some(match total {
                None => stage_cost,
                Some(t) => g.add(&t, &stage_cost)?,
            });
        }
        let total = total.expect("at least one stage");
        Ok(g.add_scalar(&total, table.fixed as f64))
    }

    /// Expected parameter count as a plain number.
    pub fn expected_param_count_value(&self, mode: &ArchMode) -> Result<f64> {
        let mut g = crate::autodiff::Eager;
        Ok(self.expected_param_count(&mut g, mode)?.item())
    }

    /// Count of every allocated weight scalar (excluding α, β, γ).
    pub fn weight_count(&self) -> usize {
        self.store.numel(&self.weight_ids)
    }
}

#[cfg(test)]
mod tests;
