//! Sampling discrete architectures, retraining them with discard rules,
//! deriving size tiers and running evaluation campaigns.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Graph, Tape};
use crate::data::{BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, Optimizer, UpdateRule};
use crate::search::Bounds;
use crate::supernet::{
    batch_norm, ArchMode, Classifier, ConvBlock, ConvParams, OperationKind, ParamCostTable, ReductionBlock, Supernet,
    SupernetConfig,
};
use crate::tensor::{ParamStore, Tensor};

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == **y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// One concrete network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteArchitecture {
    pub config: SupernetConfig,
    /// `[stage][edge]`, shared by the cells of a stage.
    pub ops: Vec<Vec<OperationKind>>,
    /// `[stage][edge]` kernel size used if the edge is `ConvKxK`.
    pub kernels: Vec<Vec<usize>>,
    /// Number of cells kept per stage.
    pub depths: Vec<usize>,
}

impl DiscreteArchitecture {
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let n = c.edge_count();
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.ops.len() != c.stages || self.kernels.len() != c.stages || self.depths.len() != c.stages {
            return bad(format!("architecture lists do not cover {} stages", c.stages));
        }
        for s in 0..c.stages {
            if self.ops[s].len() != n || self.kernels[s].len() != n {
                return bad(format!("stage {s} lists do not cover {n} edges"));
            }
            if let Some(k) = self.kernels[s].iter().find(|k| !c.kernel_sizes.contains(k)) {
                return bad(format!("kernel {k} in stage {s} is not a candidate"));
            }
            let d = self.depths[s];
            if !c.depths.contains(&d) && d != c.cells_per_stage {
                return bad(format!("depth {d} in stage {s} is not a candidate"));
            }
        }
        Ok(())
    }

    /// Exact scalar parameter count.
    pub fn param_count(&self) -> usize {
        let table = ParamCostTable::new(&self.config);
        let mut total = table.fixed;
        for s in 0..self.config.stages {
            let cell: usize = self.ops[s]
                .iter()
                .zip(&self.kernels[s])
                .map(|(&op, &k)| {
                    let ki = self.config.kernel_sizes.iter().position(|&x| x == k).expect("validated");
                    table.edge_cost(s, op, ki)
                })
                .sum();
            total += cell * self.depths[s];
        }
        total
    }

    /// Compact text form, e.g. `s0:conv_kxk@5,skip_connect,...|d2;s1:...`.
    pub fn describe(&self) -> String {
        (0..self.config.stages)
            .map(|s| {
                let edges: Vec<String> = self.ops[s]
                    .iter()
                    .zip(&self.kernels[s])
                    .map(|(o, k)| match o {
                        OperationKind::ConvKxK => format!("{o}@{k}"),
                        _ => o.to_string(),
                    })
                    .collect();
                format!("s{s}:{}|d{}", edges.join(","), self.depths[s])
            })
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Index drawn with probability `p[i]`; zero entries are never chosen.
pub fn categorical<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let total: f64 = p.iter().sum();
    let r = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi <= 0.0 {
            continue;
        }
        acc += pi;
        last = i;
        if r < acc {
            return i;
        }
    }
    last
}

/// Independent categorical draws per edge operation, kernel and depth.
/// Before the size-variable phase kernels are `k_max` and every cell is kept.
pub fn sample_architecture<R: Rng>(net: &Supernet, mode: &ArchMode, rng: &mut R) -> Result<DiscreteArchitecture> {
    let c = &net.config;
    let mut ops = Vec::new();
    let mut kernels = Vec::new();
    let mut depths = Vec::new();
    for s in 0..c.stages {
        let mut so = Vec::new();
        let mut sk = Vec::new();
        for e in 0..c.edge_count() {
            let p = net.edge_probabilities(s, e, mode)?;
            so.push(OperationKind::from_index(categorical(&p, rng)).expect("five operations"));
            if mode.size_variable {
                let q = net.kernel_probabilities(s, e, mode)?;
                sk.push(c.kernel_sizes[categorical(&q, rng)]);
            } else {
                sk.push(c.k_max());
            }
        }
        ops.push(so);
        kernels.push(sk);
        if mode.size_variable {
            let r = net.depth_probabilities(s, mode)?;
            depths.push(c.depths[categorical(&r, rng)]);
        } else {
            depths.push(c.cells_per_stage);
        }
    }
    Ok(DiscreteArchitecture {
        config: c.clone(),
        ops,
        kernels,
        depths,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum DiscreteEdge {
    Zero,
    Skip,
    /// ReLU → conv → non-affine batch norm.
    Conv(ConvParams),
    Pool,
}

/// How a materialized model gets its weights.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a> {
    Fresh { seed: u64 },
    /// Diagnostic: copy the matching supernet weights (cropped bank plus
    /// the kernel's own bias).
    CopyFrom(&'a Supernet),
}

/// A standalone network with only the chosen operations.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub arch: DiscreteArchitecture,
    pub store: ParamStore,
    pub stem: ConvBlock,
    /// `[stage][cell][edge]`.
    pub cells: Vec<Vec<Vec<DiscreteEdge>>>,
    pub reductions: Vec<ReductionBlock>,
    pub classifier: Classifier,
}

/// Builds a trainable model for `arch`.
pub fn materialize(arch: &DiscreteArchitecture, init: Init<'_>) -> Result<DiscreteModel> {
    arch.validate()?;
    let c = &arch.config;
    if let Init::CopyFrom(net) = init {
        if &net.config != c {
            return Err(Error::InvalidArgument("architecture config differs from the supernet's".into()));
        }
    }
    let seed = match init {
        Init::Fresh { seed } => seed,
        Init::CopyFrom(_) => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let stem = ConvBlock::init(&mut store, &mut rng, "stem", c.input_channels, c.base_channels, 3, 1, true);
    let mut cells = Vec::new();
    let mut reductions = Vec::new();
    for s in 0..c.stages {
        let ch = c.stage_channels(s);
        let mut stage = Vec::new();
        for ci in 0..arch.depths[s] {
            let mut edges = Vec::new();
            for (e, (&op, &k)) in arch.ops[s].iter().zip(&arch.kernels[s]).enumerate() {
                let name = format!("stage{s}.cell{ci}.edge{e}");
                edges.push(match op {
                    OperationKind::Zeroise => DiscreteEdge::Zero,
                    OperationKind::SkipConnect => DiscreteEdge::Skip,
                    OperationKind::AvgPool3x3 => DiscreteEdge::Pool,
                    OperationKind::Conv1x1 => {
                        let p = ConvParams::init(&mut store, &mut rng, &format!("{name}.conv"), ch, ch, 1);
                        if let Init::CopyFrom(net) = init {
                            let src = &net.stages[s].cells[ci].edges[e].conv1x1;
                            let w = net.store.get(src.weight).data().to_vec();
                            store.get_mut(p.weight).data_mut().copy_from_slice(&w);
                            let b = net.store.get(src.bias).data().to_vec();
                            store.get_mut(p.bias).data_mut().copy_from_slice(&b);
                        }
                        DiscreteEdge::Conv(p)
                    }
                    OperationKind::ConvKxK => {
                        let p = ConvParams::init(&mut store, &mut rng, &format!("{name}.conv"), ch, ch, k);
                        if let Init::CopyFrom(net) = init {
                            let bank = &net.stages[s].cells[ci].edges[e].bank;
                            let ki = bank.kernel_sizes.iter().position(|&x| x == k).expect("validated");
                            let w = bank.effective_weight(&net.store, k)?;
                            store.get_mut(p.weight).data_mut().copy_from_slice(w.data());
                            let b = net.store.get(bank.biases[ki]).data().to_vec();
                            store.get_mut(p.bias).data_mut().copy_from_slice(&b);
                        }
                        DiscreteEdge::Conv(p)
                    }
                });
            }
            stage.push(edges);
        }
        cells.push(stage);
        if s + 1 < c.stages {
            reductions.push(ReductionBlock::init(&mut store, &mut rng, &format!("reduce{s}"), ch));
        }
    }
    let classifier = Classifier::init(&mut store, &mut rng, c.stage_channels(c.stages - 1), c.num_classes);
    if let Init::CopyFrom(net) = init {
        let fixed: Vec<(crate::tensor::ParamId, String)> = store
            .iter()
            .filter(|(_, n, _)| !n.starts_with("stage"))
            .map(|(id, n, _)| (id, n.to_string()))
            .collect();
        for (id, name) in fixed {
            let src = net
                .store
                .find(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("supernet lacks parameter {name}")))?;
            let v = net.store.get(src).data().to_vec();
            store.get_mut(id).data_mut().copy_from_slice(&v);
        }
    }
    Ok(DiscreteModel {
        arch: arch.clone(),
        store,
        stem,
        cells,
        reductions,
        classifier,
    })
}

impl DiscreteModel {
    /// Scalar count of every trainable tensor.
    pub fn param_count(&self) -> usize {
        self.store.iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn forward<G: Graph>(&self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        let c = &self.arch.config;
        let eps = c.bn_eps;
        let topo = c.topology();
        let mut h = self.stem.forward(g, &self.store, x, eps)?;
        for (s, stage) in self.cells.iter().enumerate() {
            for edges in stage {
                let mut nodes = vec![h.clone()];
                for j in 1..topo.node_count {
                    let mut acc: Option<G::Value> = None;
                    for (e, &(src, dst)) in topo.edges.iter().enumerate() {
                        if dst != j {
                            continue;
                        }
                        let xin = &nodes[src];
                        let out = match &edges[e] {
                            DiscreteEdge::Zero => continue,
                            DiscreteEdge::Skip => xin.clone(),
                            DiscreteEdge::Pool => g.avg_pool(xin, 3, 1, 1)?,
                            DiscreteEdge::Conv(p) => {
                                let a = g.relu(xin);
                                let y = p.forward(g, &self.store, &a, 1)?;
                                batch_norm(g, &self.store, &y, None, None, eps)?
                            }
                        };
                        acc = Some(match acc {
                            None => out,
                            Some(a) => g.add(&a, &out)?,
                        });
                    }
                    let node = match acc {
                        Some(v) => v,
                        None => {
                            let shape = g.value(&h).shape().to_vec();
                            g.constant(Tensor::zeros(&shape))
                        }
                    };
                    nodes.push(node);
                }
                h = nodes.pop().expect("node_count >= 2");
            }
            if let Some(r) = self.reductions.get(s) {
                h = r.forward(g, &self.store, &h, eps)?;
            }
        }
        self.classifier.forward(g, &self.store, &h)
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let (x, y) = data.all();
        let mut g = Eager;
        let xv = g.constant(x);
        let logits = self.forward(&mut g, &xv)?;
        Ok(accuracy(&logits, &y))
    }

    fn train_step(&mut self, opt: &mut Optimizer, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let logits = self.forward(&mut tape, &xv)?;
        let loss = tape.cross_entropy(&logits, labels)?;
        let value = tape.value(&loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("retraining loss {value}")));
        }
        let ids: Vec<_> = self.store.ids().collect();
        self.store.reset_grads(&ids);
        tape.backward_into(loss, &mut self.store)?;
        opt.step(&mut self.store, &ids)?;
        Ok(value)
    }
}

/// Early-discard predicates applied once, at `checkpoint_epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscardRules {
    pub checkpoint_epoch: usize,
    pub min_accuracy: f64,
    pub min_improvement: f64,
}

impl Default for DiscardRules {
    fn default() -> Self {
        Self {
            checkpoint_epoch: 20,
            min_accuracy: 0.30,
            min_improvement: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DiscardReason {
    LowAccuracy,
    NoImprovement,
}

impl DiscardRules {
    /// Decision after `epoch` (1-based) given validation accuracies for
    /// epochs `1..=history.len()`. Only the checkpoint epoch can discard.
    pub fn check(&self, epoch: usize, history: &[f64]) -> Option<DiscardReason> {
        if epoch != self.checkpoint_epoch || history.len() < epoch || epoch == 0 {
            return None;
        }
        let now = history[epoch - 1];
        if now < self.min_accuracy {
            Some(DiscardReason::LowAccuracy)
        } else if now - history[0] < self.min_improvement {
            Some(DiscardReason::NoImprovement)
        } else {
            None
        }
    }
}

/// Optimizer settings for standalone retraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub discard: DiscardRules,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: 64,
            batch_size: 64,
            lr: 0.025,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 3e-4,
            discard: DiscardRules::default(),
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("retrain epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("retrain lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainOutcome {
    pub discarded: Option<DiscardReason>,
    pub epochs_run: usize,
    pub params: usize,
    pub best_val_acc: f64,
    /// Absent for discarded models.
    pub test_acc: Option<f64>,
    pub val_history: Vec<f64>,
}

/// Trains to the epoch budget, applying the discard rules at their
/// checkpoint epoch.
pub fn retrain_with_discard(
    model: &mut DiscreteModel,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    config: &RetrainConfig,
    seed: u64,
) -> Result<RetrainOutcome> {
    config.validate()?;
    let mut stream = BatchStream::new(train.len(), config.batch_size, seed)?;
    let mut opt = Optimizer::new(
        UpdateRule::Momentum {
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        },
        config.lr,
    );
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        opt.set_lr(cosine_lr(config.lr, config.lr_min, epoch - 1, config.epochs));
        for _ in 0..stream.batches_per_pass() {
            let (x, y) = train.batch(&stream.next_indices());
            model.train_step(&mut opt, &x, &y)?;
        }
        history.push(model.accuracy(val)?);
        if let Some(reason) = config.discard.check(epoch, &history) {
            return Ok(RetrainOutcome {
                discarded: Some(reason),
                epochs_run: epoch,
                params: model.param_count(),
                best_val_acc: history.iter().copied().fold(0.0, f64::max),
                test_acc: None,
                val_history: history,
            });
        }
    }
    Ok(RetrainOutcome {
        discarded: None,
        epochs_run: config.epochs,
        params: model.param_count(),
        best_val_acc: history.iter().copied().fold(0.0, f64::max),
        test_acc: Some(model.accuracy(test)?),
        val_history: history,
    })
}

/// Sorted parameter counts of sampled architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeDistribution {
    pub sizes: Vec<usize>,
    /// Sampling seeds, one per contributing supernet.
    pub seeds: Vec<u64>,
    pub samples_per_supernet: usize,
}

impl SizeDistribution {
    pub fn new(mut sizes: Vec<usize>, seeds: Vec<u64>, samples_per_supernet: usize) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidArgument("size distribution is empty".into()));
        }
        sizes.sort_unstable();
        Ok(Self {
            sizes,
            seeds,
            samples_per_supernet,
        })
    }

    /// Nearest-rank percentile: the value at rank `ceil(p/100 · n)` (1-based, at least 1).
    pub fn percentile(&self, p: u32) -> usize {
        let n = self.sizes.len();
        let rank = (p as usize * n).div_ceil(100).max(1);
        self.sizes[rank.min(n) - 1]
    }
}

/// Draws `samples` architectures and returns their sizes.
pub fn sample_sizes(net: &Supernet, mode: &ArchMode, samples: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| sample_architecture(net, mode, &mut rng).map(|a| a.param_count()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TierName {
    S,
    M,
    L,
}

impl fmt::Display for TierName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TierName::S => "S",
            TierName::M => "M",
            TierName::L => "L",
        })
    }
}

impl FromStr for TierName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(TierName::S),
            "M" | "m" => Ok(TierName::M),
            "L" | "l" => Ok(TierName::L),
            other => Err(Error::InvalidArgument(format!("unknown tier {other:?} (S, M, L)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintTier {
    pub name: TierName,
    pub lower_pct: u32,
    pub upper_pct: u32,
    pub c_lower: f64,
    pub c_upper: f64,
}

impl ConstraintTier {
    pub fn bounds(&self) -> Bounds {
        Bounds {
            lower: self.c_lower,
            upper: self.c_upper,
        }
    }
}

/// S = (0, P20], M = [P40, P60], L = [P80, P95] by nearest rank.
pub fn derive_size_tiers(dist: &SizeDistribution) -> [ConstraintTier; 3] {
    let tier = |name, lo: u32, hi: u32| ConstraintTier {
        name,
        lower_pct: lo,
        upper_pct: hi,
        c_lower: if lo == 0 { 0.0 } else { dist.percentile(lo) as f64 },
        c_upper: dist.percentile(hi) as f64,
    };
    [tier(TierName::S, 0, 20), tier(TierName::M, 40, 60), tier(TierName::L, 80, 95)]
}

/// A searched supernet entering a campaign.
#[derive(Debug, Clone)]
pub struct CampaignInput {
    pub name: String,
    pub net: Supernet,
    pub mode: ArchMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub checkpoint: String,
    pub seed: u64,
    pub sample_id: usize,
    pub discarded: bool,
    pub params: usize,
    pub best_val_acc: f64,
    pub test_acc: Option<f64>,
    pub arch: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub sampled: usize,
    pub filtered: usize,
    pub retrained: usize,
    pub discarded: usize,
    pub mean_test_acc: Option<f64>,
    pub std_test_acc: Option<f64>,
    pub mean_params: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub rows: Vec<ReportRow>,
    pub summary: CampaignSummary,
}

/// Mean and sample standard deviation (`n − 1`; 0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

struct Job {
    checkpoint: usize,
    sample_id: usize,
    seed: u64,
    arch: DiscreteArchitecture,
}

/// Samples `samples` architectures per checkpoint, drops those outside
/// `tier`, retrains the rest and aggregates. Jobs are spread over
/// `threads` isolated workers; rows come back in (checkpoint, sample) order.
pub fn evaluation_campaign(
    inputs: &[CampaignInput],
    samples: usize,
    tier: Option<Bounds>,
    retrain: &RetrainConfig,
    data: (&Dataset, &Dataset, &Dataset),
    seed: u64,
    threads: usize,
) -> Result<CampaignReport> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one checkpoint".into()));
    }
    retrain.validate()?;
    let mut jobs = Vec::new();
    let mut sampled = 0;
    for (ci, input) in inputs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ci as u64);
        for sample_id in 0..samples {
            let arch = sample_architecture(&input.net, &input.mode, &mut rng)?;
            sampled += 1;
            if let Some(b) = tier {
                if !b.contains(arch.param_count() as f64) {
                    continue;
                }
            }
            jobs.push(Job {
                checkpoint: ci,
                sample_id,
                seed: seed ^ ((ci as u64) << 32) ^ sample_id as u64,
                arch,
            });
        }
    }
    let run = |job: &Job| -> Result<ReportRow> {
        let mut model = materialize(&job.arch, Init::Fresh { seed: job.seed })?;
        let out = retrain_with_discard(&mut model, data.0, data.1, data.2, retrain, job.seed)?;
        Ok(ReportRow {
            checkpoint: inputs[job.checkpoint].name.clone(),
            seed: job.seed,
            sample_id: job.sample_id,
            discarded: out.discarded.is_some(),
            params: out.params,
            best_val_acc: out.best_val_acc,
            test_acc: out.test_acc,
            arch: job.arch.describe(),
        })
    };
    let threads = threads.max(1).min(jobs.len().max(1));
    let mut results: Vec<(usize, Result<ReportRow>)> = if threads == 1 {
        jobs.iter().enumerate().map(|(i, j)| (i, run(j))).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let jobs = &jobs;
                    let run = &run;
                    scope.spawn(move || {
                        jobs.iter()
                            .enumerate()
                            .skip(t)
                            .step_by(threads)
                            .map(|(i, j)| (i, run(j)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };
    results.sort_by_key(|(i, _)| *i);
    let rows = results.into_iter().map(|(_, r)| r).collect::<Result<Vec<_>>>()?;
    let kept: Vec<&ReportRow> = rows.iter().filter(|r| !r.discarded).collect();
    let accs: Vec<f64> = kept.iter().filter_map(|r| r.test_acc).collect();
    let params: Vec<f64> = kept.iter().map(|r| r.params as f64).collect();
    let acc = mean_std(&accs);
    let summary = CampaignSummary {
        sampled,
        filtered: sampled - jobs.len(),
        retrained: rows.len(),
        discarded: rows.len() - kept.len(),
        mean_test_acc: acc.map(|a| a.0),
        std_test_acc: acc.map(|a| a.1),
        mean_params: mean_std(&params).map(|p| p.0),
    };
    Ok(CampaignReport { rows, summary })
}
