//! The bilevel search driver.
//!
//! Each architecture update draws a unit direction `u`, clones the network
//! into a surrogate whose active architecture group is shifted by `μ·u`,
//! trains both copies for `T` steps on the same batches, and combines the
//! validation gradients with the weight difference `(w̃ − w)/μ` into a
//! hypergradient estimate that is collinear with `u`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Graph, Tape, Var};
use crate::data::{BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, Optimizer, UpdateRule};
use crate::simplex::{AnnealSchedule, Normalizer};
use crate::supernet::{ArchMode, OperationKind, Supernet, SupernetConfig};
use crate::tensor::{ParamId, Tensor};

/// Parameter-count window `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower <= upper) || lower.is_nan() {
            return Err(Error::Config(format!("c_lower {lower} exceeds c_upper {upper}")));
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, c: f64) -> bool {
        self.lower <= c && c <= self.upper
    }
}

/// Every hyperparameter of the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Total epochs `n`.
    pub epochs: usize,
    /// First epoch of the size-variable phase, `θ`.
    pub theta: usize,
    /// Inner training steps per architecture update, `T`.
    pub inner_steps: usize,
    /// `μ = mu_scale · |α′|`.
    pub mu_scale: f64,
    pub tau: f64,
    pub anneal_factor: f64,
    pub anneal_interval: usize,
    /// `λ = lambda_scale / τ_eff`.
    pub lambda_scale: f64,
    pub c_lower: Option<f64>,
    pub c_upper: Option<f64>,
    /// Multiplier applied to raw parameter counts inside the penalty.
    pub param_scale: f64,
    pub normalizer: Normalizer,
    pub lr_w: f64,
    pub lr_w_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_alpha: f64,
    pub alpha_beta1: f64,
    pub alpha_beta2: f64,
    pub alpha_eps: f64,
    pub batch_size: usize,
    /// Stop before this epoch instead of running all `epochs`.
    pub early_stop: Option<usize>,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            theta: 20,
            inner_steps: 10,
            mu_scale: 0.005,
            tau: 1.5,
            anneal_factor: 0.75,
            anneal_interval: 5,
            lambda_scale: 15.0,
            c_lower: None,
            c_upper: None,
            param_scale: 1.0,
            normalizer: Normalizer::Sparsemax,
            lr_w: 0.025,
            lr_w_min: 0.001,
            momentum: 0.9,
            weight_decay: 3e-4,
            lr_alpha: 3e-4,
            alpha_beta1: 0.5,
            alpha_beta2: 0.999,
            alpha_eps: 1e-8,
            batch_size: 64,
            early_stop: None,
            seed: 0,
        }
    }
}

impl SearchConfig {
    /// Ten-epoch preset for small synthetic runs on one core. The
    /// temperature halves every epoch and α moves faster, so probabilities
    /// commit within the short budget.
    pub fn desk_preset() -> Self {
        Self {
            epochs: 10,
            theta: 4,
            inner_steps: 2,
            anneal_factor: 0.5,
            anneal_interval: 1,
            lr_alpha: 0.01,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.theta > self.epochs {
            return bad(format!("theta {} exceeds epochs {}", self.theta, self.epochs));
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1".into());
        }
        if !(self.mu_scale > 0.0) {
            return bad(format!("mu_scale must be positive, got {}", self.mu_scale));
        }
        if !(self.lambda_scale >= 0.0) {
            return bad(format!("lambda_scale must be non-negative, got {}", self.lambda_scale));
        }
        if !(self.param_scale > 0.0) {
            return bad(format!("param_scale must be positive, got {}", self.param_scale));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [("lr_w", self.lr_w), ("lr_alpha", self.lr_alpha)] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        self.schedule().validate()?;
        self.bounds()?;
        Ok(())
    }

    pub fn schedule(&self) -> AnnealSchedule {
        AnnealSchedule {
            tau0: self.tau,
            factor: self.anneal_factor,
            interval: self.anneal_interval,
        }
    }

    /// `None` when neither bound is set; a missing side is open.
    pub fn bounds(&self) -> Result<Option<Bounds>> {
        match (self.c_lower, self.c_upper) {
            (None, None) => Ok(None),
            (l, u) => Bounds::new(l.unwrap_or(0.0), u.unwrap_or(f64::INFINITY)).map(Some),
        }
    }

    pub fn last_epoch(&self) -> usize {
        self.early_stop.map_or(self.epochs, |e| e.min(self.epochs))
    }

    pub fn weight_rule(&self) -> UpdateRule {
        UpdateRule::Momentum {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn arch_rule(&self) -> UpdateRule {
        UpdateRule::Adam {
            beta1: self.alpha_beta1,
            beta2: self.alpha_beta2,
            eps: self.alpha_eps,
        }
    }

    pub fn mode(&self, epoch: usize) -> ArchMode {
        ArchMode::new(
            self.normalizer,
            self.schedule().effective_temperature(epoch),
            epoch >= self.theta,
        )
    }
}

/// The architecture group updated at `epoch`: α alone before `θ`, then α, β, γ.
pub fn active_arch_params(net: &Supernet, epoch: usize, theta: usize) -> Vec<ParamId> {
    net.arch_ids(epoch >= theta)
}

/// Unit vector uniform on the sphere (normalized standard normal draw).
pub fn draw_direction<R: Rng>(dim: usize, rng: &mut R) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::InvalidArgument("direction dimension must be at least 1".into()));
    }
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return Ok(v.into_iter().map(|x| x / norm).collect());
        }
    }
}

/// `λ₁·max(C − C_U, 0) + λ₂·max(C_L − C, 0)`.
pub fn penalty_value(c: f64, bounds: Option<Bounds>, lambda1: f64, lambda2: f64) -> f64 {
    match bounds {
        None => 0.0,
        Some(b) => lambda1 * (c - b.upper).max(0.0) + lambda2 * (b.lower - c).max(0.0),
    }
}

/// Penalty-augmented validation loss.
pub fn penalty_loss(val_loss: f64, c: f64, bounds: Option<Bounds>, lambda1: f64, lambda2: f64) -> f64 {
    val_loss + penalty_value(c, bounds, lambda1, lambda2)
}

/// `λ₁ = λ₂ = lambda_scale / τ_eff(epoch)`.
pub fn lambda_schedule(schedule: &AnnealSchedule, epoch: usize, lambda_scale: f64) -> (f64, f64) {
    let l = lambda_scale / schedule.effective_temperature(epoch);
    (l, l)
}

/// Zeroth-order hypergradient
/// `g = [∇_{α′}L·u + ((w̃ − w)/μ)·∇_w L] · u`.
pub fn zo_hypergradient(
    grad_arch: &[f64],
    grad_w: &[f64],
    w: &[f64],
    w_tilde: &[f64],
    u: &[f64],
    mu: f64,
) -> Result<Vec<f64>> {
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!("perturbation radius must be positive, got {mu}")));
    }
    if grad_arch.len() != u.len() || grad_w.len() != w.len() || w.len() != w_tilde.len() {
        return Err(Error::shape(
            "zo_hypergradient",
            format!(
                "arch grad {} vs u {}, weight grad {} vs w {} vs w~ {}",
                grad_arch.len(),
                u.len(),
                grad_w.len(),
                w.len(),
                w_tilde.len()
            ),
        ));
    }
    let direct: f64 = grad_arch.iter().zip(u).map(|(a, b)| a * b).sum();
    let implicit: f64 = w
        .iter()
        .zip(w_tilde)
        .zip(grad_w)
        .map(|((a, b), g)| (b - a) / mu * g)
        .sum();
    let s = direct + implicit;
    Ok(u.iter().map(|v| s * v).collect())
}

/// One descent step of the model weights on a training batch; returns the loss.
pub fn train_step(net: &mut Supernet, opt: &mut Optimizer, x: &Tensor, labels: &[usize], mode: &ArchMode) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let logits = net.forward(&mut tape, &xv, mode)?;
    let loss = tape.cross_entropy(&logits, labels)?;
    let value = tape.value(&loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    let ids = net.weight_ids().to_vec();
    net.store.reset_grads(&ids);
    tape.backward_into(loss, &mut net.store)?;
    opt.step(&mut net.store, &ids)?;
    Ok(value)
}

/// Runs `T` steps on the primary network and its surrogate over the same
/// batches in the same order. Returns the primary's mean loss.
#[allow(clippy::too_many_arguments)]
pub fn inner_train_steps(
    net: &mut Supernet,
    opt: &mut Optimizer,
    surrogate: &mut Supernet,
    surrogate_opt: &mut Optimizer,
    data: &Dataset,
    stream: &mut BatchStream,
    steps: usize,
    mode: &ArchMode,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..steps {
        let (x, y) = data.batch(&stream.next_indices());
        total += train_step(net, opt, &x, &y, mode)?;
        train_step(surrogate, surrogate_opt, &x, &y, mode)?;
    }
    Ok(total / steps as f64)
}

/// Penalized validation loss recorded on a tape.
pub struct ValLoss {
    pub tape: Tape,
    pub loss: Var,
    pub val_loss: f64,
    pub expected_params: f64,
    pub penalty: f64,
}

/// Records `L_val + λ₁·relu(s·C − C_U) + λ₂·relu(C_L − s·C)` where `s` is
/// `param_scale`. A zero penalty is left out of the graph entirely.
#[allow(clippy::too_many_arguments)]
pub fn penalized_val_loss(
    net: &Supernet,
    x: &Tensor,
    labels: &[usize],
    mode: &ArchMode,
    bounds: Option<Bounds>,
    lambdas: (f64, f64),
    param_scale: f64,
) -> Result<ValLoss> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let logits = net.forward(&mut tape, &xv, mode)?;
    let ce = tape.cross_entropy(&logits, labels)?;
    let val_loss = tape.value(&ce).item();
    let raw = net.expected_param_count(&mut tape, mode)?;
    let c = tape.scale(&raw, param_scale);
    let expected_params = tape.value(&raw).item();
    let mut loss = ce;
    let mut penalty = 0.0;
    if let Some(b) = bounds {
        let c_value = tape.value(&c).item();
        if lambdas.0 > 0.0 && c_value > b.upper {
            let over = tape.add_scalar(&c, -b.upper);
            let ramp = tape.relu(&over);
            let term = tape.scale(&ramp, lambdas.0);
            penalty += tape.value(&term).item();
            loss = tape.add(&loss, &term)?;
        }
        if lambdas.1 > 0.0 && c_value < b.lower {
            let neg = tape.scale(&c, -1.0);
            let under = tape.add_scalar(&neg, b.lower);
            let ramp = tape.relu(&under);
            let term = tape.scale(&ramp, lambdas.1);
            penalty += tape.value(&term).item();
            loss = tape.add(&loss, &term)?;
        }
    }
    Ok(ValLoss {
        tape,
        loss,
        val_loss,
        expected_params,
        penalty,
    })
}

/// One epoch's trace record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub tau_eff: f64,
    pub lambda: f64,
    pub mu: f64,
    pub expected_params: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub penalty: f64,
    /// `[stage][edge][op]`, taken at the end of the epoch.
    pub op_probs: Vec<Vec<Vec<f64>>>,
    /// `[stage][edge][kernel]`.
    pub kernel_probs: Vec<Vec<Vec<f64>>>,
    /// `[stage][depth]`.
    pub depth_probs: Vec<Vec<f64>>,
}

impl EpochRecord {
    /// Fraction of edges whose largest operation probability is at least `threshold`.
    pub fn confident_edge_fraction(&self, threshold: f64) -> f64 {
        let maxes: Vec<f64> = self
            .op_probs
            .iter()
            .flatten()
            .map(|p| p.iter().copied().fold(0.0, f64::max))
            .collect();
        maxes.iter().filter(|m| **m >= threshold).count() as f64 / maxes.len() as f64
    }
}

/// Probability snapshot of every architecture choice under `mode`.
pub fn probability_snapshot(net: &Supernet, mode: &ArchMode) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>)> {
    let cfg = &net.config;
    let mut ops = Vec::new();
    let mut kernels = Vec::new();
    let mut depths = Vec::new();
    for s in 0..cfg.stages {
        let mut so = Vec::new();
        let mut sk = Vec::new();
        for e in 0..cfg.edge_count() {
            so.push(net.edge_probabilities(s, e, mode)?);
            sk.push(net.kernel_probabilities(s, e, mode)?);
        }
        ops.push(so);
        kernels.push(sk);
        depths.push(net.depth_probabilities(s, mode)?);
    }
    Ok((ops, kernels, depths))
}

/// Everything needed to continue a search exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub net: Supernet,
    pub opt_w: Optimizer,
    pub opt_arch: Optimizer,
    pub rng: ChaCha8Rng,
    pub train_stream: BatchStream,
    pub val_stream: BatchStream,
    /// Next epoch to run.
    pub epoch: usize,
    pub trace: Vec<EpochRecord>,
}

impl SearchState {
    /// Fresh state: network weights from `seed`, direction draws and batch
    /// orders from streams derived from it.
    pub fn new(
        net_config: SupernetConfig,
        config: &SearchConfig,
        train_len: usize,
        val_len: usize,
    ) -> Result<Self> {
        config.validate()?;
        let net = Supernet::build(net_config, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            net,
            opt_w: Optimizer::new(config.weight_rule(), config.lr_w),
            opt_arch: Optimizer::new(config.arch_rule(), config.lr_alpha),
            rng,
            train_stream: BatchStream::new(train_len, config.batch_size, config.seed.wrapping_add(2))?,
            val_stream: BatchStream::new(val_len, config.batch_size, config.seed.wrapping_add(3))?,
            epoch: 0,
            trace: Vec::new(),
        })
    }
}

/// Runs the search epoch by epoch.
pub struct Searcher<'a> {
    pub config: SearchConfig,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub state: SearchState,
}

impl<'a> Searcher<'a> {
    pub fn new(net_config: SupernetConfig, config: SearchConfig, train: &'a Dataset, val: &'a Dataset) -> Result<Self> {
        check_data(&net_config, train)?;
        check_data(&net_config, val)?;
        let state = SearchState::new(net_config, &config, train.len(), val.len())?;
        Ok(Self {
            config,
            train,
            val,
            state,
        })
    }

    /// Continues from a saved state.
    pub fn resume(config: SearchConfig, train: &'a Dataset, val: &'a Dataset, state: SearchState) -> Result<Self> {
        config.validate()?;
        check_data(&state.net.config, train)?;
        check_data(&state.net.config, val)?;
        Ok(Self {
            config,
            train,
            val,
            state,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.last_epoch()
    }

    /// Architecture updates per epoch: one per `T` training batches.
    pub fn updates_per_epoch(&self) -> usize {
        (self.state.train_stream.batches_per_pass() / self.config.inner_steps).max(1)
    }

    /// Runs every remaining epoch.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// Runs one epoch. On a non-finite loss the state rolls back to the
    /// start of the epoch and an error is returned.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let snapshot = self.state.clone();
        match self.epoch_inner() {
            Ok(()) => Ok(self.state.trace.last().expect("record pushed")),
            Err(e) => {
                self.state = snapshot;
                Err(e)
            }
        }
    }

    fn epoch_inner(&mut self) -> Result<()> {
        let cfg = &self.config;
        let epoch = self.state.epoch;
        let mode = cfg.mode(epoch);
        let ids = active_arch_params(&self.state.net, epoch, cfg.theta);
        let dim = self.state.net.store.numel(&ids);
        let mu = cfg.mu_scale * dim as f64;
        let (lambdas, bounds) = if mode.size_variable {
            (lambda_schedule(&cfg.schedule(), epoch, cfg.lambda_scale), cfg.bounds()?)
        } else {
            ((0.0, 0.0), None)
        };
        let updates = self.updates_per_epoch();
        let st = &mut self.state;
        st.opt_w.set_lr(cosine_lr(cfg.lr_w, cfg.lr_w_min, epoch, cfg.epochs));
        let weight_ids = st.net.weight_ids().to_vec();
        let (mut train_sum, mut val_sum, mut pen_sum) = (0.0, 0.0, 0.0);
        for _ in 0..updates {
            let u = draw_direction(dim, &mut st.rng)?;
            let mut sur = st.net.clone();
            let mut sur_opt = st.opt_w.clone();
            let mut shifted = sur.store.flatten(&ids);
            for (a, d) in shifted.iter_mut().zip(&u) {
                *a += mu * d;
            }
            sur.store.assign_flat(&ids, &shifted)?;
            train_sum += inner_train_steps(
                &mut st.net,
                &mut st.opt_w,
                &mut sur,
                &mut sur_opt,
                self.train,
                &mut st.train_stream,
                cfg.inner_steps,
                &mode,
            )?;
            let (xv, yv) = self.val.batch(&st.val_stream.next_indices());
            let vl = penalized_val_loss(&st.net, &xv, &yv, &mode, bounds, lambdas, cfg.param_scale)?;
            if !(vl.val_loss + vl.penalty).is_finite() {
                return Err(Error::NonFinite(format!(
                    "validation loss {} with penalty {} at epoch {epoch}",
                    vl.val_loss, vl.penalty
                )));
            }
            let all: Vec<ParamId> = weight_ids.iter().chain(&ids).copied().collect();
            st.net.store.reset_grads(&all);
            vl.tape.backward_into(vl.loss, &mut st.net.store)?;
            let g = zo_hypergradient(
                &st.net.store.flatten_grad(&ids),
                &st.net.store.flatten_grad(&weight_ids),
                &st.net.store.flatten(&weight_ids),
                &sur.store.flatten(&weight_ids),
                &u,
                mu,
            )?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("hypergradient at epoch {epoch}")));
            }
            st.net.store.assign_grad_flat(&ids, &g)?;
            st.opt_arch.step(&mut st.net.store, &ids)?;
            val_sum += vl.val_loss;
            pen_sum += vl.penalty;
        }
        let (op_probs, kernel_probs, depth_probs) = probability_snapshot(&st.net, &mode)?;
        let lambda = if mode.size_variable { lambdas.0 } else { 0.0 };
        let n = updates as f64;
        st.trace.push(EpochRecord {
            epoch,
            tau_eff: mode.temperature,
            lambda,
            mu,
            expected_params: st.net.expected_param_count_value(&mode)?,
            train_loss: train_sum / n,
            val_loss: val_sum / n,
            penalty: pen_sum / n,
            op_probs,
            kernel_probs,
            depth_probs,
        });
        st.epoch += 1;
        log::info!(
            "epoch {epoch}: tau {:.4} train {:.4} val {:.4} C {:.1}",
            mode.temperature,
            train_sum / n,
            val_sum / n,
            st.trace.last().expect("pushed").expected_params
        );
        Ok(())
    }
}

fn check_data(net: &SupernetConfig, data: &Dataset) -> Result<()> {
    let [c, h, w] = data.shape;
    if c != net.input_channels || h != net.input_size || w != net.input_size {
        return Err(Error::Config(format!(
            "dataset images are {c}x{h}x{w}, network expects {}x{}x{}",
            net.input_channels, net.input_size, net.input_size
        )));
    }
    if data.num_classes != net.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, network predicts {}",
            data.num_classes, net.num_classes
        )));
    }
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    Ok(())
}

/// Classification accuracy of the supernet on a full batch.
pub fn supernet_accuracy(net: &Supernet, data: &Dataset, mode: &ArchMode) -> Result<f64> {
    let (x, y) = data.all();
    let mut g = Eager;
    let xv = g.constant(x);
    let logits = net.forward(&mut g, &xv, mode)?;
    Ok(crate::eval::accuracy(&logits, &y))
}

/// Name of an operation index, for trace export.
pub fn op_name(i: usize) -> &'static str {
    OperationKind::from_index(i).map_or("?", |o| o.name())
}
