use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{apply_bn_updates, Graph, Mode};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};
use crate::zoo::{accuracy, predict, refresh_bn_stats, Checkpoint, CheckpointMeta};

const BN_MOMENTUM: f64 = 0.1;
const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Sgd,
    Sam,
    Asam,
    Gsam,
    Agsam,
    Looksam,
    Wasam,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::Sgd => "sgd",
            Rule::Sam => "sam",
            Rule::Asam => "asam",
            Rule::Gsam => "gsam",
            Rule::Agsam => "agsam",
            Rule::Looksam => "looksam",
            Rule::Wasam => "wasam",
        }
    }

    fn adaptive(self) -> bool {
        matches!(self, Rule::Asam | Rule::Agsam)
    }
}

/// Step-decay learning-rate schedule: lr(epoch) = lr0 divided by every
/// divisor whose decay epoch has been reached. Empty decay list = constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub lr0: f64,
    #[serde(default)]
    pub decays: Vec<(usize, f64)>,
}

pub fn lr_at(schedule: &Schedule, epoch: usize) -> f64 {
    let mut lr = schedule.lr0;
    for &(e, d) in &schedule.decays {
        if epoch >= e {
            lr /= d;
        }
    }
    lr
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub rule: Rule,
    pub schedule: Schedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "default_alpha_gsam")]
    pub alpha_gsam: f64,
    #[serde(default = "default_looksam_k")]
    pub looksam_k: usize,
    #[serde(default = "default_looksam_warmup")]
    pub looksam_warmup: usize,
    #[serde(default = "default_looksam_alpha")]
    pub looksam_alpha: f64,
    #[serde(default = "default_swa_window")]
    pub swa_window: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_alpha_gsam() -> f64 {
    0.15
}
fn default_looksam_k() -> usize {
    5
}
fn default_looksam_warmup() -> usize {
    3
}
fn default_looksam_alpha() -> f64 {
    0.7
}
fn default_swa_window() -> f64 {
    0.25
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.schedule.lr0 > 0.0) {
            return Err(Error::InvalidSpec(format!("lr0 {} must be positive", self.schedule.lr0)));
        }
        if self.rho < 0.0 {
            return Err(Error::InvalidSpec(format!("rho {} must be >= 0", self.rho)));
        }
        if self.looksam_k < 1 {
            return Err(Error::InvalidSpec("looksam period k must be >= 1".into()));
        }
        if !(self.swa_window > 0.0 && self.swa_window <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "swa window {} outside (0,1]",
                self.swa_window
            )));
        }
        Ok(())
    }

    fn base(rule: Rule, rho: f64) -> OptimizerSpec {
        OptimizerSpec {
            rule,
            schedule: Schedule { lr0: 0.1, decays: vec![(50, 10.0), (100, 10.0)] },
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            rho,
            alpha_gsam: default_alpha_gsam(),
            looksam_k: default_looksam_k(),
            looksam_warmup: default_looksam_warmup(),
            looksam_alpha: default_looksam_alpha(),
            swa_window: default_swa_window(),
        }
    }
}

/// Named hyperparameter presets. The `l-` prefix marks the large-radius
/// variants; `l-sam-alt` carries the alternative 0.3 radius that circulates
/// for large-radius SAM alongside the tabulated 0.4.
pub fn optimizer_preset(name: &str) -> Option<OptimizerSpec> {
    let spec = match name {
        "sgd" => OptimizerSpec::base(Rule::Sgd, 0.0),
        "sam" => OptimizerSpec::base(Rule::Sam, 0.05),
        "l-sam" => OptimizerSpec::base(Rule::Sam, 0.4),
        "l-sam-alt" => OptimizerSpec::base(Rule::Sam, 0.3),
        "gsam" => OptimizerSpec::base(Rule::Gsam, 0.05),
        "l-gsam" => OptimizerSpec::base(Rule::Gsam, 0.2),
        "asam" => OptimizerSpec::base(Rule::Asam, 0.5),
        "l-asam" => OptimizerSpec::base(Rule::Asam, 3.0),
        "agsam" => OptimizerSpec::base(Rule::Agsam, 0.5),
        "l-agsam" => OptimizerSpec::base(Rule::Agsam, 4.0),
        "looksam" => OptimizerSpec::base(Rule::Looksam, 0.05),
        "l-looksam" => OptimizerSpec::base(Rule::Looksam, 0.3),
        "wasam" => OptimizerSpec::base(Rule::Wasam, 0.05),
        "l-wasam" => OptimizerSpec::base(Rule::Wasam, 0.4),
        _ => return None,
    };
    Some(spec)
}

pub struct OptimizerState<S: Scalar> {
    pub momentum: Vec<Tensor<S>>,
    pub step: u64,
    pub passes: u64,
    look_gv: Option<Vec<Tensor<S>>>,
    look_gnorm: f64,
    pub swa: SwaState,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &ParamSet<S>) -> Self {
        OptimizerState {
            momentum: params.zeros_like(),
            step: 0,
            passes: 0,
            look_gv: None,
            look_gnorm: 0.0,
            swa: SwaState::new(),
        }
    }
}

/// Momentum SGD with decoupled-nothing, classic composition: the weight-decay
/// term joins the gradient before the momentum buffer.
pub fn sgd_step<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &[Tensor<S>],
    state: &mut OptimizerState<S>,
    lr: f64,
    mu: f64,
    wd: f64,
) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(Error::NonFinite {
                node: format!("gradient for {}", params.entry(i).name),
            });
        }
    }
    let (lr_s, mu_s, wd_s) = (S::from_f64(lr), S::from_f64(mu), S::from_f64(wd));
    for i in 0..params.len() {
        if !params.entry(i).trainable {
            continue;
        }
        let m = &mut state.momentum[i];
        for ((mv, gv), wv) in m
            .data_mut()
            .iter_mut()
            .zip(grads[i].data())
            .zip(params.entry(i).tensor.data())
        {
            *mv = *mv * mu_s + (*gv + wd_s * *wv);
        }
        params.entry_mut(i).tensor.add_scaled(&state.momentum[i], -lr_s);
    }
    Ok(())
}

/// Ascent offset with ||eps|| = rho. The adaptive variant rescales by the
/// elementwise weight magnitude before normalizing, so flat directions in
/// large weights get proportionally larger excursions.
pub fn sam_perturbation<S: Scalar>(
    params: &ParamSet<S>,
    grads: &[Tensor<S>],
    rho: f64,
    adaptive: bool,
) -> Result<Vec<Tensor<S>>> {
    let mut eps = params.zeros_like();
    if adaptive {
        let mut norm_sq = 0.0f64;
        for (i, g) in grads.iter().enumerate() {
            if !params.entry(i).trainable {
                continue;
            }
            let w = &params.entry(i).tensor;
            for (gv, wv) in g.data().iter().zip(w.data()) {
                let t = wv.to_f64().abs() * gv.to_f64();
                norm_sq += t * t;
            }
        }
        let norm = norm_sq.sqrt();
        if norm == 0.0 {
            return Err(Error::GradientVanished);
        }
        for (i, g) in grads.iter().enumerate() {
            if !params.entry(i).trainable {
                continue;
            }
            let w = params.entry(i).tensor.clone();
            for ((e, gv), wv) in eps[i].data_mut().iter_mut().zip(g.data()).zip(w.data()) {
                let wa = wv.to_f64().abs();
                *e = S::from_f64(rho * wa * wa * gv.to_f64() / norm);
            }
        }
    } else {
        let mut norm_sq = 0.0f64;
        for (i, g) in grads.iter().enumerate() {
            if !params.entry(i).trainable {
                continue;
            }
            for gv in g.data() {
                let t = gv.to_f64();
                norm_sq += t * t;
            }
        }
        let norm = norm_sq.sqrt();
        if norm == 0.0 {
            return Err(Error::GradientVanished);
        }
        for (i, g) in grads.iter().enumerate() {
            if !params.entry(i).trainable {
                continue;
            }
            for (e, gv) in eps[i].data_mut().iter_mut().zip(g.data()) {
                *e = S::from_f64(rho * gv.to_f64() / norm);
            }
        }
    }
    Ok(eps)
}

fn dot_all<S: Scalar>(a: &[Tensor<S>], b: &[Tensor<S>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn norm_all<S: Scalar>(a: &[Tensor<S>]) -> f64 {
    dot_all(a, a).sqrt()
}

/// g1 - alpha * (g0 - proj_{g1} g0): keep the ascent-point gradient, subtract
/// the part of the base gradient orthogonal to it.
pub fn gsam_direction<S: Scalar>(
    g0: &[Tensor<S>],
    g1: &[Tensor<S>],
    alpha: f64,
) -> Result<Vec<Tensor<S>>> {
    let g1_sq = dot_all(g1, g1);
    if g1_sq == 0.0 {
        return Err(Error::GradientVanished);
    }
    let proj = dot_all(g0, g1) / g1_sq;
    let mut out = Vec::with_capacity(g0.len());
    for (a, b) in g0.iter().zip(g1) {
        let d = b.zip(a, |g1v, g0v| {
            let orth = g0v.to_f64() - proj * g1v.to_f64();
            S::from_f64(g1v.to_f64() - alpha * orth)
        })?;
        out.push(d);
    }
    Ok(out)
}

pub struct StepOutcome<S: Scalar> {
    pub loss: f64,
    pub grads: Vec<Tensor<S>>,
}

struct SavedTrainable<S: Scalar> {
    tensors: Vec<(usize, Tensor<S>)>,
}

fn save_trainable<S: Scalar>(params: &ParamSet<S>) -> SavedTrainable<S> {
    SavedTrainable {
        tensors: params
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, e)| (i, e.tensor.clone()))
            .collect(),
    }
}

fn restore_trainable<S: Scalar>(params: &mut ParamSet<S>, saved: &SavedTrainable<S>) {
    for (i, t) in &saved.tensors {
        params.entry_mut(*i).tensor = t.clone();
    }
}

fn add_offset<S: Scalar>(params: &mut ParamSet<S>, eps: &[Tensor<S>]) {
    for i in 0..params.len() {
        if params.entry(i).trainable {
            params.entry_mut(i).tensor.add_scaled(&eps[i], S::ONE);
        }
    }
}

/// One optimizer step on one mini-batch. Returns the loss and gradient at the
/// unperturbed weights. Batch-norm running statistics update once per step,
/// from the unperturbed pass; the ascent-point pass normalizes with its own
/// batch statistics but leaves the running estimates alone.
pub fn sam_family_step<S: Scalar>(
    graph: &Graph,
    params: &mut ParamSet<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    spec: &OptimizerSpec,
    state: &mut OptimizerState<S>,
    lr: f64,
    epoch: usize,
) -> Result<StepOutcome<S>> {
    let fwd = graph.forward(params, x, Some(y), Mode::Train)?;
    let loss0 = fwd.loss.unwrap();
    let (g0, _) = graph.backward(params, Some(y), &fwd, false)?;
    state.passes += 1;
    apply_bn_updates(params, &fwd.bn_updates, BN_MOMENTUM);
    drop(fwd);

    let step_index = state.step;
    state.step += 1;

    let rho = spec.rho;
    let plain_sgd = matches!(spec.rule, Rule::Sgd) || rho == 0.0;
    if plain_sgd {
        sgd_step(params, &g0, state, lr, spec.momentum, spec.weight_decay)?;
        return Ok(StepOutcome { loss: loss0, grads: g0 });
    }

    match spec.rule {
        Rule::Sgd => unreachable!(),
        Rule::Sam | Rule::Asam | Rule::Wasam => {
            let eps = sam_perturbation(params, &g0, rho, spec.rule.adaptive())?;
            let saved = save_trainable(params);
            add_offset(params, &eps);
            let (_, g1) = ascent_point_grad(graph, params, x, y, state)?;
            restore_trainable(params, &saved);
            sgd_step(params, &g1, state, lr, spec.momentum, spec.weight_decay)?;
        }
        Rule::Gsam | Rule::Agsam => {
            let eps = sam_perturbation(params, &g0, rho, spec.rule.adaptive())?;
            let saved = save_trainable(params);
            add_offset(params, &eps);
            let (_, g1) = ascent_point_grad(graph, params, x, y, state)?;
            restore_trainable(params, &saved);
            if spec.alpha_gsam == 0.0 {
                sgd_step(params, &g1, state, lr, spec.momentum, spec.weight_decay)?;
            } else {
                let d = gsam_direction(&g0, &g1, spec.alpha_gsam)?;
                sgd_step(params, &d, state, lr, spec.momentum, spec.weight_decay)?;
            }
        }
        Rule::Looksam => {
            let full_step = epoch < spec.looksam_warmup || step_index % spec.looksam_k as u64 == 0;
            if full_step {
                let eps = sam_perturbation(params, &g0, rho, false)?;
                let saved = save_trainable(params);
                add_offset(params, &eps);
                let (_, g1) = ascent_point_grad(graph, params, x, y, state)?;
                restore_trainable(params, &saved);
                let g0_norm = norm_all(&g0);
                let g0_sq = g0_norm * g0_norm;
                let proj = if g0_sq == 0.0 { 0.0 } else { dot_all(&g1, &g0) / g0_sq };
                let mut gv = Vec::with_capacity(g1.len());
                for (a, b) in g1.iter().zip(&g0) {
                    gv.push(a.zip(b, |g1v, g0v| {
                        S::from_f64(g1v.to_f64() - proj * g0v.to_f64())
                    })?);
                }
                state.look_gv = Some(gv);
                state.look_gnorm = norm_all(&g1);
                sgd_step(params, &g1, state, lr, spec.momentum, spec.weight_decay)?;
            } else {
                let gv = state
                    .look_gv
                    .as_ref()
                    .ok_or_else(|| Error::Run("looksam reuse before any full step".into()))?;
                let gv_norm = norm_all(gv);
                let scale = if gv_norm == 0.0 {
                    0.0
                } else {
                    spec.looksam_alpha * norm_all(&g0) / gv_norm
                };
                let scale_s = S::from_f64(scale);
                let mut d = Vec::with_capacity(g0.len());
                for (a, b) in g0.iter().zip(gv) {
                    d.push(a.zip(b, |g0v, gvv| g0v + scale_s * gvv)?);
                }
                sgd_step(params, &d, state, lr, spec.momentum, spec.weight_decay)?;
            }
        }
    }
    Ok(StepOutcome { loss: loss0, grads: g0 })
}

fn ascent_point_grad<S: Scalar>(
    graph: &Graph,
    params: &ParamSet<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    state: &mut OptimizerState<S>,
) -> Result<(f64, Vec<Tensor<S>>)> {
    let fwd = graph.forward(params, x, Some(y), Mode::Train)?;
    let loss = fwd.loss.unwrap();
    let (g, _) = graph.backward(params, Some(y), &fwd, false)?;
    state.passes += 1;
    Ok((loss, g))
}

// ---- stochastic weight averaging ----

/// Running arithmetic mean of full parameter sets, accumulated in 64-bit.
pub struct SwaState {
    sums: Vec<Tensor<f64>>,
    pub count: u64,
}

impl SwaState {
    pub fn new() -> Self {
        SwaState { sums: Vec::new(), count: 0 }
    }
}

impl Default for SwaState {
    fn default() -> Self {
        Self::new()
    }
}

pub fn swa_accumulate<S: Scalar>(state: &mut SwaState, params: &ParamSet<S>) {
    if state.sums.is_empty() {
        state.sums = params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape()))
            .collect();
    }
    for (sum, e) in state.sums.iter_mut().zip(params.entries()) {
        for (s, v) in sum.data_mut().iter_mut().zip(e.tensor.data()) {
            *s += v.to_f64();
        }
    }
    state.count += 1;
}

/// Mean of the accumulated parameter sets with batch-norm statistics rebuilt
/// over the supplied data.
pub fn swa_finalize<S: Scalar>(
    state: &SwaState,
    graph: &Graph,
    template: &ParamSet<S>,
    data: &Tensor<S>,
    refresh_fraction: f64,
) -> Result<ParamSet<S>> {
    if state.count == 0 {
        return Err(Error::Run("weight averaging finalized with no accumulated checkpoints".into()));
    }
    let mut out = template.clone();
    let inv = 1.0 / state.count as f64;
    for (i, sum) in state.sums.iter().enumerate() {
        let dst = out.entry_mut(i);
        for (d, s) in dst.tensor.data_mut().iter_mut().zip(sum.data()) {
            *d = S::from_f64(s * inv);
        }
    }
    refresh_bn_stats(graph, &mut out, data, refresh_fraction)?;
    Ok(out)
}

/// Mean without the batch-norm refresh, for callers that refresh separately.
pub fn swa_mean<S: Scalar>(state: &SwaState, template: &ParamSet<S>) -> Result<ParamSet<S>> {
    if state.count == 0 {
        return Err(Error::Run("weight averaging finalized with no accumulated checkpoints".into()));
    }
    let mut out = template.clone();
    let inv = 1.0 / state.count as f64;
    for (i, sum) in state.sums.iter().enumerate() {
        let dst = out.entry_mut(i);
        for (d, s) in dst.tensor.data_mut().iter_mut().zip(sum.data()) {
            *d = S::from_f64(s * inv);
        }
    }
    Ok(out)
}

// ---- training loop ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
    pub wallclock_s: f64,
    pub fwdbwd_passes: u64,
}

#[derive(Debug)]
pub struct TrainOutput<S: Scalar> {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoints: Vec<Checkpoint>,
    pub swa_params: Option<ParamSet<S>>,
    pub passes: u64,
}

pub struct IterObservation<'a, S: Scalar> {
    pub epoch: usize,
    pub iter: usize,
    pub graph: &'a Graph,
    pub params_before: &'a ParamSet<S>,
    pub params_after: &'a ParamSet<S>,
    pub grads_before: &'a [Tensor<S>],
    pub loss_before: f64,
    pub x: &'a Tensor<S>,
    pub y: &'a Tensor<S>,
}

/// Per-iteration and per-epoch instrumentation plus optional batch rewriting.
/// `transform_batch` returns the batch to train on and the number of extra
/// model passes it spent, which count toward the run's training cost.
pub trait TrainObserver<S: Scalar> {
    fn wants_iteration(&self, _epoch: usize, _iter: usize) -> bool {
        false
    }
    fn on_iteration(&mut self, _obs: &IterObservation<'_, S>) -> Result<()> {
        Ok(())
    }
    fn on_epoch_end(&mut self, _epoch: usize, _graph: &Graph, _params: &ParamSet<S>) -> Result<()> {
        Ok(())
    }
    fn transform_batch(
        &mut self,
        _epoch: usize,
        _iter: usize,
        _graph: &Graph,
        _params: &ParamSet<S>,
        x: Tensor<S>,
        y: Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>, u64)> {
        Ok((x, y, 0))
    }
}

pub struct NoopObserver;

impl<S: Scalar> TrainObserver<S> for NoopObserver {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Fraction of the training data used for the SWA batch-norm refresh.
    #[serde(default = "default_refresh_fraction")]
    pub refresh_fraction: f64,
}

fn default_checkpoint_every() -> usize {
    1
}
fn default_refresh_fraction() -> f64 {
    1.0
}

fn eval_accuracy_chunked<S: Scalar>(
    graph: &Graph,
    params: &ParamSet<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
) -> Result<f64> {
    let n = x.shape()[0];
    let per = x.shape()[1..].to_vec();
    let mut correct = 0.0f64;
    let mut start = 0usize;
    while start < n {
        let end = (start + 256).min(n);
        let rows: Vec<&[S]> = (start..end).map(|i| x.example(i)).collect();
        let bx = Tensor::stack(&per, &rows)?;
        let yrows: Vec<&[S]> = (start..end).map(|i| y.example(i)).collect();
        let by = Tensor::stack(&y.shape()[1..].to_vec(), &yrows)?;
        let logits = predict(graph, params, &bx, Mode::Eval)?;
        correct += accuracy(&logits, &by) * (end - start) as f64;
        start = end;
    }
    Ok(correct / n as f64)
}

fn gather_batch<S: Scalar>(
    x: &Tensor<S>,
    y: &Tensor<S>,
    idx: &[usize],
) -> Result<(Tensor<S>, Tensor<S>)> {
    let xr: Vec<&[S]> = idx.iter().map(|&i| x.example(i)).collect();
    let yr: Vec<&[S]> = idx.iter().map(|&i| y.example(i)).collect();
    Ok((
        Tensor::stack(&x.shape()[1..].to_vec(), &xr)?,
        Tensor::stack(&y.shape()[1..].to_vec(), &yr)?,
    ))
}

/// Full training run: seeded shuffling, per-epoch metrics and checkpoints,
/// weight averaging for the rules that carry it. Deterministic in the seed.
#[allow(clippy::too_many_arguments)]
pub fn train<S: Scalar>(
    graph: &Graph,
    params: &mut ParamSet<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    eval: Option<(&Tensor<S>, &Tensor<S>)>,
    opt: &OptimizerSpec,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<S>,
) -> Result<TrainOutput<S>> {
    opt.validate()?;
    if cfg.epochs < 1 || cfg.batch_size < 1 {
        return Err(Error::InvalidSpec("epochs and batch size must be >= 1".into()));
    }
    let n = x.shape()[0];
    if y.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            context: "train labels".into(),
            expected: vec![n],
            got: y.shape().to_vec(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(params);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();
    let swa_active = matches!(opt.rule, Rule::Wasam);
    let swa_start = cfg.epochs - ((opt.swa_window * cfg.epochs as f64).ceil() as usize).clamp(1, cfg.epochs);
    let started = Instant::now();
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(&opt.schedule, epoch);
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut iters = 0usize;
        for (iter, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let (bx, by) = gather_batch(x, y, chunk)?;
            let (bx, by, extra) =
                observer.transform_batch(epoch, iter, graph, params, bx, by)?;
            state.passes += extra;
            let observing = observer.wants_iteration(epoch, iter);
            let before = if observing { Some(params.clone()) } else { None };
            let out = sam_family_step(graph, params, &bx, &by, opt, &mut state, lr, epoch)?;
            if out.loss > DIVERGENCE_LOSS {
                return Err(Error::Diverged { epoch, loss: out.loss });
            }
            if let Some(before) = before {
                observer.on_iteration(&IterObservation {
                    epoch,
                    iter,
                    graph,
                    params_before: &before,
                    params_after: params,
                    grads_before: &out.grads,
                    loss_before: out.loss,
                    x: &bx,
                    y: &by,
                })?;
            }
            loss_sum += out.loss;
            iters += 1;
        }

        if swa_active && epoch >= swa_start {
            swa_accumulate(&mut state.swa, params);
        }
        observer.on_epoch_end(epoch, graph, params)?;

        let train_acc = eval_accuracy_chunked(graph, params, x, y)?;
        let eval_acc = match eval {
            Some((ex, ey)) => Some(eval_accuracy_chunked(graph, params, ex, ey)?),
            None => None,
        };
        metrics.push(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / iters.max(1) as f64,
            train_acc,
            eval_acc,
            wallclock_s: started.elapsed().as_secs_f64(),
            fwdbwd_passes: state.passes,
        });
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            checkpoints.push(Checkpoint::from_params(
                params,
                CheckpointMeta {
                    epoch: epoch as u32,
                    seed: cfg.seed,
                    optimizer: opt.rule.name().into(),
                    config_hash: String::new(),
                    arch: String::new(),
                    frozen: vec![],
                },
            ));
        }
    }

    let swa_params = if swa_active {
        Some(swa_finalize(&state.swa, graph, params, x, cfg.refresh_fraction)?)
    } else {
        None
    };

    Ok(TrainOutput { metrics, checkpoints, swa_params, passes: state.passes })
}
