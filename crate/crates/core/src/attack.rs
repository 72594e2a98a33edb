//! Iterative signed-gradient attacks and the technique plugins that bolt
//! onto them: gradient momentum (mi/ni), input diversity (di), scale and
//! variance averaging of gradients (si/vt), input-space flattening (rap),
//! stochastic skip erosion and skip-gradient scaling on residual models
//! (gn/sgm), and checkpoint-pool sampling (lgv). Also carries the L2 PGD
//! used for light adversarial training and the transfer success metric.
//!
//! Per attack iteration the random draws happen in a fixed order: pool model
//! choice, skip-erosion factors, input-diversity geometry, then the variance
//! probe offsets. Plugins that are disabled draw nothing, and each enabled
//! plugin at its neutral setting leaves the output values unchanged.

use crate::error::{Error, Result};
use crate::graph::{grad_wrt_input, resize_nearest_bwd, resize_nearest_fwd, Graph, Mode};
use crate::optim::{train, OptimizerSpec, Rule, Schedule, TrainConfig, TrainObserver, TrainOutput};
use crate::params::{sha256_hex, ParamSet};
use crate::tensor::{Scalar, Tensor};
use crate::zoo::predict;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_BIM_ITERATIONS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiConf {
    #[serde(default = "default_mi_decay")]
    pub decay: f64,
}
fn default_mi_decay() -> f64 {
    1.2
}
impl Default for MiConf {
    fn default() -> Self {
        MiConf { decay: default_mi_decay() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NiConf {
    #[serde(default = "default_ni_decay")]
    pub decay: f64,
}
fn default_ni_decay() -> f64 {
    0.6
}
impl Default for NiConf {
    fn default() -> Self {
        NiConf { decay: default_ni_decay() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiConf {
    #[serde(default = "default_di_rate")]
    pub resize_rate: f64,
    #[serde(default = "default_di_prob")]
    pub prob: f64,
}
fn default_di_rate() -> f64 {
    0.85
}
fn default_di_prob() -> f64 {
    0.8
}
impl Default for DiConf {
    fn default() -> Self {
        DiConf { resize_rate: default_di_rate(), prob: default_di_prob() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiConf {
    #[serde(default = "default_si_m")]
    pub m: usize,
}
fn default_si_m() -> usize {
    5
}
impl Default for SiConf {
    fn default() -> Self {
        SiConf { m: default_si_m() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VtConf {
    #[serde(default = "default_vt_beta")]
    pub beta: f64,
    #[serde(default = "default_vt_n")]
    pub n_samples: usize,
}
fn default_vt_beta() -> f64 {
    1.8
}
fn default_vt_n() -> usize {
    5
}
impl Default for VtConf {
    fn default() -> Self {
        VtConf { beta: default_vt_beta(), n_samples: default_vt_n() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RapConf {
    #[serde(default = "default_rap_steps")]
    pub inner_steps: usize,
    /// Inner search radius; when absent it defaults to 2ε/3 of the attack.
    #[serde(default)]
    pub epsilon_n: Option<f64>,
    #[serde(default = "default_rap_late_start")]
    pub late_start: usize,
}
fn default_rap_steps() -> usize {
    5
}
fn default_rap_late_start() -> usize {
    10
}
impl Default for RapConf {
    fn default() -> Self {
        RapConf {
            inner_steps: default_rap_steps(),
            epsilon_n: None,
            late_start: default_rap_late_start(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GnConf {
    #[serde(default = "default_gn_lo")]
    pub lo: f64,
    #[serde(default = "default_gn_hi")]
    pub hi: f64,
}
fn default_gn_lo() -> f64 {
    0.7
}
fn default_gn_hi() -> f64 {
    1.3
}
impl Default for GnConf {
    fn default() -> Self {
        GnConf { lo: default_gn_lo(), hi: default_gn_hi() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgmConf {
    #[serde(default = "default_sgm_gamma")]
    pub gamma: f64,
}
fn default_sgm_gamma() -> f64 {
    0.5
}
impl Default for SgmConf {
    fn default() -> Self {
        SgmConf { gamma: default_sgm_gamma() }
    }
}

/// Marker config: the checkpoint pool itself is supplied at attack time.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LgvConf {}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Techniques {
    pub mi: Option<MiConf>,
    pub ni: Option<NiConf>,
    pub di: Option<DiConf>,
    pub si: Option<SiConf>,
    pub vt: Option<VtConf>,
    pub rap: Option<RapConf>,
    pub gn: Option<GnConf>,
    pub sgm: Option<SgmConf>,
    pub lgv: Option<LgvConf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub iterations: usize,
    pub step_size: f64,
    #[serde(default)]
    pub techniques: Techniques,
    #[serde(default)]
    pub targeted: bool,
}

impl AttackSpec {
    /// The published iterative baseline: 50 iterations at step ε/10.
    pub fn bim(epsilon: f64) -> AttackSpec {
        AttackSpec {
            epsilon,
            iterations: DEFAULT_BIM_ITERATIONS,
            step_size: epsilon / 10.0,
            techniques: Techniques::default(),
            targeted: false,
        }
    }

    /// Single full-ε step.
    pub fn fgsm(epsilon: f64) -> AttackSpec {
        AttackSpec { iterations: 1, step_size: epsilon, ..AttackSpec::bim(epsilon) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidSpec(format!("epsilon {} must be > 0", self.epsilon)));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidSpec(format!("step size {} must be > 0", self.step_size)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidSpec("attack needs at least 1 iteration".into()));
        }
        let t = &self.techniques;
        if t.mi.is_some() && t.ni.is_some() {
            return Err(Error::InvalidSpec("mi and ni are mutually exclusive".into()));
        }
        if let Some(mi) = &t.mi {
            if mi.decay < 0.0 {
                return Err(Error::InvalidSpec("mi decay must be >= 0".into()));
            }
        }
        if let Some(ni) = &t.ni {
            if ni.decay < 0.0 {
                return Err(Error::InvalidSpec("ni decay must be >= 0".into()));
            }
        }
        if let Some(di) = &t.di {
            if !(di.resize_rate > 0.0 && di.resize_rate <= 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "di resize rate {} outside (0,1]",
                    di.resize_rate
                )));
            }
            if !(0.0..=1.0).contains(&di.prob) {
                return Err(Error::InvalidSpec(format!("di prob {} outside [0,1]", di.prob)));
            }
        }
        if let Some(si) = &t.si {
            if si.m < 1 {
                return Err(Error::InvalidSpec("si needs m >= 1".into()));
            }
        }
        if let Some(vt) = &t.vt {
            if vt.beta < 0.0 || vt.n_samples < 1 {
                return Err(Error::InvalidSpec("vt needs beta >= 0 and n_samples >= 1".into()));
            }
        }
        if let Some(rap) = &t.rap {
            if rap.inner_steps < 1 {
                return Err(Error::InvalidSpec("rap needs inner_steps >= 1".into()));
            }
            if let Some(en) = rap.epsilon_n {
                if !(en > 0.0) {
                    return Err(Error::InvalidSpec(format!("rap epsilon_n {en} must be > 0")));
                }
            }
        }
        if let Some(gn) = &t.gn {
            if !(gn.lo <= gn.hi && gn.lo >= 0.0) {
                return Err(Error::InvalidSpec(format!("gn range [{},{}] invalid", gn.lo, gn.hi)));
            }
        }
        if let Some(sgm) = &t.sgm {
            if sgm.gamma < 0.0 {
                return Err(Error::InvalidSpec("sgm gamma must be >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("plain struct");
        sha256_hex(json.as_bytes())[..16].to_string()
    }
}

/// Surrogate the attack runs against: one model, or a shared graph over a
/// pool of checkpoints from which each iteration draws one member.
pub enum AttackModel<'a, S: Scalar> {
    Single { graph: &'a Graph, params: &'a ParamSet<S> },
    Pool { graph: &'a Graph, pool: &'a [ParamSet<S>] },
}

impl<'a, S: Scalar> AttackModel<'a, S> {
    pub fn single(graph: &'a Graph, params: &'a ParamSet<S>) -> Self {
        AttackModel::Single { graph, params }
    }

    fn graph(&self) -> &'a Graph {
        match self {
            AttackModel::Single { graph, .. } | AttackModel::Pool { graph, .. } => graph,
        }
    }

    fn fingerprint(&self) -> &str {
        match self {
            AttackModel::Single { params, .. } => params.fingerprint(),
            AttackModel::Pool { pool, .. } => {
                pool.first().map(|p| p.fingerprint()).unwrap_or("")
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdvBatch<S: Scalar> {
    pub originals: Tensor<S>,
    pub adversarials: Tensor<S>,
    pub labels: Vec<u16>,
    pub targets: Option<Vec<u16>>,
    pub surrogate_fingerprint: String,
    pub spec_hash: String,
    pub seed: u64,
}

fn labels_to_u16<S: Scalar>(y: &Tensor<S>) -> Vec<u16> {
    y.data().iter().map(|v| v.to_f64() as u16).collect()
}

fn check_unit_range<S: Scalar>(x: &Tensor<S>) -> Result<()> {
    for v in x.data() {
        let f = v.to_f64();
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidSpec(format!("input value {f} outside [0,1]")));
        }
    }
    Ok(())
}

/// decay·m + g/‖g‖₁, the L1 norm taken per example; an all-zero gradient
/// contributes nothing.
pub fn mi_accumulate<S: Scalar>(m_prev: &Tensor<S>, g: &Tensor<S>, decay: f64) -> Result<Tensor<S>> {
    if !m_prev.same_shape(g) {
        return Err(Error::ShapeMismatch {
            context: "momentum accumulate".into(),
            expected: m_prev.shape().to_vec(),
            got: g.shape().to_vec(),
        });
    }
    let mut m = m_prev.clone();
    m.scale(S::from_f64(decay));
    let n = m.shape()[0];
    for i in 0..n {
        let l1: f64 = g.example(i).iter().map(|v| v.to_f64().abs()).sum();
        if l1 == 0.0 {
            continue;
        }
        let inv = S::from_f64(1.0 / l1);
        for (mv, gv) in m.example_mut(i).iter_mut().zip(g.example(i)) {
            *mv = *mv + *gv * inv;
        }
    }
    Ok(m)
}

/// The point where a Nesterov-style iteration evaluates its gradient.
pub fn ni_lookahead<S: Scalar>(
    x: &Tensor<S>,
    m: &Tensor<S>,
    step: f64,
    decay: f64,
) -> Result<Tensor<S>> {
    if !x.same_shape(m) {
        return Err(Error::ShapeMismatch {
            context: "lookahead".into(),
            expected: x.shape().to_vec(),
            got: m.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    out.add_scaled(m, S::from_f64(step * decay));
    Ok(out)
}

/// Geometry of one input-diversity draw, kept so the gradient can be pulled
/// back through the (linear) resize-and-pad map.
pub struct DiRecord {
    pub active: bool,
    pub side: usize,
    pub dy: usize,
    pub dx: usize,
    resize_map: Vec<usize>,
    in_shape: Vec<usize>,
}

/// With probability `prob`: nearest-neighbor resize to a random side in
/// [⌈rate·S⌉, S], then zero-pad back to S at a random offset.
pub fn di_apply<S: Scalar>(
    x: &Tensor<S>,
    resize_rate: f64,
    prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<S>, DiRecord)> {
    if x.ndim() != 4 {
        return Err(Error::InvalidSpec(
            "input diversity needs batched 2-d inputs (N,C,H,W)".into(),
        ));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h != w || h < 2 {
        return Err(Error::InvalidSpec(format!(
            "input diversity needs square spatial dims >= 2, got {h}x{w}"
        )));
    }
    let identity = DiRecord {
        active: false,
        side: h,
        dy: 0,
        dx: 0,
        resize_map: vec![],
        in_shape: x.shape().to_vec(),
    };
    if !rng.random_bool(prob.clamp(0.0, 1.0)) {
        return Ok((x.clone(), identity));
    }
    let lo = ((resize_rate * h as f64).ceil() as usize).clamp(1, h);
    let side = rng.random_range(lo..=h);
    let (resized, map) = resize_nearest_fwd(x, side, side)?;
    let dy = rng.random_range(0..=h - side);
    let dx = rng.random_range(0..=w - side);
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..side {
                for j in 0..side {
                    let src = resized.at4(ni, ci, i, j);
                    let dst = out.at4(ni, ci, i + dy, j + dx);
                    out.data_mut()[dst] = resized.data()[src];
                }
            }
        }
    }
    Ok((
        out,
        DiRecord { active: true, side, dy, dx, resize_map: map, in_shape: x.shape().to_vec() },
    ))
}

/// Public transform per its contract; the pullback record is internal.
pub fn di_transform<S: Scalar>(
    x: &Tensor<S>,
    resize_rate: f64,
    prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<S>> {
    Ok(di_apply(x, resize_rate, prob, rng)?.0)
}

/// Adjoint of the resize-and-pad map: crop the pasted window, scatter back
/// through the nearest-neighbor index map.
pub fn di_backward<S: Scalar>(rec: &DiRecord, g: &Tensor<S>) -> Result<Tensor<S>> {
    if !rec.active {
        return Ok(g.clone());
    }
    let (n, c) = (rec.in_shape[0], rec.in_shape[1]);
    let side = rec.side;
    let mut cropped = Tensor::zeros(&[n, c, side, side]);
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..side {
                for j in 0..side {
                    let src = g.at4(ni, ci, i + rec.dy, j + rec.dx);
                    let dst = cropped.at4(ni, ci, i, j);
                    cropped.data_mut()[dst] = g.data()[src];
                }
            }
        }
    }
    Ok(resize_nearest_bwd(&rec.in_shape, &cropped, &rec.resize_map))
}

/// Mean input gradient over the scale pyramid x, x/2, …, x/2^(m−1); the
/// chain rule contributes the 1/2ⁱ factors.
pub fn si_gradient<S: Scalar>(
    graph: &Graph,
    params: &ParamSet<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    m: usize,
) -> Result<Tensor<S>> {
    if m < 1 {
        return Err(Error::InvalidSpec("si needs m >= 1".into()));
    }
    let mut acc = Tensor::zeros(x.shape());
    for i in 0..m {
        let scale = 0.5f64.powi(i as i32);
        let xs = x.map(|v| v * S::from_f64(scale));
        let g = grad_wrt_input(graph, params, &xs, y, Mode::Eval)?;
        acc.add_scaled(&g, S::from_f64(scale / m as f64));
    }
    Ok(acc)
}

/// Variance-tuned gradient: adds the running variance correction and probes
/// the neighborhood for the next one.
pub fn vt_gradient<S: Scalar>(
    graph: &Graph,
    params: &ParamSet<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    epsilon: f64,
    beta: f64,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
    v_prev: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let g = grad_wrt_input(graph, params, x, y, Mode::Eval)?;
    let mut g_used = g.clone();
    g_used.add_scaled(v_prev, S::ONE);
    let radius = beta * epsilon;
    let mut v_next = Tensor::zeros(x.shape());
    for _ in 0..n_samples {
        let mut probe = x.clone();
        for v in probe.data_mut().iter_mut() {
            let r = rng.random::<f64>() * 2.0 * radius - radius;
            *v = *v + S::from_f64(r);
        }
        let gs = grad_wrt_input(graph, params, &probe, y, Mode::Eval)?;
        v_next.add_scaled(&gs, S::from_f64(1.0 / n_samples as f64));
    }
    v_next.add_scaled(&g, S::from_f64(-1.0));
    Ok((g_used, v_next))
}

/// Skip-gradient scaling: every residual-branch head keeps its forward value
/// but passes γ times the incoming gradient.
pub fn wrap_sgm(graph: &mut Graph, gamma: f64) -> Result<()> {
    if graph.residual_branches.is_empty() {
        return Err(Error::InvalidSpec(
            "skip-gradient scaling needs a residual architecture".into(),
        ));
    }
    for id in graph.residual_branches.clone() {
        graph.node_mut(id).grad_scale = gamma;
    }
    Ok(())
}

/// Skip erosion: a fresh multiplicative factor λ ~ U[lo,hi] on every residual
/// branch, applied in the forward pass.
pub fn wrap_gn(graph: &mut Graph, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    if graph.residual_branches.is_empty() {
        return Err(Error::InvalidSpec("skip erosion needs a residual architecture".into()));
    }
    for id in graph.residual_branches.clone() {
        graph.node_mut(id).forward_scale = rng.random_range(lo..=hi);
    }
    Ok(())
}

fn ascent_grad<S: Scalar>(
    graph: &Graph,
    params: &ParamSet<S>,
    x: &Tensor<S>,
    loss_labels: &Tensor<S>,
    targeted: bool,
) -> Result<Tensor<S>> {
    let mut g = grad_wrt_input(graph, params, x, loss_labels, Mode::Eval)?;
    if targeted {
        g.scale(S::from_f64(-1.0));
    }
    Ok(g)
}

/// Inner flattening loop: signed steps against the attack objective from the
/// current iterate, confined to the ε_n box. The returned displacement marks
/// where the outer gradient should be taken.
pub fn rap_displace<S: Scalar>(
    graph: &Graph,
    params: &ParamSet<S>,
    x_cur: &Tensor<S>,
    loss_labels: &Tensor<S>,
    epsilon_n: f64,
    inner_steps: usize,
    targeted: bool,
) -> Result<Tensor<S>> {
    if !(epsilon_n > 0.0) || inner_steps == 0 {
        return Err(Error::InvalidSpec("rap needs epsilon_n > 0 and inner_steps >= 1".into()));
    }
    let step = S::from_f64(epsilon_n / inner_steps as f64);
    let lim = S::from_f64(epsilon_n);
    let neg_lim = S::from_f64(-epsilon_n);
    let mut disp: Tensor<S> = Tensor::zeros(x_cur.shape());
    let mut probe = x_cur.clone();
    for _ in 0..inner_steps {
        let g = ascent_grad(graph, params, &probe, loss_labels, targeted)?;
        for (d, gv) in disp.data_mut().iter_mut().zip(g.data()) {
            *d = (*d - step * gv.signum_s()).min_s(lim).max_s(neg_lim);
        }
        probe = x_cur.zip(&disp, |a, b| a + b)?;
    }
    Ok(disp)
}

fn clip_to_ball<S: Scalar>(x: &mut Tensor<S>, x0: &Tensor<S>, epsilon: f64) {
    let eps = S::from_f64(epsilon);
    for (v, o) in x.data_mut().iter_mut().zip(x0.data()) {
        let lo = (*o - eps).max_s(S::ZERO);
        let hi = (*o + eps).min_s(S::ONE);
        *v = (*v).max_s(lo).min_s(hi);
    }
}

struct LgvSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl LgvSampler {
    fn new(len: usize) -> Self {
        LgvSampler { order: (0..len).collect(), cursor: len }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor >= self.order.len() {
            use rand::seq::SliceRandom;
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        i
    }
}

/// Iterative signed-gradient attack with the configured technique plugins.
/// Untargeted runs ascend the true-label cross-entropy; targeted runs descend
/// the target-label cross-entropy. The iterate is clipped to the ε box and
/// to [0,1] after every step.
pub fn bim<S: Scalar>(
    model: &AttackModel<'_, S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    spec: &AttackSpec,
    targets: Option<&Tensor<S>>,
    seed: u64,
) -> Result<AdvBatch<S>> {
    spec.validate()?;
    check_unit_range(x)?;
    let n = x.shape()[0];
    if y.shape() != [n] {
        return Err(Error::ShapeMismatch {
            context: "attack labels".into(),
            expected: vec![n],
            got: y.shape().to_vec(),
        });
    }
    let loss_labels = match (spec.targeted, targets) {
        (false, _) => y.clone(),
        (true, Some(t)) => {
            if t.shape() != [n] {
                return Err(Error::ShapeMismatch {
                    context: "target labels".into(),
                    expected: vec![n],
                    got: t.shape().to_vec(),
                });
            }
            t.clone()
        }
        (true, None) => {
            return Err(Error::InvalidSpec("targeted attack needs target labels".into()))
        }
    };
    let t = &spec.techniques;
    let pool: Option<&[ParamSet<S>]> = match (model, t.lgv.is_some()) {
        (AttackModel::Pool { pool, .. }, true) => {
            if pool.is_empty() {
                return Err(Error::InvalidSpec("checkpoint pool is empty".into()));
            }
            Some(pool)
        }
        (AttackModel::Single { .. }, true) => {
            return Err(Error::InvalidSpec(
                "lgv technique requires a checkpoint pool surrogate".into(),
            ))
        }
        (AttackModel::Pool { .. }, false) => {
            return Err(Error::InvalidSpec(
                "checkpoint pool supplied but lgv technique not enabled".into(),
            ))
        }
        (AttackModel::Single { .. }, false) => None,
    };
    let single_params = match model {
        AttackModel::Single { params, .. } => Some(*params),
        AttackModel::Pool { .. } => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gwork = model.graph().clone();
    if let Some(sgm) = &t.sgm {
        wrap_sgm(&mut gwork, sgm.gamma)?;
    }
    let decay = t.mi.as_ref().map(|c| c.decay).or(t.ni.as_ref().map(|c| c.decay));
    let mut momentum: Option<Tensor<S>> = decay.map(|_| Tensor::zeros(x.shape()));
    let mut v_prev: Option<Tensor<S>> = t.vt.as_ref().map(|_| Tensor::zeros(x.shape()));
    let mut lgv_sampler = pool.map(|p| LgvSampler::new(p.len()));
    let rap_eps = t.rap.as_ref().map(|r| r.epsilon_n.unwrap_or(spec.epsilon * 2.0 / 3.0));

    let x0 = x.clone();
    let mut xc = x.clone();
    let step = S::from_f64(spec.step_size);

    for iter in 0..spec.iterations {
        let params: &ParamSet<S> = match (&mut lgv_sampler, pool) {
            (Some(sampler), Some(pool)) => &pool[sampler.next(&mut rng)],
            _ => single_params.expect("validated above"),
        };
        if let Some(gn) = &t.gn {
            wrap_gn(&mut gwork, gn.lo, gn.hi, &mut rng)?;
        }

        // evaluation point: flattening displacement, then momentum lookahead
        let mut point = xc.clone();
        if let (Some(rap), Some(en)) = (&t.rap, rap_eps) {
            if iter >= rap.late_start {
                let disp = rap_displace(
                    &gwork,
                    params,
                    &xc,
                    &loss_labels,
                    en,
                    rap.inner_steps,
                    spec.targeted,
                )?;
                point = point.zip(&disp, |a, b| a + b)?;
            }
        }
        if let (Some(ni), Some(m)) = (&t.ni, &momentum) {
            point = ni_lookahead(&point, m, spec.step_size, ni.decay)?;
        }

        // input diversity
        let (q, di_rec) = match &t.di {
            Some(di) => {
                let (q, rec) = di_apply(&point, di.resize_rate, di.prob, &mut rng)?;
                (q, Some(rec))
            }
            None => (point, None),
        };

        // gradient estimation at the transformed point
        let estimate = |g: &Graph, p: &Tensor<S>| -> Result<Tensor<S>> {
            match &t.si {
                Some(si) => {
                    let mut grad = si_gradient(g, params, p, &loss_labels, si.m)?;
                    if spec.targeted {
                        grad.scale(S::from_f64(-1.0));
                    }
                    Ok(grad)
                }
                None => ascent_grad(g, params, p, &loss_labels, spec.targeted),
            }
        };
        let base_q = estimate(&gwork, &q)?;
        let mut g = match &di_rec {
            Some(rec) => di_backward(rec, &base_q)?,
            None => base_q.clone(),
        };
        // the variance tensor lives in the pre-transform frame so it stays
        // comparable across iterations
        if let (Some(vt), Some(v)) = (&t.vt, &mut v_prev) {
            let radius = vt.beta * spec.epsilon;
            let mut v_next = Tensor::zeros(x.shape());
            for _ in 0..vt.n_samples {
                let mut probe = q.clone();
                for val in probe.data_mut().iter_mut() {
                    let r = rng.random::<f64>() * 2.0 * radius - radius;
                    *val = *val + S::from_f64(r);
                }
                let gs = estimate(&gwork, &probe)?;
                v_next.add_scaled(&gs, S::from_f64(1.0 / vt.n_samples as f64));
            }
            v_next.add_scaled(&base_q, S::from_f64(-1.0));
            if let Some(rec) = &di_rec {
                v_next = di_backward(rec, &v_next)?;
            }
            g.add_scaled(v, S::ONE);
            *v = v_next;
        }

        // momentum accumulation, then the signed step
        let direction = match (&mut momentum, decay) {
            (Some(m), Some(d)) => {
                *m = mi_accumulate(m, &g, d)?;
                m.clone()
            }
            _ => g,
        };
        for (v, dv) in xc.data_mut().iter_mut().zip(direction.data()) {
            *v = *v + step * dv.signum_s();
        }
        clip_to_ball(&mut xc, &x0, spec.epsilon);
    }

    Ok(AdvBatch {
        originals: x0,
        adversarials: xc,
        labels: labels_to_u16(y),
        targets: if spec.targeted { targets.map(labels_to_u16) } else { None },
        surrogate_fingerprint: model.fingerprint().to_string(),
        spec_hash: spec.hash(),
        seed,
    })
}

/// L2 projected gradient descent/ascent with per-example normalized steps.
pub fn pgd_l2<S: Scalar>(
    graph: &Graph,
    params: &ParamSet<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    epsilon: f64,
    steps: usize,
    step_size: f64,
    targeted: bool,
    targets: Option<&Tensor<S>>,
    seed: u64,
) -> Result<AdvBatch<S>> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidSpec(format!("epsilon {epsilon} must be > 0")));
    }
    check_unit_range(x)?;
    let n = x.shape()[0];
    let loss_labels = match (targeted, targets) {
        (false, _) => y.clone(),
        (true, Some(t)) => t.clone(),
        (true, None) => {
            return Err(Error::InvalidSpec("targeted attack needs target labels".into()))
        }
    };
    let x0 = x.clone();
    let mut xc = x.clone();
    for _ in 0..steps {
        let g = ascent_grad(graph, params, &xc, &loss_labels, targeted)?;
        for i in 0..n {
            let norm: f64 = g.example(i).iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let c = S::from_f64(step_size / norm);
            for (xv, gv) in xc.example_mut(i).iter_mut().zip(g.example(i)) {
                *xv = *xv + c * *gv;
            }
        }
        // project each example's perturbation onto the L2 ball, then the box
        for i in 0..n {
            let dn: f64 = xc
                .example(i)
                .iter()
                .zip(x0.example(i))
                .map(|(a, b)| {
                    let d = a.to_f64() - b.to_f64();
                    d * d
                })
                .sum::<f64>()
                .sqrt();
            if dn > epsilon {
                let c = S::from_f64(epsilon / dn);
                for (xv, ov) in xc.example_mut(i).iter_mut().zip(x0.example(i)) {
                    *xv = *ov + (*xv - *ov) * c;
                }
            }
            for xv in xc.example_mut(i).iter_mut() {
                *xv = (*xv).max_s(S::ZERO).min_s(S::ONE);
            }
        }
    }
    let spec_tag = format!("pgd_l2:{epsilon}:{steps}:{step_size}:{targeted}");
    Ok(AdvBatch {
        originals: x0,
        adversarials: xc,
        labels: labels_to_u16(y),
        targets: if targeted { targets.map(labels_to_u16) } else { None },
        surrogate_fingerprint: params.fingerprint().to_string(),
        spec_hash: sha256_hex(spec_tag.as_bytes())[..16].to_string(),
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SatConf {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for SatConf {
    fn default() -> Self {
        // tiny-perturbation training: L2 radius 0.025, 7 steps of 0.3ε
        SatConf { epsilon: 0.025, steps: 7, step_size: 0.3 * 0.025 }
    }
}

/// Replaces every training batch with its L2 PGD perturbation against the
/// current weights; the attack passes are charged to the run's cost counter.
pub struct SatObserver {
    pub conf: SatConf,
}

impl<S: Scalar> TrainObserver<S> for SatObserver {
    fn transform_batch(
        &mut self,
        _epoch: usize,
        _iter: usize,
        graph: &Graph,
        params: &ParamSet<S>,
        x: Tensor<S>,
        y: Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>, u64)> {
        if self.conf.steps == 0 {
            return Ok((x, y, 0));
        }
        let adv = pgd_l2(
            graph,
            params,
            &x,
            &y,
            self.conf.epsilon,
            self.conf.steps,
            self.conf.step_size,
            false,
            None,
            0,
        )?;
        Ok((adv.adversarials, y, self.conf.steps as u64))
    }
}

/// Standard training loop with slight adversarial replacement of each batch.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_train_sat<S: Scalar>(
    graph: &Graph,
    params: &mut ParamSet<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    eval: Option<(&Tensor<S>, &Tensor<S>)>,
    opt: &OptimizerSpec,
    cfg: &TrainConfig,
    sat: &SatConf,
) -> Result<TrainOutput<S>> {
    let mut obs = SatObserver { conf: sat.clone() };
    train(graph, params, x, y, eval, opt, cfg, &mut obs)
}

/// Misclassification rate of the adversarials on a target model; for a
/// targeted batch, the rate of hitting the intended class.
pub fn success_rate<S: Scalar>(
    adv: &AdvBatch<S>,
    graph: &Graph,
    params: &ParamSet<S>,
) -> Result<f64> {
    let n = adv.adversarials.shape()[0];
    if n == 0 {
        return Err(Error::InvalidSpec("empty adversarial batch".into()));
    }
    let per = adv.adversarials.shape()[1..].to_vec();
    let mut hits = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + 256).min(n);
        let rows: Vec<&[S]> = (start..end).map(|i| adv.adversarials.example(i)).collect();
        let bx = Tensor::stack(&per, &rows)?;
        let logits = predict(graph, params, &bx, Mode::Eval)?;
        let classes = logits.shape()[1];
        for (row, i) in (start..end).enumerate() {
            let l = logits.row(row);
            let mut best = 0usize;
            for c in 1..classes {
                if l[c].to_f64() > l[best].to_f64() {
                    best = c;
                }
            }
            match &adv.targets {
                Some(targets) => {
                    let t = targets[i] as usize;
                    if t >= classes {
                        return Err(Error::InvalidSpec(format!(
                            "target label {t} outside model's {classes} classes"
                        )));
                    }
                    if best == t {
                        hits += 1;
                    }
                }
                None => {
                    let t = adv.labels[i] as usize;
                    if t >= classes {
                        return Err(Error::InvalidSpec(format!(
                            "label {t} outside model's {classes} classes"
                        )));
                    }
                    if best != t {
                        hits += 1;
                    }
                }
            }
        }
        start = end;
    }
    Ok(hits as f64 / n as f64)
}

/// Continues plain SGD at a constant (typically high) learning rate, saving
/// `per_epoch` equally spaced snapshots each epoch.
#[allow(clippy::too_many_arguments)]
pub fn lgv_collect<S: Scalar>(
    graph: &Graph,
    params: &ParamSet<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    lr_const: f64,
    epochs: usize,
    per_epoch: usize,
    seed: u64,
) -> Result<Vec<ParamSet<S>>> {
    if epochs == 0 || per_epoch == 0 {
        return Err(Error::InvalidSpec("lgv needs epochs >= 1 and per_epoch >= 1".into()));
    }
    struct Collector<S: Scalar> {
        marks: Vec<usize>,
        pool: Vec<ParamSet<S>>,
    }
    impl<S: Scalar> TrainObserver<S> for Collector<S> {
        fn wants_iteration(&self, _epoch: usize, iter: usize) -> bool {
            self.marks.contains(&iter)
        }
        fn on_iteration(&mut self, obs: &crate::optim::IterObservation<'_, S>) -> Result<()> {
            self.pool.push(obs.params_after.clone());
            Ok(())
        }
    }
    let n = x.shape()[0];
    let batch = 32usize.min(n.max(1));
    let iters_per_epoch = n.div_ceil(batch);
    let marks: Vec<usize> = (1..=per_epoch)
        .map(|j| (iters_per_epoch * j / per_epoch).max(1) - 1)
        .collect();
    let mut collector = Collector { marks, pool: Vec::new() };
    let opt = OptimizerSpec {
        rule: Rule::Sgd,
        schedule: Schedule { lr0: lr_const, decays: vec![] },
        rho: 0.0,
        ..crate::optim::optimizer_preset("sgd").expect("preset exists")
    };
    let cfg = TrainConfig {
        epochs,
        batch_size: batch,
        seed,
        checkpoint_every: 0,
        refresh_fraction: 1.0,
    };
    let mut work = params.clone();
    train(graph, &mut work, x, y, None, &opt, &cfg, &mut collector)?;
    Ok(collector.pool)
}

/// Mean of a checkpoint pool with refreshed batch-norm statistics.
pub fn lgv_swa<S: Scalar>(
    pool: &[ParamSet<S>],
    graph: &Graph,
    data: &Tensor<S>,
    refresh_fraction: f64,
) -> Result<ParamSet<S>> {
    if pool.is_empty() {
        return Err(Error::InvalidSpec("empty checkpoint pool".into()));
    }
    let mut state = crate::optim::SwaState::new();
    for p in pool {
        crate::optim::swa_accumulate(&mut state, p);
    }
    crate::optim::swa_finalize(&state, graph, &pool[0], data, refresh_fraction)
}

// ---- persistence ----

pub const ADV_MAGIC: &[u8; 4] = b"FSAB";
pub const ADV_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct AdvHeader {
    spec_hash: String,
    seed: u64,
    shape: Vec<usize>,
    n: usize,
    surrogate_fingerprint: String,
    has_targets: bool,
}

pub fn encode_adv_batch<S: Scalar>(adv: &AdvBatch<S>) -> Vec<u8> {
    let header = AdvHeader {
        spec_hash: adv.spec_hash.clone(),
        seed: adv.seed,
        shape: adv.originals.shape()[1..].to_vec(),
        n: adv.originals.shape()[0],
        surrogate_fingerprint: adv.surrogate_fingerprint.clone(),
        has_targets: adv.targets.is_some(),
    };
    let hjson = serde_json::to_vec(&header).expect("plain struct");
    let mut out = Vec::new();
    out.extend_from_slice(ADV_MAGIC);
    out.extend_from_slice(&ADV_VERSION.to_le_bytes());
    out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&hjson);
    for t in [&adv.originals, &adv.adversarials] {
        for v in t.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    for l in &adv.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    if let Some(targets) = &adv.targets {
        for l in targets {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

pub fn decode_adv_batch(bytes: &[u8]) -> Result<AdvBatch<f32>> {
    use std::io::Read;
    let mut cur = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)?;
    if &magic != ADV_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected FSAB")));
    }
    let mut u32buf = [0u8; 4];
    cur.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != ADV_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    cur.read_exact(&mut u32buf)?;
    let hlen = u32::from_le_bytes(u32buf) as usize;
    let mut hjson = vec![0u8; hlen];
    cur.read_exact(&mut hjson)?;
    let header: AdvHeader =
        serde_json::from_slice(&hjson).map_err(|e| Error::Format(format!("header: {e}")))?;
    let mut shape = vec![header.n];
    shape.extend_from_slice(&header.shape);
    let numel: usize = shape.iter().product();
    let read_tensor = |cur: &mut std::io::Cursor<&[u8]>| -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            cur.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        Tensor::from_vec(data).reshape(&shape)
    };
    let originals = read_tensor(&mut cur)?;
    let adversarials = read_tensor(&mut cur)?;
    let read_labels = |cur: &mut std::io::Cursor<&[u8]>| -> Result<Vec<u16>> {
        let mut out = Vec::with_capacity(header.n);
        let mut buf = [0u8; 2];
        for _ in 0..header.n {
            cur.read_exact(&mut buf)?;
            out.push(u16::from_le_bytes(buf));
        }
        Ok(out)
    };
    let labels = read_labels(&mut cur)?;
    let targets = if header.has_targets { Some(read_labels(&mut cur)?) } else { None };
    if cur.position() != bytes.len() as u64 {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() as u64 - cur.position()
        )));
    }
    Ok(AdvBatch {
        originals,
        adversarials,
        labels,
        targets,
        surrogate_fingerprint: header.surrogate_fingerprint,
        spec_hash: header.spec_hash,
        seed: header.seed,
    })
}

pub fn save_adv_batch<S: Scalar>(path: &std::path::Path, adv: &AdvBatch<S>) -> Result<()> {
    std::fs::write(path, encode_adv_batch(adv))?;
    Ok(())
}

pub fn load_adv_batch(path: &std::path::Path) -> Result<AdvBatch<f32>> {
    decode_adv_batch(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{forward_backward, Mode};
    use crate::optim::{train, NoopObserver, TrainConfig};
    use crate::zoo::{build_model, predict, ArchSpec};

    fn linear_ce(d: usize, classes: usize, w: &[f64]) -> (Graph, ParamSet<f64>) {
        let mut g = Graph::new();
        g.input_shape = Some(vec![d]);
        let mut ps = ParamSet::new("test-linear");
        let wi = ps
            .push("w", Tensor::new(&[d, classes], w.to_vec()).unwrap(), true)
            .unwrap();
        let wn = g.param(wi);
        let logits = g.matmul(g.input, wn);
        g.loss_softmax_ce(logits);
        (g, ps)
    }

    fn linear_sum(d: usize, w: &[f64]) -> (Graph, ParamSet<f64>) {
        let mut g = Graph::new();
        g.input_shape = Some(vec![d]);
        let mut ps = ParamSet::new("test-sum");
        let wi = ps.push("w", Tensor::new(&[d, 1], w.to_vec()).unwrap(), true).unwrap();
        let wn = g.param(wi);
        let logits = g.matmul(g.input, wn);
        g.loss_logit_sum(logits);
        (g, ps)
    }

    fn labels(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vals.to_vec())
    }

    fn unit_batch(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| 0.1 + 0.8 * rng.random::<f64>()).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn spec_validation_rules() {
        assert!(AttackSpec::bim(0.1).validate().is_ok());
        assert!(AttackSpec::bim(0.0).validate().is_err());
        assert!(AttackSpec::bim(-0.1).validate().is_err());

        let mut s = AttackSpec::bim(0.1);
        s.iterations = 0;
        assert!(s.validate().is_err());

        let mut s = AttackSpec::bim(0.1);
        s.techniques.mi = Some(MiConf::default());
        s.techniques.ni = Some(NiConf::default());
        assert!(s.validate().is_err());

        let mut s = AttackSpec::bim(0.1);
        s.techniques.di = Some(DiConf { resize_rate: 0.0, prob: 0.5 });
        assert!(s.validate().is_err());
        s.techniques.di = Some(DiConf { resize_rate: 0.8, prob: 1.5 });
        assert!(s.validate().is_err());

        let mut s = AttackSpec::bim(0.1);
        s.techniques.vt = Some(VtConf { beta: -1.0, n_samples: 5 });
        assert!(s.validate().is_err());

        let mut s = AttackSpec::bim(0.1);
        s.techniques.rap = Some(RapConf { inner_steps: 0, ..RapConf::default() });
        assert!(s.validate().is_err());

        let mut s = AttackSpec::bim(0.1);
        s.techniques.gn = Some(GnConf { lo: 1.3, hi: 0.7 });
        assert!(s.validate().is_err());

        assert!(serde_json::from_str::<Techniques>(r#"{"mi":{"decay":1.2,"oops":1}}"#).is_err());
        let t: Techniques = serde_json::from_str(r#"{"mi":{}}"#).unwrap();
        assert_eq!(t.mi.unwrap().decay, 1.2);
        let t: Techniques = serde_json::from_str(r#"{"di":{}}"#).unwrap();
        let di = t.di.unwrap();
        assert_eq!(di.resize_rate, 0.85);
        assert_eq!(di.prob, 0.8);
        let t: Techniques = serde_json::from_str(r#"{"vt":{},"rap":{}}"#).unwrap();
        let vt = t.vt.unwrap();
        assert_eq!((vt.beta, vt.n_samples), (1.8, 5));
        let rap = t.rap.unwrap();
        assert_eq!((rap.inner_steps, rap.late_start), (5, 10));
        assert!(rap.epsilon_n.is_none());
    }

    #[test]
    fn spec_hash_is_stable_and_sensitive() {
        let a = AttackSpec::bim(0.1);
        let b = AttackSpec::bim(0.1);
        let c = AttackSpec::bim(0.2);
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn single_step_matches_manual_signed_update() {
        let (g, ps) = linear_ce(3, 2, &[0.7, -0.4, 0.2, -1.1, 0.5, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = unit_batch(&mut rng, &[4, 3]);
        let y = labels(&[0.0, 1.0, 0.0, 1.0]);
        let spec = AttackSpec::fgsm(0.1);
        let model = AttackModel::single(&g, &ps);
        let adv = bim(&model, &x, &y, &spec, None, 0).unwrap();

        let grad = grad_wrt_input(&g, &ps, &x, &y, Mode::Eval).unwrap();
        let mut manual = x.clone();
        let step = 0.1;
        for (v, gv) in manual.data_mut().iter_mut().zip(grad.data()) {
            *v += step * gv.signum_s();
        }
        clip_to_ball(&mut manual, &x, 0.1);
        assert_eq!(max_abs_diff(&adv.adversarials, &manual), 0.0);
        assert!(adv.targets.is_none());
        assert_eq!(adv.labels, vec![0, 1, 0, 1]);
    }

    #[test]
    fn constant_gradient_saturates_the_ball() {
        let (g, ps) = linear_sum(1, &[3.0]);
        let x = Tensor::new(&[1, 1], vec![0.5]).unwrap();
        let y = labels(&[0.0]);
        let spec = AttackSpec::bim(0.1);
        let model = AttackModel::single(&g, &ps);
        let adv = bim(&model, &x, &y, &spec, None, 0).unwrap();
        assert!((adv.adversarials.data()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn momentum_accumulation_hand_values() {
        let m0: Tensor<f64> = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let g = Tensor::new(&[1, 2], vec![2.0, -2.0]).unwrap();
        let m1 = mi_accumulate(&m0, &g, 1.2).unwrap();
        assert_eq!(m1.data(), &[0.5, -0.5]);
        let m2 = mi_accumulate(&m1, &g, 1.2).unwrap();
        assert!((m2.data()[0] - 1.1).abs() < 1e-15);
        assert!((m2.data()[1] + 1.1).abs() < 1e-15);

        // decay 0 keeps only the fresh normalized gradient
        let m = mi_accumulate(&m1, &g, 0.0).unwrap();
        assert_eq!(m.data(), &[0.5, -0.5]);

        // rows normalize independently; an all-zero row only decays
        let m0: Tensor<f64> = Tensor::new(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let g = Tensor::new(&[2, 2], vec![3.0, 1.0, 0.0, 0.0]).unwrap();
        let m = mi_accumulate(&m0, &g, 0.5).unwrap();
        assert_eq!(m.example(0), &[1.25, 0.75]);
        assert_eq!(m.example(1), &[0.5, 0.5]);
    }

    #[test]
    fn lookahead_point_arithmetic() {
        let x: Tensor<f64> = Tensor::new(&[1, 1], vec![0.4]).unwrap();
        let m = Tensor::new(&[1, 1], vec![2.0]).unwrap();
        let p = ni_lookahead(&x, &m, 0.01, 0.6).unwrap();
        assert!((p.data()[0] - 0.412).abs() < 1e-15);
    }

    #[test]
    fn diversity_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = unit_batch(&mut rng, &[2, 1, 6, 6]);

        let (out, rec) = di_apply(&x, 0.85, 0.0, &mut rng).unwrap();
        assert!(!rec.active);
        assert_eq!(max_abs_diff(&out, &x), 0.0);

        // rate 1 forces side == input side, so the only draw is the identity
        let (out, rec) = di_apply(&x, 1.0, 1.0, &mut rng).unwrap();
        assert!(rec.active);
        assert_eq!(rec.side, 6);
        assert_eq!(max_abs_diff(&out, &x), 0.0);

        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let (a, _) = di_apply(&x, 0.5, 1.0, &mut r1).unwrap();
        let (b, _) = di_apply(&x, 0.5, 1.0, &mut r2).unwrap();
        assert_eq!(max_abs_diff(&a, &b), 0.0);

        assert!(di_apply(&unit_batch(&mut rng, &[2, 6]), 0.85, 0.8, &mut rng).is_err());
        assert!(di_apply(&unit_batch(&mut rng, &[1, 1, 4, 6]), 0.85, 0.8, &mut rng).is_err());
    }

    #[test]
    fn diversity_pullback_is_the_adjoint_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..12 {
            let x = unit_batch(&mut rng, &[2, 2, 5, 5]);
            let mut draw = ChaCha8Rng::seed_from_u64(100 + trial);
            let (tx, rec) = di_apply(&x, 0.4, 1.0, &mut draw).unwrap();
            let u = unit_batch(&mut rng, &[2, 2, 5, 5]);
            let fwd: f64 = tx.data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
            let pulled = di_backward(&rec, &u).unwrap();
            let bwd: f64 = x.data().iter().zip(pulled.data()).map(|(a, b)| a * b).sum();
            assert!((fwd - bwd).abs() < 1e-10, "trial {trial}: {fwd} vs {bwd}");
        }
    }

    #[test]
    fn scale_pyramid_gradient_on_linear_model() {
        let (g, ps) = linear_sum(1, &[2.0]);
        let x = Tensor::new(&[1, 1], vec![0.8]).unwrap();
        let y = labels(&[0.0]);
        let got = si_gradient(&g, &ps, &x, &y, 5).unwrap();
        // mean over i of (1/2^i) * 2.0 = 2 * (31/16) / 5
        assert!((got.data()[0] - 0.775).abs() < 1e-12);
        let one = si_gradient(&g, &ps, &x, &y, 1).unwrap();
        assert!((one.data()[0] - 2.0).abs() < 1e-15);
        assert!(si_gradient(&g, &ps, &x, &y, 0).is_err());
    }

    #[test]
    fn variance_term_vanishes_at_zero_radius() {
        let (g, ps) = linear_ce(2, 2, &[1.0, -0.5, 0.3, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = unit_batch(&mut rng, &[3, 2]);
        let y = labels(&[0.0, 1.0, 0.0]);
        let v0 = Tensor::zeros(x.shape());
        let (g_used, v_next) =
            vt_gradient(&g, &ps, &x, &y, 0.05, 0.0, 5, &mut rng, &v0).unwrap();
        let base = grad_wrt_input(&g, &ps, &x, &y, Mode::Eval).unwrap();
        assert!(max_abs_diff(&g_used, &base) < 1e-12);
        assert!(v_next.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn variance_estimate_tightens_with_more_samples() {
        let (g, ps) = linear_ce(2, 2, &[4.0, -4.0, -4.0, 4.0]);
        let x = Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap();
        let y = labels(&[0.0]);
        let v0 = Tensor::zeros(x.shape());
        let spread = |n: usize| -> f64 {
            let mut vals = Vec::new();
            for seed in 0..60 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (_, v) = vt_gradient(&g, &ps, &x, &y, 0.3, 1.0, n, &mut rng, &v0).unwrap();
                vals.push(v.data()[0]);
            }
            crate::stats::sample_variance(&vals)
        };
        let v2 = spread(2);
        let v8 = spread(8);
        assert!(v2 > 0.0 && v8 > 0.0);
        let ratio = v2 / v8;
        assert!(ratio > 1.5 && ratio < 10.0, "ratio {ratio}");
    }

    #[test]
    fn inner_displacement_stays_in_its_box() {
        let (g, ps) = linear_ce(3, 2, &[0.7, -0.4, 0.2, -1.1, 0.5, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = unit_batch(&mut rng, &[4, 3]);
        let y = labels(&[0.0, 1.0, 1.0, 0.0]);
        let disp = rap_displace(&g, &ps, &x, &y, 0.06, 5, false).unwrap();
        for v in disp.data() {
            assert!(v.abs() <= 0.06 + 1e-12);
        }
        assert!(rap_displace(&g, &ps, &x, &y, 0.0, 5, false).is_err());
        assert!(rap_displace(&g, &ps, &x, &y, 0.06, 0, false).is_err());
    }

    #[test]
    fn inner_displacement_lowers_the_attack_objective() {
        // CE(x) = ln(1 + exp(-4x)) for label 1: convex, decreasing in x
        let (g, ps) = linear_ce(1, 2, &[0.0, 4.0]);
        let x = Tensor::new(&[1, 1], vec![0.3]).unwrap();
        let y = labels(&[1.0]);
        let disp = rap_displace(&g, &ps, &x, &y, 0.1, 5, false).unwrap();
        assert!(disp.data()[0] > 0.0);
        let loss = |p: &Tensor<f64>| {
            g.forward(&ps, p, Some(&y), Mode::Eval).unwrap().loss.unwrap()
        };
        let moved = x.zip(&disp, |a, b| a + b).unwrap();
        assert!(loss(&moved) < loss(&x));
    }

    fn neutral_matches_plain(
        edit: impl Fn(&mut AttackSpec),
        iterations: usize,
    ) {
        let (g, ps) = build_model::<f64>(
            &ArchSpec::SmallCnn { in_chw: [1, 8, 8], classes: 3, width: 2 },
            13,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = unit_batch(&mut rng, &[3, 1, 8, 8]);
        let y = labels(&[0.0, 1.0, 2.0]);
        let mut plain = AttackSpec::bim(0.08);
        plain.iterations = iterations;
        let mut tuned = plain.clone();
        edit(&mut tuned);
        let model = AttackModel::single(&g, &ps);
        let a = bim(&model, &x, &y, &plain, None, 4).unwrap();
        let b = bim(&model, &x, &y, &tuned, None, 4).unwrap();
        assert_eq!(max_abs_diff(&a.adversarials, &b.adversarials), 0.0);
    }

    #[test]
    fn neutral_settings_reduce_to_plain_attack() {
        neutral_matches_plain(|s| s.techniques.di = Some(DiConf { resize_rate: 0.5, prob: 0.0 }), 4);
        neutral_matches_plain(|s| s.techniques.si = Some(SiConf { m: 1 }), 4);
        neutral_matches_plain(|s| s.techniques.vt = Some(VtConf { beta: 0.0, n_samples: 2 }), 4);
        neutral_matches_plain(
            |s| s.techniques.rap = Some(RapConf { late_start: 10, ..RapConf::default() }),
            4,
        );
        neutral_matches_plain(|s| s.techniques.mi = Some(MiConf::default()), 1);
        neutral_matches_plain(|s| s.techniques.ni = Some(NiConf::default()), 1);
    }

    #[test]
    fn neutral_residual_wraps_reduce_to_plain_attack() {
        let (g, ps) = build_model::<f64>(
            &ArchSpec::MiniResnet { in_chw: [1, 6, 6], classes: 2, width: 3, blocks: 1 },
            17,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = unit_batch(&mut rng, &[2, 1, 6, 6]);
        let y = labels(&[0.0, 1.0]);
        let mut plain = AttackSpec::bim(0.06);
        plain.iterations = 3;
        let model = AttackModel::single(&g, &ps);
        let base = bim(&model, &x, &y, &plain, None, 6).unwrap();

        let mut s = plain.clone();
        s.techniques.sgm = Some(SgmConf { gamma: 1.0 });
        let a = bim(&model, &x, &y, &s, None, 6).unwrap();
        assert_eq!(max_abs_diff(&a.adversarials, &base.adversarials), 0.0);

        let mut s = plain.clone();
        s.techniques.gn = Some(GnConf { lo: 1.0, hi: 1.0 });
        let a = bim(&model, &x, &y, &s, None, 6).unwrap();
        assert_eq!(max_abs_diff(&a.adversarials, &base.adversarials), 0.0);
    }

    #[test]
    fn residual_wraps_reject_plain_architectures() {
        let (g, _) = linear_ce(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let mut g1 = g.clone();
        assert!(wrap_sgm(&mut g1, 0.5).is_err());
        let mut g2 = g.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(wrap_gn(&mut g2, 0.7, 1.3, &mut rng).is_err());
    }

    #[test]
    fn branch_gradient_scale_zero_silences_branch_parameters() {
        let (mut g, ps) = build_model::<f64>(
            &ArchSpec::MiniResnet { in_chw: [1, 6, 6], classes: 2, width: 3, blocks: 1 },
            19,
        )
        .unwrap();
        wrap_sgm(&mut g, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = unit_batch(&mut rng, &[4, 1, 6, 6]);
        let y = labels(&[0.0, 1.0, 0.0, 1.0]);
        let (_, grads) = forward_backward(&g, &ps, &x, &y, Mode::Train).unwrap();
        let norm = |name: &str| -> f64 {
            let i = ps.index_of(name).unwrap();
            grads[i].data().iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        assert_eq!(norm("block0.conv1.w"), 0.0);
        assert_eq!(norm("block0.conv2.w"), 0.0);
        assert!(norm("stem.conv.w") > 0.0);
        assert!(norm("fc.w") > 0.0);
    }

    #[test]
    fn targeted_and_untargeted_coincide_with_two_classes() {
        let (g, ps) = linear_ce(3, 2, &[0.7, -0.4, 0.2, -1.1, 0.5, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = unit_batch(&mut rng, &[4, 3]);
        let y = labels(&[0.0, 0.0, 1.0, 1.0]);
        let others = labels(&[1.0, 1.0, 0.0, 0.0]);
        let mut spec = AttackSpec::bim(0.1);
        spec.iterations = 8;
        let model = AttackModel::single(&g, &ps);
        let unt = bim(&model, &x, &y, &spec, None, 0).unwrap();
        let mut tspec = spec.clone();
        tspec.targeted = true;
        let tgt = bim(&model, &x, &y, &tspec, Some(&others), 0).unwrap();
        assert_eq!(max_abs_diff(&unt.adversarials, &tgt.adversarials), 0.0);
        assert_eq!(tgt.targets.as_deref(), Some(&[1u16, 1, 0, 0][..]));
        assert!(bim(&model, &x, &y, &tspec, None, 0).is_err());
    }

    #[test]
    fn same_seed_reproduces_bit_identical_output() {
        let (g, ps) = build_model::<f64>(
            &ArchSpec::SmallCnn { in_chw: [1, 8, 8], classes: 3, width: 2 },
            37,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = unit_batch(&mut rng, &[2, 1, 8, 8]);
        let y = labels(&[0.0, 2.0]);
        let mut spec = AttackSpec::bim(0.08);
        spec.iterations = 5;
        spec.techniques.mi = Some(MiConf::default());
        spec.techniques.di = Some(DiConf::default());
        spec.techniques.vt = Some(VtConf { beta: 1.8, n_samples: 2 });
        let model = AttackModel::single(&g, &ps);
        let a = bim(&model, &x, &y, &spec, None, 99).unwrap();
        let b = bim(&model, &x, &y, &spec, None, 99).unwrap();
        assert!(crate::tensor::bit_equal(&a.adversarials, &b.adversarials));
        let c = bim(&model, &x, &y, &spec, None, 100).unwrap();
        assert!(max_abs_diff(&a.adversarials, &c.adversarials) > 0.0);
    }

    #[test]
    fn perturbations_respect_ball_and_pixel_range() {
        let (g, ps) = build_model::<f64>(
            &ArchSpec::SmallCnn { in_chw: [1, 8, 8], classes: 3, width: 2 },
            43,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for trial in 0..20 {
            let x = unit_batch(&mut rng, &[2, 1, 8, 8]);
            let y = labels(&[trial as f64 % 3.0, (trial + 1) as f64 % 3.0]);
            let mut spec = AttackSpec::bim(0.02 + 0.2 * rng.random::<f64>());
            spec.iterations = 1 + (trial % 5);
            spec.step_size = spec.epsilon / 3.0;
            if trial % 2 == 0 {
                spec.techniques.mi = Some(MiConf::default());
            }
            if trial % 3 == 0 {
                spec.techniques.di = Some(DiConf::default());
            }
            if trial % 4 == 0 {
                spec.techniques.rap = Some(RapConf { inner_steps: 2, ..RapConf::default() });
            }
            if trial % 5 == 0 {
                spec.techniques.vt = Some(VtConf { beta: 1.8, n_samples: 2 });
            }
            let model = AttackModel::single(&g, &ps);
            let adv = bim(&model, &x, &y, &spec, None, trial as u64).unwrap();
            let d = max_abs_diff(&adv.adversarials, &adv.originals);
            assert!(d <= spec.epsilon + 1e-9, "trial {trial}: {d} > {}", spec.epsilon);
            assert!(adv.adversarials.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn attack_rejects_out_of_range_inputs() {
        let (g, ps) = linear_ce(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let x = Tensor::new(&[1, 2], vec![0.5, 1.4]).unwrap();
        let y = labels(&[0.0]);
        let model = AttackModel::single(&g, &ps);
        assert!(bim(&model, &x, &y, &AttackSpec::bim(0.1), None, 0).is_err());
    }

    #[test]
    fn success_rate_counts_the_right_fractions() {
        let (g, ps) = linear_ce(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let adversarials = Tensor::new(
            &[4, 2],
            vec![0.9, 0.1, 0.1, 0.9, 0.8, 0.2, 0.2, 0.8],
        )
        .unwrap();
        let mut adv = AdvBatch {
            originals: adversarials.clone(),
            adversarials,
            labels: vec![1, 1, 0, 0],
            targets: None,
            surrogate_fingerprint: "t".into(),
            spec_hash: "h".into(),
            seed: 0,
        };
        assert_eq!(success_rate(&adv, &g, &ps).unwrap(), 0.5);
        adv.targets = Some(vec![0, 0, 1, 1]);
        assert_eq!(success_rate(&adv, &g, &ps).unwrap(), 0.5);
        adv.targets = Some(vec![0, 0, 1, 7]);
        assert!(success_rate(&adv, &g, &ps).is_err());
        adv.targets = None;
        adv.labels = vec![1, 1, 0, 9];
        assert!(success_rate(&adv, &g, &ps).is_err());
    }

    #[test]
    fn checkpoint_pool_collection_and_average() {
        let (g, ps) = build_model::<f64>(
            &ArchSpec::Mlp { in_shape: vec![2], hidden: vec![4], classes: 2 },
            53,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let x = unit_batch(&mut rng, &[128, 2]);
        let y = labels(&(0..128).map(|i| (i % 2) as f64).collect::<Vec<_>>());
        let pool = lgv_collect(&g, &ps, &x, &y, 0.05, 2, 2, 61).unwrap();
        assert_eq!(pool.len(), 4);
        let digests: Vec<String> = pool.iter().map(|p| p.content_digest()).collect();
        for i in 0..digests.len() {
            for j in i + 1..digests.len() {
                assert_ne!(digests[i], digests[j]);
            }
        }
        for (a, b) in pool.iter().zip(pool.iter().skip(1)) {
            assert!(a.l2_distance(b) > 0.0);
        }

        let twice = vec![pool[0].clone(), pool[0].clone()];
        let avg = lgv_swa(&twice, &g, &x, 1.0).unwrap();
        for (ea, eb) in avg.entries().iter().zip(pool[0].entries()) {
            if ea.trainable {
                assert!(max_abs_diff(&ea.tensor, &eb.tensor) < 1e-12, "{}", ea.name);
            }
        }
        assert!(lgv_swa(&[], &g, &x, 1.0).is_err());
    }

    #[test]
    fn pool_attack_requires_matching_configuration() {
        let (g, ps) = linear_ce(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let x = Tensor::new(&[1, 2], vec![0.4, 0.6]).unwrap();
        let y = labels(&[0.0]);
        let mut spec = AttackSpec::bim(0.1);
        spec.techniques.lgv = Some(LgvConf {});
        let single = AttackModel::single(&g, &ps);
        assert!(bim(&single, &x, &y, &spec, None, 0).is_err());

        let pool = vec![ps.clone(), ps.clone()];
        let pooled = AttackModel::Pool { graph: &g, pool: &pool };
        assert!(bim(&pooled, &x, &y, &AttackSpec::bim(0.1), None, 0).is_err());

        let adv = bim(&pooled, &x, &y, &spec, None, 0).unwrap();
        assert!(max_abs_diff(&adv.adversarials, &adv.originals) <= 0.1 + 1e-12);

        let empty: Vec<ParamSet<f64>> = vec![];
        let pooled = AttackModel::Pool { graph: &g, pool: &empty };
        assert!(bim(&pooled, &x, &y, &spec, None, 0).is_err());
    }

    #[test]
    fn l2_attack_ball_and_zero_steps() {
        let (g, ps) = linear_ce(3, 2, &[0.7, -0.4, 0.2, -1.1, 0.5, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let x = unit_batch(&mut rng, &[5, 3]);
        let y = labels(&[0.0, 1.0, 0.0, 1.0, 0.0]);

        let adv = pgd_l2(&g, &ps, &x, &y, 0.3, 0, 0.1, false, None, 0).unwrap();
        assert!(crate::tensor::bit_equal(&adv.adversarials, &x));

        let adv = pgd_l2(&g, &ps, &x, &y, 0.3, 6, 0.1, false, None, 0).unwrap();
        for i in 0..5 {
            let dn: f64 = adv
                .adversarials
                .example(i)
                .iter()
                .zip(adv.originals.example(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(dn <= 0.3 + 1e-9, "example {i}: {dn}");
        }
        assert!(adv.adversarials.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_step_batch_rewrite_matches_plain_training() {
        let (g, ps) = build_model::<f64>(
            &ArchSpec::Mlp { in_shape: vec![2], hidden: vec![4], classes: 2 },
            71,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let x = unit_batch(&mut rng, &[32, 2]);
        let y = labels(&(0..32).map(|i| (i % 2) as f64).collect::<Vec<_>>());
        let opt = crate::optim::optimizer_preset("sgd").unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 79,
            checkpoint_every: 0,
            refresh_fraction: 1.0,
        };
        let mut pa = ps.clone();
        let oa = adversarial_train_sat(
            &g,
            &mut pa,
            &x,
            &y,
            None,
            &opt,
            &cfg,
            &SatConf { steps: 0, ..SatConf::default() },
        )
        .unwrap();
        let mut pb = ps.clone();
        let ob = train(&g, &mut pb, &x, &y, None, &opt, &cfg, &mut NoopObserver).unwrap();
        assert_eq!(pa.content_digest(), pb.content_digest());
        assert_eq!(oa.passes, ob.passes);

        let mut pc = ps.clone();
        let oc =
            adversarial_train_sat(&g, &mut pc, &x, &y, None, &opt, &cfg, &SatConf::default())
                .unwrap();
        assert_ne!(pc.content_digest(), pb.content_digest());
        let batches_per_epoch = 4;
        assert_eq!(oc.passes, ob.passes + 2 * batches_per_epoch * 7);
    }

    #[test]
    fn stored_batches_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let len = 2 * 1 * 4 * 4;
        let mk = |rng: &mut ChaCha8Rng| -> Tensor<f32> {
            let data: Vec<f32> = (0..len).map(|_| rng.random::<f32>()).collect();
            Tensor::new(&[2, 1, 4, 4], data).unwrap()
        };
        let adv = AdvBatch {
            originals: mk(&mut rng),
            adversarials: mk(&mut rng),
            labels: vec![3, 1],
            targets: Some(vec![0, 2]),
            surrogate_fingerprint: "smallcnn(1x8x8)w2c3#abc".into(),
            spec_hash: "0123456789abcdef".into(),
            seed: 4242,
        };
        let bytes = encode_adv_batch(&adv);
        assert_eq!(&bytes[..4], ADV_MAGIC);
        let back = decode_adv_batch(&bytes).unwrap();
        assert!(crate::tensor::bit_equal(&back.originals, &adv.originals));
        assert!(crate::tensor::bit_equal(&back.adversarials, &adv.adversarials));
        assert_eq!(back.labels, adv.labels);
        assert_eq!(back.targets, adv.targets);
        assert_eq!(back.surrogate_fingerprint, adv.surrogate_fingerprint);
        assert_eq!(back.spec_hash, adv.spec_hash);
        assert_eq!(back.seed, adv.seed);

        assert!(decode_adv_batch(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0, 1, 2]);
        assert!(decode_adv_batch(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_adv_batch(&bad).is_err());

        let dir = std::env::temp_dir().join(format!("advrt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("batch.fsab");
        save_adv_batch(&path, &adv).unwrap();
        let loaded = load_adv_batch(&path).unwrap();
        assert_eq!(loaded.labels, adv.labels);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn trained_model_is_beaten_white_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let n = 64;
        let mut data = Vec::with_capacity(n * 2);
        let mut ys = Vec::with_capacity(n);
        for i in 0..n {
            let cls = i % 2;
            let (cx, cy) = if cls == 0 { (0.3, 0.3) } else { (0.7, 0.7) };
            data.push((cx + 0.05 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0));
            data.push((cy + 0.05 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0));
            ys.push(cls as f64);
        }
        let x = Tensor::new(&[n, 2], data).unwrap();
        let y = labels(&ys);
        let (g, mut ps) = build_model::<f64>(
            &ArchSpec::Mlp { in_shape: vec![2], hidden: vec![8], classes: 2 },
            97,
        )
        .unwrap();
        let opt = crate::optim::optimizer_preset("sgd").unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 16,
            seed: 101,
            checkpoint_every: 0,
            refresh_fraction: 1.0,
        };
        train(&g, &mut ps, &x, &y, None, &opt, &cfg, &mut NoopObserver).unwrap();

        let logits = predict(&g, &ps, &x, Mode::Eval).unwrap();
        let mut correct = 0;
        for i in 0..n {
            let l = logits.row(i);
            let pred = if l[1].to_f64() > l[0].to_f64() { 1 } else { 0 };
            if pred == (i % 2) {
                correct += 1;
            }
        }
        assert!(correct as f64 / n as f64 > 0.95, "clean accuracy {correct}/{n}");

        let mut spec = AttackSpec::bim(0.3);
        spec.iterations = 25;
        spec.step_size = 0.3 / 10.0;
        let model = AttackModel::single(&g, &ps);
        let adv = bim(&model, &x, &y, &spec, None, 103).unwrap();
        let rate = success_rate(&adv, &g, &ps).unwrap();
        assert!(rate >= 0.9, "white-box success {rate}");
    }
}
