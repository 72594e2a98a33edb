use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

/// Batch-norm execution mode. Train normalizes with batch statistics and
/// reports them for a running update; eval uses the stored running values and
/// treats them as constants in backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub enum Op {
    Input,
    Param { idx: usize },
    Matmul { a: NodeId, b: NodeId },
    BiasAdd { a: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    Relu { a: NodeId },
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    MaxPool2 { x: NodeId },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, rmean: usize, rvar: usize },
    Flatten { x: NodeId },
    ResizeNearest { x: NodeId, oh: usize, ow: usize },
    SoftmaxCrossEntropy { logits: NodeId },
    MeanSquaredError { pred: NodeId },
    LogitSum { logits: NodeId },
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    /// Multiplier applied to the backward signal through this node; 1.0 gives
    /// the exact chain-rule gradient.
    pub grad_scale: f64,
    /// Multiplier applied to this node's forward output (and therefore, by the
    /// chain rule, to its backward signal as well).
    pub forward_scale: f64,
    pub label: String,
}

const BN_EPS: f64 = 1e-5;

/// Static acyclic compute graph. Node operands always refer to earlier nodes,
/// so node order is a topological order and backward visits each node once.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    pub input: NodeId,
    pub logits: NodeId,
    pub loss: Option<NodeId>,
    /// Output nodes of residual branches (the operand of a residual Add that
    /// is not the skip path). Gradient- and forward-scale wrappers act here.
    pub residual_branches: Vec<NodeId>,
    /// Per-example input shape, checked on every forward when present.
    pub input_shape: Option<Vec<usize>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: vec![Node {
                op: Op::Input,
                grad_scale: 1.0,
                forward_scale: 1.0,
                label: "input#0".into(),
            }],
            input: 0,
            logits: 0,
            loss: None,
            residual_branches: Vec::new(),
            input_shape: None,
        }
    }

    fn push(&mut self, op: Op, kind: &str) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            grad_scale: 1.0,
            forward_scale: 1.0,
            label: format!("{kind}#{id}"),
        });
        id
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut Node {
        &mut self.nodes[id]
    }

    pub fn param(&mut self, idx: usize) -> NodeId {
        self.push(Op::Param { idx }, "param")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Matmul { a, b }, "matmul")
    }

    pub fn bias_add(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::BiasAdd { a, bias }, "bias_add")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add { a, b }, "add")
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu { a }, "relu")
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        self.push(Op::Conv2d { x, w, stride, pad }, "conv2d")
    }

    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MaxPool2 { x }, "max_pool2")
    }

    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, rmean: usize, rvar: usize) -> NodeId {
        self.push(Op::BatchNorm { x, gamma, beta, rmean, rvar }, "batch_norm")
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Flatten { x }, "flatten")
    }

    pub fn resize_nearest(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        self.push(Op::ResizeNearest { x, oh, ow }, "resize_nearest")
    }

    pub fn mark_residual_branch(&mut self, id: NodeId) {
        self.residual_branches.push(id);
    }

    pub fn set_logits(&mut self, id: NodeId) {
        self.logits = id;
    }

    pub fn loss_softmax_ce(&mut self, logits: NodeId) -> NodeId {
        self.logits = logits;
        let id = self.push(Op::SoftmaxCrossEntropy { logits }, "softmax_ce");
        self.loss = Some(id);
        id
    }

    pub fn loss_mse(&mut self, pred: NodeId) -> NodeId {
        self.logits = pred;
        let id = self.push(Op::MeanSquaredError { pred }, "mse");
        self.loss = Some(id);
        id
    }

    pub fn loss_logit_sum(&mut self, logits: NodeId) -> NodeId {
        self.logits = logits;
        let id = self.push(Op::LogitSum { logits }, "logit_sum");
        self.loss = Some(id);
        id
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

enum Aux<S> {
    None,
    Pool(Vec<usize>),
    Bn { xhat: Tensor<S>, inv_std: Vec<f64> },
    Ce { probs: Tensor<S> },
    Resize(Vec<usize>),
}

/// Batch statistics reported by one batch-norm node in train mode, for the
/// caller to fold into the running estimates.
pub struct BnUpdate<S> {
    pub rmean_idx: usize,
    pub rvar_idx: usize,
    pub mean: Vec<S>,
    pub var_unbiased: Vec<S>,
    /// Number of elements reduced per channel (batch × spatial extent).
    pub n_reduce: usize,
}

pub struct FwdPass<S> {
    values: Vec<Option<Tensor<S>>>,
    aux: Vec<Aux<S>>,
    pub loss: Option<f64>,
    pub bn_updates: Vec<BnUpdate<S>>,
}

impl<S: Scalar> FwdPass<S> {
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        self.values[id].as_ref().expect("node value not computed")
    }
}

fn shape_err(context: &str, expected: &[usize], got: &[usize]) -> Error {
    Error::ShapeMismatch {
        context: context.into(),
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

/// Index map for nearest-neighbor resize of an HxW grid to OHxOW: for each
/// destination cell, the flat source offset. Shared by the graph op and the
/// input-transform path in attacks.
pub fn nearest_index_map(h: usize, w: usize, oh: usize, ow: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let sh = (i * h) / oh;
        for j in 0..ow {
            let sw = (j * w) / ow;
            map.push(sh * w + sw);
        }
    }
    map
}

fn label_values<S: Scalar>(labels: &Tensor<S>, batch: usize, classes: usize, context: &str) -> Result<Vec<usize>> {
    if labels.numel() != batch {
        return Err(shape_err(context, &[batch], labels.shape()));
    }
    let mut out = Vec::with_capacity(batch);
    for v in labels.data() {
        let y = v.to_f64();
        let idx = y.round() as usize;
        if y < -0.5 || idx >= classes {
            return Err(Error::InvalidSpec(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        out.push(idx);
    }
    Ok(out)
}

impl Graph {
    /// Runs the graph in node order. The loss node is evaluated only when
    /// labels are supplied; everything up to the logits is always computed.
    pub fn forward<S: Scalar>(
        &self,
        params: &ParamSet<S>,
        input: &Tensor<S>,
        labels: Option<&Tensor<S>>,
        mode: Mode,
    ) -> Result<FwdPass<S>> {
        if let Some(shape) = &self.input_shape {
            if input.shape().len() != shape.len() + 1 || &input.shape()[1..] != shape.as_slice() {
                return Err(shape_err("graph input", shape, input.shape()));
            }
        }
        let n = self.nodes.len();
        let mut values: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        let mut aux: Vec<Aux<S>> = (0..n).map(|_| Aux::None).collect();
        let mut bn_updates = Vec::new();
        let mut loss = None;

        for (id, node) in self.nodes.iter().enumerate() {
            if Some(id) == self.loss && labels.is_none() {
                continue;
            }
            let value = match &node.op {
                Op::Input => input.clone(),
                Op::Param { idx } => params.entry(*idx).tensor.clone(),
                Op::Matmul { a, b } => {
                    let (a, b) = (values[*a].as_ref().unwrap(), values[*b].as_ref().unwrap());
                    matmul_fwd(a, b)?
                }
                Op::BiasAdd { a, bias } => {
                    let (a, b) = (values[*a].as_ref().unwrap(), values[*bias].as_ref().unwrap());
                    bias_add_fwd(a, b)?
                }
                Op::Add { a, b } => {
                    let (a, b) = (values[*a].as_ref().unwrap(), values[*b].as_ref().unwrap());
                    a.zip(b, |x, y| x + y)?
                }
                Op::Relu { a } => values[*a].as_ref().unwrap().map(|v| v.max_s(S::ZERO)),
                Op::Conv2d { x, w, stride, pad } => {
                    let (x, w) = (values[*x].as_ref().unwrap(), values[*w].as_ref().unwrap());
                    conv2d_fwd(x, w, *stride, *pad)?
                }
                Op::MaxPool2 { x } => {
                    let (v, arg) = max_pool2_fwd(values[*x].as_ref().unwrap())?;
                    aux[id] = Aux::Pool(arg);
                    v
                }
                Op::BatchNorm { x, gamma, beta, rmean, rvar } => {
                    let x = values[*x].as_ref().unwrap();
                    let gamma = values[*gamma].as_ref().unwrap();
                    let beta = values[*beta].as_ref().unwrap();
                    let out = match mode {
                        Mode::Train => {
                            let r = bn_train_fwd(x, gamma, beta)?;
                            bn_updates.push(BnUpdate {
                                rmean_idx: *rmean,
                                rvar_idx: *rvar,
                                mean: r.batch_mean,
                                var_unbiased: r.batch_var_unbiased,
                                n_reduce: r.n_reduce,
                            });
                            aux[id] = Aux::Bn { xhat: r.xhat, inv_std: r.inv_std };
                            r.out
                        }
                        Mode::Eval => {
                            let rm = &params.entry(*rmean).tensor;
                            let rv = &params.entry(*rvar).tensor;
                            let r = bn_eval_fwd(x, gamma, beta, rm, rv)?;
                            aux[id] = Aux::Bn { xhat: r.xhat, inv_std: r.inv_std };
                            r.out
                        }
                    };
                    out
                }
                Op::Flatten { x } => {
                    let v = values[*x].as_ref().unwrap();
                    let b = v.shape()[0];
                    let rest: usize = v.shape()[1..].iter().product();
                    v.clone().reshape(&[b, rest])?
                }
                Op::ResizeNearest { x, oh, ow } => {
                    let v = values[*x].as_ref().unwrap();
                    let (out, map) = resize_nearest_fwd(v, *oh, *ow)?;
                    aux[id] = Aux::Resize(map);
                    out
                }
                Op::SoftmaxCrossEntropy { logits } => {
                    let z = values[*logits].as_ref().unwrap();
                    let labels = labels.unwrap();
                    let (l, probs) = softmax_ce_fwd(z, labels)?;
                    aux[id] = Aux::Ce { probs };
                    Tensor::scalar(S::from_f64(l))
                }
                Op::MeanSquaredError { pred } => {
                    let p = values[*pred].as_ref().unwrap();
                    let t = labels.unwrap();
                    if !p.same_shape(t) {
                        return Err(shape_err("mse targets", p.shape(), t.shape()));
                    }
                    let b = p.shape()[0] as f64;
                    let acc: f64 = p
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(x, y)| {
                            let d = x.to_f64() - y.to_f64();
                            0.5 * d * d
                        })
                        .sum();
                    Tensor::scalar(S::from_f64(acc / b))
                }
                Op::LogitSum { logits } => {
                    let z = values[*logits].as_ref().unwrap();
                    let b = z.shape()[0] as f64;
                    Tensor::scalar(S::from_f64(z.sum_f64() / b))
                }
            };
            let value = if node.forward_scale != 1.0 {
                value.map(|v| v * S::from_f64(node.forward_scale))
            } else {
                value
            };
            if Some(id) == self.loss {
                let l = value.data()[0].to_f64();
                if !l.is_finite() {
                    return Err(self.first_non_finite(&values, &value, id));
                }
                loss = Some(l);
            }
            values[id] = Some(value);
        }

        Ok(FwdPass { values, aux, loss, bn_updates })
    }

    fn first_non_finite<S: Scalar>(
        &self,
        values: &[Option<Tensor<S>>],
        loss_value: &Tensor<S>,
        loss_id: NodeId,
    ) -> Error {
        for (id, v) in values.iter().enumerate() {
            if let Some(t) = v {
                if !t.all_finite() {
                    return Error::NonFinite { node: self.nodes[id].label.clone() };
                }
            }
        }
        if !loss_value.all_finite() {
            return Error::NonFinite { node: self.nodes[loss_id].label.clone() };
        }
        Error::NonFinite { node: "unknown".into() }
    }

    /// Reverse pass over a completed forward. Returns gradients aligned with
    /// the ParamSet entries (zeros for entries that received none) and, when
    /// requested, the gradient with respect to the graph input.
    pub fn backward<S: Scalar>(
        &self,
        params: &ParamSet<S>,
        labels: Option<&Tensor<S>>,
        fwd: &FwdPass<S>,
        want_input_grad: bool,
    ) -> Result<(Vec<Tensor<S>>, Option<Tensor<S>>)> {
        let loss_id = self
            .loss
            .ok_or_else(|| Error::InvalidSpec("graph has no loss head".into()))?;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        grads[loss_id] = Some(Tensor::scalar(S::ONE));
        let mut param_grads = params.zeros_like();
        let mut input_grad: Option<Tensor<S>> = None;

        for id in (0..n).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let scale = node.grad_scale * node.forward_scale;
            let gout = if scale != 1.0 {
                let c = S::from_f64(scale);
                gout.map(|v| v * c)
            } else {
                gout
            };
            match &node.op {
                Op::Input => {
                    if want_input_grad {
                        accumulate(&mut input_grad, gout);
                    }
                }
                Op::Param { idx } => {
                    param_grads[*idx].add_scaled(&gout, S::ONE);
                }
                Op::Matmul { a, b } => {
                    let (av, bv) = (fwd.value(*a), fwd.value(*b));
                    let (da, db) = matmul_bwd(av, bv, &gout);
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::BiasAdd { a, bias } => {
                    let bv = fwd.value(*bias);
                    let db = bias_add_bwd(&gout, bv.numel());
                    accumulate(&mut grads[*a], gout);
                    accumulate(&mut grads[*bias], db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[*a], gout.clone());
                    accumulate(&mut grads[*b], gout);
                }
                Op::Relu { a } => {
                    let x = fwd.value(*a);
                    let da = gout.zip(x, |g, v| if v > S::ZERO { g } else { S::ZERO })?;
                    accumulate(&mut grads[*a], da);
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let (xv, wv) = (fwd.value(*x), fwd.value(*w));
                    let (dx, dw) = conv2d_bwd(xv, wv, &gout, *stride, *pad);
                    accumulate(&mut grads[*x], dx);
                    accumulate(&mut grads[*w], dw);
                }
                Op::MaxPool2 { x } => {
                    let Aux::Pool(arg) = &fwd.aux[id] else { unreachable!() };
                    let xv = fwd.value(*x);
                    let mut dx = Tensor::zeros(xv.shape());
                    for (k, &src) in arg.iter().enumerate() {
                        dx.data_mut()[src] += gout.data()[k];
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::BatchNorm { x, gamma, beta, .. } => {
                    let Aux::Bn { xhat, inv_std } = &fwd.aux[id] else { unreachable!() };
                    let gv = fwd.value(*gamma);
                    let (dx, dgamma, dbeta) =
                        bn_bwd(xhat, inv_std, gv, &gout, self.bn_was_train(fwd, id))?;
                    accumulate(&mut grads[*x], dx);
                    accumulate(&mut grads[*gamma], dgamma);
                    accumulate(&mut grads[*beta], dbeta);
                }
                Op::Flatten { x } => {
                    let xv = fwd.value(*x);
                    let dx = gout.clone().reshape(xv.shape())?;
                    accumulate(&mut grads[*x], dx);
                }
                Op::ResizeNearest { x, .. } => {
                    let Aux::Resize(map) = &fwd.aux[id] else { unreachable!() };
                    let xv = fwd.value(*x);
                    let dx = resize_nearest_bwd(xv.shape(), &gout, map);
                    accumulate(&mut grads[*x], dx);
                }
                Op::SoftmaxCrossEntropy { logits } => {
                    let Aux::Ce { probs } = &fwd.aux[id] else { unreachable!() };
                    let labels = labels.ok_or_else(|| Error::InvalidSpec("labels required".into()))?;
                    let (bsz, classes) = (probs.shape()[0], probs.shape()[1]);
                    let y = label_values(labels, bsz, classes, "softmax_ce labels")?;
                    let g = gout.data()[0];
                    let mut dz = probs.clone();
                    let inv_b = S::from_f64(1.0 / bsz as f64);
                    for (b, &yb) in y.iter().enumerate() {
                        let off = b * classes;
                        dz.data_mut()[off + yb] -= S::ONE;
                        for c in 0..classes {
                            let v = &mut dz.data_mut()[off + c];
                            *v = *v * g * inv_b;
                        }
                    }
                    accumulate(&mut grads[*logits], dz);
                }
                Op::MeanSquaredError { pred } => {
                    let p = fwd.value(*pred);
                    let t = labels.ok_or_else(|| Error::InvalidSpec("targets required".into()))?;
                    let g = gout.data()[0];
                    let inv_b = S::from_f64(1.0 / p.shape()[0] as f64);
                    let dp = p.zip(t, |x, y| (x - y) * g * inv_b)?;
                    accumulate(&mut grads[*pred], dp);
                }
                Op::LogitSum { logits } => {
                    let z = fwd.value(*logits);
                    let g = gout.data()[0];
                    let inv_b = S::from_f64(1.0 / z.shape()[0] as f64);
                    let dz = Tensor::full(z.shape(), g * inv_b);
                    accumulate(&mut grads[*logits], dz);
                }
            }
        }

        Ok((param_grads, input_grad))
    }

    fn bn_was_train<S: Scalar>(&self, fwd: &FwdPass<S>, id: NodeId) -> bool {
        if let Op::BatchNorm { rmean, .. } = self.nodes[id].op {
            fwd.bn_updates.iter().any(|u| u.rmean_idx == rmean)
        } else {
            false
        }
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        Some(acc) => acc.add_scaled(&g, S::ONE),
        None => *slot = Some(g),
    }
}

/// Mean loss and parameter gradients in one pass.
pub fn forward_backward<S: Scalar>(
    graph: &Graph,
    params: &ParamSet<S>,
    inputs: &Tensor<S>,
    labels: &Tensor<S>,
    mode: Mode,
) -> Result<(f64, Vec<Tensor<S>>)> {
    let fwd = graph.forward(params, inputs, Some(labels), mode)?;
    let loss = fwd.loss.unwrap();
    let (grads, _) = graph.backward(params, Some(labels), &fwd, false)?;
    Ok((loss, grads))
}

/// Gradient of the mean loss with respect to the inputs; parameters untouched.
pub fn grad_wrt_input<S: Scalar>(
    graph: &Graph,
    params: &ParamSet<S>,
    inputs: &Tensor<S>,
    labels: &Tensor<S>,
    mode: Mode,
) -> Result<Tensor<S>> {
    let fwd = graph.forward(params, inputs, Some(labels), mode)?;
    let (_, ig) = graph.backward(params, Some(labels), &fwd, true)?;
    Ok(ig.expect("input gradient requested"))
}

/// Hessian-vector product via central finite differences of gradients:
/// (g(w + h v̂) − g(w − h v̂)) · ‖v‖ / (2h), h = δ·(1 + ‖w‖). Truncation error
/// is O(h²).
pub fn hvp<F>(mut grad_at: F, w: &[f64], v: &[f64], delta: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if vnorm == 0.0 {
        return Err(Error::ZeroVector);
    }
    let wnorm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let h = delta * (1.0 + wnorm);
    let mut wp = w.to_vec();
    let mut wm = w.to_vec();
    for i in 0..w.len() {
        let step = h * v[i] / vnorm;
        wp[i] += step;
        wm[i] -= step;
    }
    let gp = grad_at(&wp)?;
    let gm = grad_at(&wm)?;
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(p, m)| (p - m) * vnorm / (2.0 * h))
        .collect())
}

// ---- kernels ----

fn matmul_fwd<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for l in 0..k {
                acc += ad[i * k + l].to_f64() * bd[l * n + j].to_f64();
            }
            out.data_mut()[i * n + j] = S::from_f64(acc);
        }
    }
    Ok(out)
}

fn matmul_bwd<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, g: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    for i in 0..m {
        for l in 0..k {
            let mut acc = 0.0f64;
            for j in 0..n {
                acc += gd[i * n + j].to_f64() * bd[l * n + j].to_f64();
            }
            da.data_mut()[i * k + l] = S::from_f64(acc);
        }
    }
    for l in 0..k {
        for j in 0..n {
            let mut acc = 0.0f64;
            for i in 0..m {
                acc += ad[i * k + l].to_f64() * gd[i * n + j].to_f64();
            }
            db.data_mut()[l * n + j] = S::from_f64(acc);
        }
    }
    (da, db)
}

fn bias_add_fwd<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let channels = b.numel();
    let ok = match a.ndim() {
        2 => a.shape()[1] == channels,
        4 => a.shape()[1] == channels,
        _ => false,
    };
    if !ok || b.ndim() != 1 {
        return Err(shape_err("bias_add", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    if a.ndim() == 2 {
        let n = channels;
        for row in 0..a.shape()[0] {
            for c in 0..n {
                out.data_mut()[row * n + c] += b.data()[c];
            }
        }
    } else {
        let (bsz, c_n, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
        let hw = h * w;
        for bi in 0..bsz {
            for c in 0..c_n {
                let base = (bi * c_n + c) * hw;
                let bv = b.data()[c];
                for k in 0..hw {
                    out.data_mut()[base + k] += bv;
                }
            }
        }
    }
    Ok(out)
}

fn bias_add_bwd<S: Scalar>(g: &Tensor<S>, channels: usize) -> Tensor<S> {
    let mut acc = vec![0.0f64; channels];
    if g.ndim() == 2 {
        for row in 0..g.shape()[0] {
            for c in 0..channels {
                acc[c] += g.data()[row * channels + c].to_f64();
            }
        }
    } else {
        let (bsz, c_n, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
        let hw = h * w;
        for bi in 0..bsz {
            for c in 0..c_n {
                let base = (bi * c_n + c) * hw;
                for k in 0..hw {
                    acc[c] += g.data()[base + k].to_f64();
                }
            }
        }
    }
    Tensor::from_vec(acc.into_iter().map(S::from_f64).collect())
}

fn conv2d_fwd<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
    if x.ndim() != 4 || w.ndim() != 4 || x.shape()[1] != w.shape()[1] {
        return Err(shape_err("conv2d", x.shape(), w.shape()));
    }
    let (bsz, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
        return Err(shape_err("conv2d size", x.shape(), w.shape()));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[bsz, cout, oh, ow]);
    let (xd, wdat) = (x.data(), w.data());
    for b in 0..bsz {
        for co in 0..cout {
            let wco = co * cin * kh * kw;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..cin {
                        let xbase = ((b * cin + ci) * h) * wd;
                        let wbase = wco + ci * kh * kw;
                        for ki in 0..kh {
                            let ih = i * stride + ki;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let row = xbase + (ih - pad) * wd;
                            let wrow = wbase + ki * kw;
                            for kj in 0..kw {
                                let iw = j * stride + kj;
                                if iw < pad || iw - pad >= wd {
                                    continue;
                                }
                                acc += xd[row + (iw - pad)].to_f64() * wdat[wrow + kj].to_f64();
                            }
                        }
                    }
                    out.data_mut()[((b * cout + co) * oh + i) * ow + j] = S::from_f64(acc);
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_bwd<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    g: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> (Tensor<S>, Tensor<S>) {
    let (bsz, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let mut dx = vec![0.0f64; x.numel()];
    let mut dw = vec![0.0f64; w.numel()];
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    for b in 0..bsz {
        for co in 0..cout {
            let wco = co * cin * kh * kw;
            for i in 0..oh {
                for j in 0..ow {
                    let gv = gd[((b * cout + co) * oh + i) * ow + j].to_f64();
                    if gv == 0.0 {
                        continue;
                    }
                    for ci in 0..cin {
                        let xbase = ((b * cin + ci) * h) * wd;
                        let wbase = wco + ci * kh * kw;
                        for ki in 0..kh {
                            let ih = i * stride + ki;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let row = xbase + (ih - pad) * wd;
                            let wrow = wbase + ki * kw;
                            for kj in 0..kw {
                                let iw = j * stride + kj;
                                if iw < pad || iw - pad >= wd {
                                    continue;
                                }
                                dx[row + (iw - pad)] += gv * wdat[wrow + kj].to_f64();
                                dw[wrow + kj] += gv * xd[row + (iw - pad)].to_f64();
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = Tensor::new(x.shape(), dx.into_iter().map(S::from_f64).collect()).unwrap();
    let dw = Tensor::new(w.shape(), dw.into_iter().map(S::from_f64).collect()).unwrap();
    (dx, dw)
}

fn max_pool2_fwd<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>)> {
    if x.ndim() != 4 || x.shape()[2] < 2 || x.shape()[3] < 2 {
        return Err(shape_err("max_pool2", &[0, 0, 2, 2], x.shape()));
    }
    let (bsz, c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[bsz, c_n, oh, ow]);
    let mut arg = vec![0usize; bsz * c_n * oh * ow];
    let xd = x.data();
    let mut k = 0;
    for b in 0..bsz {
        for c in 0..c_n {
            let base = (b * c_n + c) * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best_idx = base + (2 * i) * w + 2 * j;
                    let mut best = xd[best_idx];
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                    out.data_mut()[k] = best;
                    arg[k] = best_idx;
                    k += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

struct BnFwd<S> {
    out: Tensor<S>,
    xhat: Tensor<S>,
    inv_std: Vec<f64>,
    batch_mean: Vec<S>,
    batch_var_unbiased: Vec<S>,
    n_reduce: usize,
}

fn bn_axes<S: Scalar>(x: &Tensor<S>) -> Result<(usize, usize)> {
    match x.ndim() {
        2 => Ok((x.shape()[1], x.shape()[0])),
        4 => Ok((x.shape()[1], x.shape()[0] * x.shape()[2] * x.shape()[3])),
        _ => Err(shape_err("batch_norm", &[0, 0], x.shape())),
    }
}

fn bn_for_each_channel<S: Scalar>(x: &Tensor<S>, c: usize, mut f: impl FnMut(usize)) {
    if x.ndim() == 2 {
        let (b, d) = (x.shape()[0], x.shape()[1]);
        for row in 0..b {
            f(row * d + c);
        }
    } else {
        let (b, c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let hw = h * w;
        for bi in 0..b {
            let base = (bi * c_n + c) * hw;
            for k in 0..hw {
                f(base + k);
            }
        }
    }
}

fn bn_train_fwd<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>) -> Result<BnFwd<S>> {
    let (channels, n) = bn_axes(x)?;
    if gamma.numel() != channels || beta.numel() != channels {
        return Err(shape_err("batch_norm affine", &[channels], gamma.shape()));
    }
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = vec![0.0f64; channels];
    let mut means = Vec::with_capacity(channels);
    let mut vars_unb = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut sum = 0.0f64;
        bn_for_each_channel(x, c, |i| sum += x.data()[i].to_f64());
        let mean = sum / n as f64;
        let mut ss = 0.0f64;
        bn_for_each_channel(x, c, |i| {
            let d = x.data()[i].to_f64() - mean;
            ss += d * d;
        });
        let var = ss / n as f64;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        inv_std[c] = istd;
        let (g, b) = (gamma.data()[c].to_f64(), beta.data()[c].to_f64());
        bn_for_each_channel(x, c, |i| {
            let xh = (x.data()[i].to_f64() - mean) * istd;
            xhat.data_mut()[i] = S::from_f64(xh);
            out.data_mut()[i] = S::from_f64(g * xh + b);
        });
        means.push(S::from_f64(mean));
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        vars_unb.push(S::from_f64(ss / denom));
    }
    Ok(BnFwd {
        out,
        xhat,
        inv_std,
        batch_mean: means,
        batch_var_unbiased: vars_unb,
        n_reduce: n,
    })
}

fn bn_eval_fwd<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    rmean: &Tensor<S>,
    rvar: &Tensor<S>,
) -> Result<BnFwd<S>> {
    let (channels, _) = bn_axes(x)?;
    if gamma.numel() != channels || rmean.numel() != channels || rvar.numel() != channels {
        return Err(shape_err("batch_norm running", &[channels], rmean.shape()));
    }
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = vec![0.0f64; channels];
    for c in 0..channels {
        let mean = rmean.data()[c].to_f64();
        let istd = 1.0 / (rvar.data()[c].to_f64() + BN_EPS).sqrt();
        inv_std[c] = istd;
        let (g, b) = (gamma.data()[c].to_f64(), beta.data()[c].to_f64());
        bn_for_each_channel(x, c, |i| {
            let xh = (x.data()[i].to_f64() - mean) * istd;
            xhat.data_mut()[i] = S::from_f64(xh);
            out.data_mut()[i] = S::from_f64(g * xh + b);
        });
    }
    Ok(BnFwd {
        out,
        xhat,
        inv_std,
        batch_mean: Vec::new(),
        batch_var_unbiased: Vec::new(),
        n_reduce: 0,
    })
}

fn bn_bwd<S: Scalar>(
    xhat: &Tensor<S>,
    inv_std: &[f64],
    gamma: &Tensor<S>,
    g: &Tensor<S>,
    train: bool,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (channels, n) = bn_axes(xhat)?;
    let mut dx = Tensor::zeros(xhat.shape());
    let mut dgamma = Tensor::zeros(&[channels]);
    let mut dbeta = Tensor::zeros(&[channels]);
    for c in 0..channels {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        bn_for_each_channel(xhat, c, |i| {
            let gv = g.data()[i].to_f64();
            sum_g += gv;
            sum_gx += gv * xhat.data()[i].to_f64();
        });
        dgamma.data_mut()[c] = S::from_f64(sum_gx);
        dbeta.data_mut()[c] = S::from_f64(sum_g);
        let gam = gamma.data()[c].to_f64();
        let istd = inv_std[c];
        if train {
            let nf = n as f64;
            bn_for_each_channel(xhat, c, |i| {
                let gv = g.data()[i].to_f64();
                let xh = xhat.data()[i].to_f64();
                let v = gam * istd / nf * (nf * gv - sum_g - xh * sum_gx);
                dx.data_mut()[i] = S::from_f64(v);
            });
        } else {
            bn_for_each_channel(xhat, c, |i| {
                let gv = g.data()[i].to_f64();
                dx.data_mut()[i] = S::from_f64(gv * gam * istd);
            });
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub fn resize_nearest_fwd<S: Scalar>(x: &Tensor<S>, oh: usize, ow: usize) -> Result<(Tensor<S>, Vec<usize>)> {
    if x.ndim() != 4 {
        return Err(shape_err("resize_nearest", &[0, 0, 0, 0], x.shape()));
    }
    let (bsz, c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidSpec("resize target must be positive".into()));
    }
    let map = nearest_index_map(h, w, oh, ow);
    let mut out = Tensor::zeros(&[bsz, c_n, oh, ow]);
    for b in 0..bsz {
        for c in 0..c_n {
            let src = (b * c_n + c) * h * w;
            let dst = (b * c_n + c) * oh * ow;
            for (k, &m) in map.iter().enumerate() {
                out.data_mut()[dst + k] = x.data()[src + m];
            }
        }
    }
    Ok((out, map))
}

pub fn resize_nearest_bwd<S: Scalar>(in_shape: &[usize], g: &Tensor<S>, map: &[usize]) -> Tensor<S> {
    let (bsz, c_n, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let mut dx = Tensor::zeros(in_shape);
    for b in 0..bsz {
        for c in 0..c_n {
            let src = (b * c_n + c) * h * w;
            let dst = (b * c_n + c) * oh * ow;
            for (k, &m) in map.iter().enumerate() {
                dx.data_mut()[src + m] += g.data()[dst + k];
            }
        }
    }
    dx
}

fn softmax_ce_fwd<S: Scalar>(z: &Tensor<S>, labels: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
    if z.ndim() != 2 {
        return Err(shape_err("softmax_ce logits", &[0, 0], z.shape()));
    }
    let (bsz, classes) = (z.shape()[0], z.shape()[1]);
    let y = label_values(labels, bsz, classes, "softmax_ce labels")?;
    let mut probs = Tensor::zeros(z.shape());
    let mut total = 0.0f64;
    for b in 0..bsz {
        let row = z.row(b);
        let m = row.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(v.to_f64()));
        let mut sumexp = 0.0f64;
        for v in row {
            sumexp += (v.to_f64() - m).exp();
        }
        let lse = sumexp.ln();
        total += lse - (row[y[b]].to_f64() - m);
        for c in 0..classes {
            probs.data_mut()[b * classes + c] = S::from_f64((row[c].to_f64() - m).exp() / sumexp);
        }
    }
    Ok((total / bsz as f64, probs))
}

pub fn apply_bn_updates<S: Scalar>(params: &mut ParamSet<S>, updates: &[BnUpdate<S>], momentum: f64) {
    let m = S::from_f64(momentum);
    let keep = S::from_f64(1.0 - momentum);
    for u in updates {
        let rm = params.entry_mut(u.rmean_idx);
        for (r, &b) in rm.tensor.data_mut().iter_mut().zip(&u.mean) {
            *r = *r * keep + b * m;
        }
        let rv = params.entry_mut(u.rvar_idx);
        for (r, &b) in rv.tensor.data_mut().iter_mut().zip(&u.var_unbiased) {
            *r = *r * keep + b * m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::bit_equal;

    fn linear_unit() -> (Graph, ParamSet<f64>) {
        // pred = x·w, loss = ½(pred − y)²
        let mut ps = ParamSet::new("test");
        let wi = ps.push("w", Tensor::new(&[1, 1], vec![2.0]).unwrap(), true).unwrap();
        let mut g = Graph::new();
        let w = g.param(wi);
        let p = g.matmul(g.input, w);
        g.loss_mse(p);
        (g, ps)
    }

    #[test]
    fn linear_unit_loss_and_grad() {
        let (g, ps) = linear_unit();
        let x = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let y = Tensor::new(&[1, 1], vec![0.0]).unwrap();
        let (loss, grads) = forward_backward(&g, &ps, &x, &y, Mode::Eval).unwrap();
        assert_eq!(loss, 2.0);
        assert_eq!(grads[0].data(), &[2.0]);
    }

    #[test]
    fn zero_weight_softmax_gives_ln_c() {
        for classes in [2usize, 5, 10] {
            let mut ps = ParamSet::new("test");
            let wi = ps.push("w", Tensor::zeros(&[3, classes]), true).unwrap();
            let mut g = Graph::new();
            let w = g.param(wi);
            let z = g.matmul(g.input, w);
            g.loss_softmax_ce(z);
            let x = Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 1.5]).unwrap();
            let y = Tensor::from_vec(vec![0.0, 1.0]);
            let (loss, _) = forward_backward(&g, &ps, &x, &y, Mode::Eval).unwrap();
            assert!((loss - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_input_gradient_is_weight() {
        // L(x) = mean over batch of Σ c·x with one example: gradient = c.
        let c = [0.5f64, -1.25, 3.0];
        let mut ps = ParamSet::new("test");
        let wi = ps.push("c", Tensor::new(&[3, 1], c.to_vec()).unwrap(), true).unwrap();
        let mut g = Graph::new();
        let w = g.param(wi);
        let z = g.matmul(g.input, w);
        g.loss_logit_sum(z);
        let x = Tensor::new(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let y = Tensor::scalar(0.0);
        let gx = grad_wrt_input(&g, &ps, &x, &y, Mode::Eval).unwrap();
        assert_eq!(gx.data(), &c[..]);
    }

    #[test]
    fn symmetric_batch_norm_point_has_exact_zero_input_gradient() {
        let mut ps = ParamSet::new("test");
        let gi = ps.push("bn.gamma", Tensor::from_vec(vec![1.0f64, 1.0]), true).unwrap();
        let bi = ps.push("bn.beta", Tensor::zeros(&[2]), true).unwrap();
        let rm = ps.push("bn.rmean", Tensor::zeros(&[2]), false).unwrap();
        let rv = ps.push("bn.rvar", Tensor::from_vec(vec![1.0f64, 1.0]), false).unwrap();
        let wi = ps
            .push("w", Tensor::new(&[2, 2], vec![0.7, -0.2, 0.4, 1.1]).unwrap(), true)
            .unwrap();
        let mut g = Graph::new();
        let gamma = g.param(gi);
        let beta = g.param(bi);
        let bn = g.batch_norm(g.input, gamma, beta, rm, rv);
        let w = g.param(wi);
        let z = g.matmul(bn, w);
        g.loss_softmax_ce(z);
        // identical examples: batch statistics absorb any common shift
        let x = Tensor::new(&[4, 2], vec![0.3, -0.7].repeat(4)).unwrap();
        let y = Tensor::from_vec(vec![1.0; 4]);
        let gx = grad_wrt_input(&g, &ps, &x, &y, Mode::Train).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0), "{gx:?}");
    }

    #[test]
    fn grad_scale_multiplies_exactly_one_branch() {
        // two-branch add: z = relu(x·w) + relu(x·w), scale one branch by γ
        fn build(gamma: f64) -> (Graph, ParamSet<f64>) {
            let mut ps = ParamSet::new("test");
            let wi = ps.push("w", Tensor::new(&[2, 2], vec![0.5, -0.3, 0.8, 0.1]).unwrap(), true).unwrap();
            let vi = ps.push("v", Tensor::new(&[2, 2], vec![1.0, 0.2, -0.6, 0.9]).unwrap(), true).unwrap();
            let mut g = Graph::new();
            let w = g.param(wi);
            let v = g.param(vi);
            let b1 = g.matmul(g.input, w);
            let r1 = g.relu(b1);
            let b2 = g.matmul(g.input, v);
            let r2 = g.relu(b2);
            g.node_mut(r2).grad_scale = gamma;
            let s = g.add(r1, r2);
            g.loss_logit_sum(s);
            (g, ps)
        }
        let x = Tensor::new(&[1, 2], vec![0.4, 0.7]).unwrap();
        let y = Tensor::scalar(0.0);
        let (g1, p1) = build(1.0);
        let (_, base) = forward_backward(&g1, &p1, &x, &y, Mode::Eval).unwrap();
        let (g3, p3) = build(3.0);
        let (_, scaled) = forward_backward(&g3, &p3, &x, &y, Mode::Eval).unwrap();
        // scaled branch parameter gradient is exactly 3x
        for (a, b) in base[1].data().iter().zip(scaled[1].data()) {
            assert_eq!(*b, a * 3.0);
        }
        // untouched branch unchanged
        assert_eq!(base[0].data(), scaled[0].data());
    }

    #[test]
    fn backward_is_deterministic() {
        let (g, ps) = linear_unit();
        let x = Tensor::new(&[1, 1], vec![0.37]).unwrap();
        let y = Tensor::new(&[1, 1], vec![0.11]).unwrap();
        let (_, g1) = forward_backward(&g, &ps, &x, &y, Mode::Eval).unwrap();
        let (_, g2) = forward_backward(&g, &ps, &x, &y, Mode::Eval).unwrap();
        assert!(bit_equal(&g1[0], &g2[0]));
    }

    #[test]
    fn non_finite_loss_names_offending_node() {
        let mut ps = ParamSet::new("test");
        let wi = ps
            .push("w", Tensor::new(&[1, 1], vec![f64::MAX]).unwrap(), true)
            .unwrap();
        let mut g = Graph::new();
        let w = g.param(wi);
        let p = g.matmul(g.input, w);
        g.loss_mse(p);
        let x = Tensor::new(&[1, 1], vec![f64::MAX]).unwrap();
        let y = Tensor::new(&[1, 1], vec![0.0]).unwrap();
        let err = forward_backward(&g, &ps, &x, &y, Mode::Eval).unwrap_err();
        match err {
            Error::NonFinite { node } => assert!(node.contains("matmul"), "{node}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn hvp_matches_analytic_quadratic() {
        // L(w) = ½ wᵀ diag(2,4) w, gradient (2w₀, 4w₁)
        let grad = |w: &[f64]| Ok(vec![2.0 * w[0], 4.0 * w[1]]);
        let w = [0.3, -0.8];
        let hv = hvp(grad, &w, &[1.0, 1.0], 1e-3).unwrap();
        assert!((hv[0] - 2.0).abs() < 1e-6 && (hv[1] - 4.0).abs() < 1e-6);
        let hv = hvp(grad, &w, &[1.0, 0.0], 1e-3).unwrap();
        assert!((hv[0] - 2.0).abs() < 1e-6 && hv[1].abs() < 1e-6);
    }

    #[test]
    fn hvp_is_linear_in_v() {
        let grad = |w: &[f64]| {
            Ok(vec![
                2.0 * w[0] + 0.5 * w[1],
                0.5 * w[0] + 3.0 * w[1] + w[2],
                w[1] + 1.5 * w[2],
            ])
        };
        let w = [0.2, 0.4, -0.6];
        let v = [0.3, -1.1, 0.7];
        let hv = hvp(grad, &w, &v, 1e-3).unwrap();
        let av: Vec<f64> = v.iter().map(|x| 2.5 * x).collect();
        let hav = hvp(grad, &w, &av, 1e-3).unwrap();
        for (a, b) in hav.iter().zip(&hv) {
            assert!((a - 2.5 * b).abs() <= 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn hvp_rejects_zero_vector() {
        let grad = |w: &[f64]| Ok(w.to_vec());
        assert!(matches!(hvp(grad, &[1.0], &[0.0], 1e-3), Err(Error::ZeroVector)));
    }

    #[test]
    fn resize_identity_when_same_size() {
        let x = Tensor::new(&[1, 1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        let (out, _) = resize_nearest_fwd(&x, 3, 3).unwrap();
        assert!(bit_equal(&x, &out));
    }
}
