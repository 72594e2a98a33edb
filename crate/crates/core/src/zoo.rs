use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, NodeId, Op};
use crate::params::{sha256_hex, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Architecture families sized for single-machine experiments. The miniresnet
/// keeps skip connections and batch norm so backward-scaling and averaging
/// techniques have the structure they act on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchSpec {
    Mlp {
        in_shape: Vec<usize>,
        hidden: Vec<usize>,
        classes: usize,
    },
    SmallCnn {
        in_chw: [usize; 3],
        classes: usize,
        width: usize,
    },
    MiniResnet {
        in_chw: [usize; 3],
        classes: usize,
        width: usize,
        blocks: usize,
    },
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        match self {
            ArchSpec::Mlp { in_shape, hidden, classes } => {
                if *classes < 2 {
                    return bad(format!("mlp needs >= 2 classes, got {classes}"));
                }
                if in_shape.is_empty() || in_shape.iter().any(|&d| d == 0) {
                    return bad(format!("mlp input shape {in_shape:?} invalid"));
                }
                if hidden.iter().any(|&h| h == 0) {
                    return bad("mlp hidden width 0".into());
                }
            }
            ArchSpec::SmallCnn { in_chw, classes, width } => {
                if *classes < 2 {
                    return bad(format!("smallcnn needs >= 2 classes, got {classes}"));
                }
                if in_chw.iter().any(|&d| d == 0) || *width == 0 {
                    return bad(format!("smallcnn shape {in_chw:?} width {width} invalid"));
                }
                if in_chw[1] < 4 || in_chw[2] < 4 {
                    return bad("smallcnn input must be at least 4x4 for two pooling stages".into());
                }
            }
            ArchSpec::MiniResnet { in_chw, classes, width, blocks } => {
                if *classes < 2 {
                    return bad(format!("miniresnet needs >= 2 classes, got {classes}"));
                }
                if in_chw.iter().any(|&d| d == 0) || *width == 0 {
                    return bad(format!("miniresnet shape {in_chw:?} width {width} invalid"));
                }
                if *blocks == 0 {
                    return bad("miniresnet needs at least one residual block".into());
                }
                if in_chw[1] < 2 || in_chw[2] < 2 {
                    return bad("miniresnet input must be at least 2x2".into());
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        match self {
            ArchSpec::Mlp { classes, .. }
            | ArchSpec::SmallCnn { classes, .. }
            | ArchSpec::MiniResnet { classes, .. } => *classes,
        }
    }

    pub fn in_shape(&self) -> Vec<usize> {
        match self {
            ArchSpec::Mlp { in_shape, .. } => in_shape.clone(),
            ArchSpec::SmallCnn { in_chw, .. } | ArchSpec::MiniResnet { in_chw, .. } => {
                in_chw.to_vec()
            }
        }
    }

    /// Human-readable identity string; the fingerprint is its hash.
    pub fn id(&self) -> String {
        fn dims(v: &[usize]) -> String {
            v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
        }
        match self {
            ArchSpec::Mlp { in_shape, hidden, classes } => {
                format!("mlp({})h[{}]c{}", dims(in_shape), dims(hidden), classes)
            }
            ArchSpec::SmallCnn { in_chw, classes, width } => {
                format!("smallcnn({})w{}c{}", dims(in_chw), width, classes)
            }
            ArchSpec::MiniResnet { in_chw, classes, width, blocks } => {
                format!("miniresnet({})w{}b{}c{}", dims(in_chw), width, blocks, classes)
            }
        }
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.id().as_bytes())[..16].to_string()
    }
}

/// Six-member default target family: two MLP widths, two CNN widths, two
/// residual depths.
pub fn default_zoo(in_chw: [usize; 3], classes: usize) -> Vec<(String, ArchSpec)> {
    let flat = in_chw.to_vec();
    vec![
        (
            "mlp64".into(),
            ArchSpec::Mlp { in_shape: flat.clone(), hidden: vec![64], classes },
        ),
        (
            "mlp128".into(),
            ArchSpec::Mlp { in_shape: flat, hidden: vec![128], classes },
        ),
        ("cnn8".into(), ArchSpec::SmallCnn { in_chw, classes, width: 8 }),
        ("cnn16".into(), ArchSpec::SmallCnn { in_chw, classes, width: 16 }),
        (
            "res8b1".into(),
            ArchSpec::MiniResnet { in_chw, classes, width: 8, blocks: 1 },
        ),
        (
            "res8b2".into(),
            ArchSpec::MiniResnet { in_chw, classes, width: 8, blocks: 2 },
        ),
    ]
}

fn uniform_init<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape, data).unwrap()
}

struct BnParams {
    gamma: NodeId,
    beta: NodeId,
    rmean: usize,
    rvar: usize,
}

fn push_bn<S: Scalar>(
    ps: &mut ParamSet<S>,
    g: &mut Graph,
    prefix: &str,
    channels: usize,
) -> Result<BnParams> {
    let gi = ps.push(format!("{prefix}.gamma"), Tensor::full(&[channels], S::ONE), true)?;
    let bi = ps.push(format!("{prefix}.beta"), Tensor::zeros(&[channels]), true)?;
    let rm = ps.push(format!("{prefix}.rmean"), Tensor::zeros(&[channels]), false)?;
    let rv = ps.push(format!("{prefix}.rvar"), Tensor::full(&[channels], S::ONE), false)?;
    Ok(BnParams { gamma: g.param(gi), beta: g.param(bi), rmean: rm, rvar: rv })
}

/// Builds the graph and a freshly initialized parameter set: fan-in-scaled
/// uniform weights, zero biases, unit batch-norm scale. Deterministic in seed.
pub fn build_model<S: Scalar>(spec: &ArchSpec, seed: u64) -> Result<(Graph, ParamSet<S>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps: ParamSet<S> = ParamSet::new(spec.fingerprint());
    let mut g = Graph::new();
    g.input_shape = Some(spec.in_shape());

    match spec {
        ArchSpec::Mlp { in_shape, hidden, classes } => {
            let mut x = g.input;
            if in_shape.len() > 1 {
                x = g.flatten(x);
            }
            let mut dims = vec![in_shape.iter().product::<usize>()];
            dims.extend_from_slice(hidden);
            dims.push(*classes);
            for i in 0..dims.len() - 1 {
                let (din, dout) = (dims[i], dims[i + 1]);
                let wi = ps.push(format!("fc{i}.w"), uniform_init(&mut rng, &[din, dout], din), true)?;
                let bi = ps.push(format!("fc{i}.b"), Tensor::zeros(&[dout]), true)?;
                let w = g.param(wi);
                let b = g.param(bi);
                x = g.matmul(x, w);
                x = g.bias_add(x, b);
                if i + 2 < dims.len() {
                    x = g.relu(x);
                }
            }
            g.loss_softmax_ce(x);
        }
        ArchSpec::SmallCnn { in_chw, classes, width } => {
            let [c, h, w_] = *in_chw;
            let (w1, w2) = (*width, 2 * *width);
            let c1 = ps.push("conv1.w", uniform_init(&mut rng, &[w1, c, 3, 3], c * 9), true)?;
            let b1 = ps.push("conv1.b", Tensor::zeros(&[w1]), true)?;
            let c2 = ps.push("conv2.w", uniform_init(&mut rng, &[w2, w1, 3, 3], w1 * 9), true)?;
            let b2 = ps.push("conv2.b", Tensor::zeros(&[w2]), true)?;
            let fdim = w2 * (h / 4) * (w_ / 4);
            let fw = ps.push("fc.w", uniform_init(&mut rng, &[fdim, *classes], fdim), true)?;
            let fb = ps.push("fc.b", Tensor::zeros(&[*classes]), true)?;

            let c1n = g.param(c1);
            let b1n = g.param(b1);
            let mut x = g.conv2d(g.input, c1n, 1, 1);
            x = g.bias_add(x, b1n);
            x = g.relu(x);
            x = g.max_pool2(x);
            let c2n = g.param(c2);
            let b2n = g.param(b2);
            x = g.conv2d(x, c2n, 1, 1);
            x = g.bias_add(x, b2n);
            x = g.relu(x);
            x = g.max_pool2(x);
            x = g.flatten(x);
            let fwn = g.param(fw);
            let fbn = g.param(fb);
            x = g.matmul(x, fwn);
            x = g.bias_add(x, fbn);
            g.loss_softmax_ce(x);
        }
        ArchSpec::MiniResnet { in_chw, classes, width, blocks } => {
            let [c, h, w_] = *in_chw;
            let wd = *width;
            let sc = ps.push("stem.conv.w", uniform_init(&mut rng, &[wd, c, 3, 3], c * 9), true)?;
            let scn = g.param(sc);
            let mut x = g.conv2d(g.input, scn, 1, 1);
            let bn = push_bn(&mut ps, &mut g, "stem.bn", wd)?;
            x = g.batch_norm(x, bn.gamma, bn.beta, bn.rmean, bn.rvar);
            x = g.relu(x);

            for bi in 0..*blocks {
                let skip = x;
                let w1 = ps.push(
                    format!("block{bi}.conv1.w"),
                    uniform_init(&mut rng, &[wd, wd, 3, 3], wd * 9),
                    true,
                )?;
                let w1n = g.param(w1);
                let mut h_ = g.conv2d(x, w1n, 1, 1);
                let bn1 = push_bn(&mut ps, &mut g, &format!("block{bi}.bn1"), wd)?;
                h_ = g.batch_norm(h_, bn1.gamma, bn1.beta, bn1.rmean, bn1.rvar);
                h_ = g.relu(h_);
                let w2 = ps.push(
                    format!("block{bi}.conv2.w"),
                    uniform_init(&mut rng, &[wd, wd, 3, 3], wd * 9),
                    true,
                )?;
                let w2n = g.param(w2);
                h_ = g.conv2d(h_, w2n, 1, 1);
                let bn2 = push_bn(&mut ps, &mut g, &format!("block{bi}.bn2"), wd)?;
                h_ = g.batch_norm(h_, bn2.gamma, bn2.beta, bn2.rmean, bn2.rvar);
                g.mark_residual_branch(h_);
                x = g.add(h_, skip);
                x = g.relu(x);
            }

            x = g.max_pool2(x);
            x = g.flatten(x);
            let fdim = wd * (h / 2) * (w_ / 2);
            let fw = ps.push("fc.w", uniform_init(&mut rng, &[fdim, *classes], fdim), true)?;
            let fb = ps.push("fc.b", Tensor::zeros(&[*classes]), true)?;
            let fwn = g.param(fw);
            let fbn = g.param(fb);
            x = g.matmul(x, fwn);
            x = g.bias_add(x, fbn);
            g.loss_softmax_ce(x);
        }
    }

    Ok((g, ps))
}

/// Logits for a batch. Eval mode is side-effect-free and uses running
/// batch-norm statistics.
pub fn predict<S: Scalar>(
    graph: &Graph,
    params: &ParamSet<S>,
    batch: &Tensor<S>,
    mode: Mode,
) -> Result<Tensor<S>> {
    let fwd = graph.forward(params, batch, None, mode)?;
    let logits = fwd.value(graph.logits);
    if !logits.all_finite() {
        return Err(Error::NonFinite { node: "logits".into() });
    }
    Ok(logits.clone())
}

pub fn accuracy<S: Scalar>(logits: &Tensor<S>, labels: &Tensor<S>) -> f64 {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let mut correct = 0usize;
    for i in 0..b {
        let row = logits.row(i);
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == labels.data()[i].to_f64().round() as usize {
            correct += 1;
        }
    }
    correct as f64 / b as f64
}

const REFRESH_CHUNK: usize = 256;

/// Replaces batch-norm running statistics with statistics pooled over the
/// first ceil(fraction*N) examples, processed in one deterministic sweep.
/// Weights and biases are untouched; models without batch norm are a no-op.
pub fn refresh_bn_stats<S: Scalar>(
    graph: &Graph,
    params: &mut ParamSet<S>,
    data: &Tensor<S>,
    fraction: f64,
) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidSpec(format!("refresh fraction {fraction} outside (0,1]")));
    }
    let n_total = data.shape()[0];
    if n_total == 0 {
        return Err(Error::InvalidSpec("refresh over empty dataset".into()));
    }
    if !graph.nodes().iter().any(|n| matches!(n.op, Op::BatchNorm { .. })) {
        return Ok(());
    }
    let n = ((fraction * n_total as f64).ceil() as usize).clamp(1, n_total);
    let per_example = data.shape()[1..].to_vec();

    // per BN node: (count, mean, M2) merged with the parallel-variance rule
    let mut pooled: BTreeMap<(usize, usize), (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut start = 0usize;
    while start < n {
        let end = (start + REFRESH_CHUNK).min(n);
        let rows: Vec<&[S]> = (start..end).map(|i| data.example(i)).collect();
        let chunk = Tensor::stack(&per_example, &rows)?;
        let fwd = graph.forward(params, &chunk, None, Mode::Train)?;
        for u in &fwd.bn_updates {
            let key = (u.rmean_idx, u.rvar_idx);
            let nb = u.n_reduce as f64;
            let mean_b: Vec<f64> = u.mean.iter().map(|v| v.to_f64()).collect();
            let m2_b: Vec<f64> = u
                .var_unbiased
                .iter()
                .map(|v| v.to_f64() * (nb - 1.0).max(0.0))
                .collect();
            match pooled.get_mut(&key) {
                None => {
                    pooled.insert(key, (nb, mean_b, m2_b));
                }
                Some((na, mean_a, m2_a)) => {
                    let ntot = *na + nb;
                    for c in 0..mean_a.len() {
                        let delta = mean_b[c] - mean_a[c];
                        mean_a[c] += delta * nb / ntot;
                        m2_a[c] += m2_b[c] + delta * delta * *na * nb / ntot;
                    }
                    *na = ntot;
                }
            }
        }
        start = end;
    }

    for ((rm, rv), (count, mean, m2)) in pooled {
        let denom = (count - 1.0).max(1.0);
        let rmt = params.entry_mut(rm);
        for (dst, m) in rmt.tensor.data_mut().iter_mut().zip(&mean) {
            *dst = S::from_f64(*m);
        }
        let rvt = params.entry_mut(rv);
        for (dst, v) in rvt.tensor.data_mut().iter_mut().zip(&m2) {
            *dst = S::from_f64(v / denom);
        }
    }
    Ok(())
}

// ---- checkpoint format ----

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u32,
    pub seed: u64,
    pub optimizer: String,
    pub config_hash: String,
    pub arch: String,
    #[serde(default)]
    pub frozen: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn from_params<S: Scalar>(params: &ParamSet<S>, mut meta: CheckpointMeta) -> Self {
        meta.arch = params.fingerprint().to_string();
        meta.frozen = params
            .entries()
            .iter()
            .filter(|e| !e.trainable)
            .map(|e| e.name.clone())
            .collect();
        Checkpoint { meta, params: params.cast::<f32>() }
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&ckpt.meta).map_err(|e| Error::Format(e.to_string()))?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for e in ckpt.params.entries() {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("tensor name too long: {}", e.name)));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.tensor.ndim() as u8);
        for &d in e.tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("checkpoint truncated reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mlen = c.u32("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(mlen, "metadata")?)
        .map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let count = c.u32("tensor count")? as usize;
    let mut params: ParamSet<f32> = ParamSet::new(meta.arch.clone());
    for _ in 0..count {
        let nlen = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(nlen, "name")?)
            .map_err(|e| Error::Format(format!("tensor name: {e}")))?
            .to_string();
        let rank = c.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 4, "payload")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let trainable = !meta.frozen.contains(&name);
        params.push(name, Tensor::new(&shape, data)?, trainable)?;
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok(Checkpoint { meta, params })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

/// Loads a checkpoint, verifying the architecture fingerprint when one is
/// expected.
pub fn load_checkpoint(path: &Path, expected_fingerprint: Option<&str>) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    let ckpt = decode_checkpoint(&buf)?;
    if let Some(fp) = expected_fingerprint {
        if ckpt.meta.arch != fp {
            return Err(Error::Format(format!(
                "architecture fingerprint mismatch: checkpoint {} vs expected {fp}",
                ckpt.meta.arch
            )));
        }
    }
    Ok(ckpt)
}
