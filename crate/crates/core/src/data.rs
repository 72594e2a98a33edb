//! Dataset acquisition: synthetic generators, bit-exact readers and writers
//! for the common public formats, relabel-by-attack construction, and
//! evaluation-set selection.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{bim, success_rate, AdvBatch, AttackModel, AttackSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};
use crate::zoo::predict;

pub const DATASET_MAGIC: &[u8; 4] = b"FSDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "origin", rename_all = "snake_case")]
pub enum Provenance {
    Generator { kind: String, n: usize, classes: usize, noise: f64, seed: u64 },
    SourceFile { format: String, files: Vec<String> },
    Construction {
        base: String,
        mode: String,
        epsilon: f64,
        steps: usize,
        seed: u64,
        kept: f64,
    },
}

/// Immutable labeled tensor collection. Inputs live in [0,1]; storage is f32
/// to match the on-disk format exactly.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Tensor<f32>,
    pub labels: Vec<u16>,
    pub classes: usize,
    pub split: String,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::InvalidSpec("dataset needs at least 1 class".into()));
        }
        if self.labels.len() != self.n() {
            return Err(Error::ShapeMismatch {
                context: "dataset labels".into(),
                expected: vec![self.n()],
                got: vec![self.labels.len()],
            });
        }
        if let Some(l) = self.labels.iter().find(|l| **l as usize >= self.classes) {
            return Err(Error::InvalidSpec(format!(
                "label {l} outside {} classes",
                self.classes
            )));
        }
        if self.inputs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidSpec("dataset inputs leave [0,1]".into()));
        }
        Ok(())
    }

    pub fn inputs_as<S: Scalar>(&self) -> Tensor<S> {
        self.inputs.cast()
    }

    pub fn labels_as<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_vec(self.labels.iter().map(|l| S::from_f64(*l as f64)).collect())
    }

    pub fn subset(&self, indices: &[usize], split: &str) -> Result<Dataset> {
        let per = self.example_shape().to_vec();
        let mut rows: Vec<&[f32]> = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n() {
                return Err(Error::InvalidSpec(format!("index {i} outside dataset of {}", self.n())));
            }
            rows.push(self.inputs.example(i));
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            inputs: Tensor::stack(&per, &rows)?,
            labels,
            classes: self.classes,
            split: split.to_string(),
            provenance: self.provenance.clone(),
        })
    }
}

// ---- synthetic generators ----

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub const IMAGE_SIDE: usize = 8;

/// Deterministic toy datasets. Labels cycle through the classes so the
/// histogram is balanced within one example.
pub fn gen_synthetic(
    kind: &str,
    n: usize,
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidSpec(format!("need >= 2 classes, got {classes}")));
    }
    if n < classes {
        return Err(Error::InvalidSpec(format!("n {n} below class count {classes}")));
    }
    if noise < 0.0 {
        return Err(Error::InvalidSpec(format!("noise {noise} negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u16> = (0..n).map(|i| (i % classes) as u16).collect();
    let inputs: Tensor<f32> = match kind {
        "blobs" => {
            let mut data = Vec::with_capacity(n * 2);
            for &l in &labels {
                let ang = std::f64::consts::TAU * l as f64 / classes as f64;
                let (cx, cy) = (0.5 + 0.3 * ang.cos(), 0.5 + 0.3 * ang.sin());
                data.push((cx + noise * gaussian(&mut rng)).clamp(0.0, 1.0) as f32);
                data.push((cy + noise * gaussian(&mut rng)).clamp(0.0, 1.0) as f32);
            }
            Tensor::new(&[n, 2], data)?
        }
        "spirals" => {
            let mut data = Vec::with_capacity(n * 2);
            for (i, &l) in labels.iter().enumerate() {
                let t = 0.2 + 0.8 * ((i / classes) as f64 / (n / classes).max(1) as f64);
                let ang = std::f64::consts::TAU * (0.75 * t + l as f64 / classes as f64);
                let r = 0.38 * t;
                data.push((0.5 + r * ang.cos() + noise * gaussian(&mut rng)).clamp(0.0, 1.0) as f32);
                data.push((0.5 + r * ang.sin() + noise * gaussian(&mut rng)).clamp(0.0, 1.0) as f32);
            }
            Tensor::new(&[n, 2], data)?
        }
        "patterned-images" => {
            let h = IMAGE_SIDE;
            let mut data = Vec::with_capacity(n * h * h);
            for &l in &labels {
                let theta = std::f64::consts::PI * l as f64 / classes as f64;
                let freq = 1.0 + (l as usize % 3) as f64;
                let dy = rng.random_range(0..h);
                let dx = rng.random_range(0..h);
                for i in 0..h {
                    for j in 0..h {
                        let yy = ((i + dy) % h) as f64;
                        let xx = ((j + dx) % h) as f64;
                        let phase = std::f64::consts::TAU * freq
                            * (yy * theta.cos() + xx * theta.sin())
                            / h as f64;
                        let v = 0.5 + 0.35 * phase.sin() + noise * gaussian(&mut rng);
                        data.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            Tensor::new(&[n, 1, h, h], data)?
        }
        other => return Err(Error::InvalidSpec(format!("unknown generator kind {other:?}"))),
    };
    let ds = Dataset {
        inputs,
        labels,
        classes,
        split: "train".into(),
        provenance: Provenance::Generator {
            kind: kind.to_string(),
            n,
            classes,
            noise,
            seed,
        },
    };
    ds.validate()?;
    Ok(ds)
}

// ---- IDX (big-endian magic + dims, u8 payload) ----

fn be_u32(b: &[u8], at: usize) -> Result<u32> {
    if at + 4 > b.len() {
        return Err(Error::Format("idx file truncated in header".into()));
    }
    Ok(u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]]))
}

fn read_idx_payload(path: &Path, expect_rank: u8) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format(format!("{} is not an idx file", path.display())));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Format(format!("idx type byte {:#04x} unsupported (want u8)", bytes[2])));
    }
    if bytes[3] != expect_rank {
        return Err(Error::Format(format!(
            "idx rank {} where {expect_rank} expected",
            bytes[3]
        )));
    }
    let rank = bytes[3] as usize;
    let mut dims = Vec::with_capacity(rank);
    for d in 0..rank {
        dims.push(be_u32(&bytes, 4 + 4 * d)? as usize);
    }
    let start = 4 + 4 * rank;
    let want: usize = dims.iter().product();
    if bytes.len() - start != want {
        return Err(Error::Format(format!(
            "idx payload is {} bytes where {want} expected",
            bytes.len() - start
        )));
    }
    Ok((dims, bytes[start..].to_vec()))
}

/// MNIST-style pair of idx files: magic 0x00000803 images, 0x00000801 labels.
/// Pixels are scaled to [0,1] by /255; images come back as (N,1,H,W).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (idims, ipay) = read_idx_payload(images_path, 3)?;
    let (ldims, lpay) = read_idx_payload(labels_path, 1)?;
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    if ldims[0] != n {
        return Err(Error::Format(format!(
            "idx label count {} does not match {n} images",
            ldims[0]
        )));
    }
    let data: Vec<f32> = ipay.iter().map(|b| *b as f32 / 255.0).collect();
    let labels: Vec<u16> = lpay.iter().map(|b| *b as u16).collect();
    let classes = labels.iter().map(|l| *l as usize + 1).max().unwrap_or(1).max(2);
    let ds = Dataset {
        inputs: Tensor::new(&[n, 1, h, w], data)?,
        labels,
        classes,
        split: "train".into(),
        provenance: Provenance::SourceFile {
            format: "idx".into(),
            files: vec![
                images_path.display().to_string(),
                labels_path.display().to_string(),
            ],
        },
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes the (N,1,H,W) dataset as an idx image/label file pair, quantizing
/// pixels to bytes by round(v*255).
pub fn save_idx(images_path: &Path, labels_path: &Path, ds: &Dataset) -> Result<()> {
    if ds.inputs.ndim() != 4 || ds.inputs.shape()[1] != 1 {
        return Err(Error::InvalidSpec("idx writer needs (N,1,H,W) inputs".into()));
    }
    let (n, h, w) = (ds.n(), ds.inputs.shape()[2], ds.inputs.shape()[3]);
    let mut img = vec![0u8, 0, 0x08, 0x03];
    for d in [n, h, w] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.inputs.data().iter().map(|v| (v * 255.0).round() as u8));
    std::fs::write(images_path, img)?;

    let mut lab = vec![0u8, 0, 0x08, 0x01];
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for l in &ds.labels {
        if *l > 255 {
            return Err(Error::InvalidSpec(format!("label {l} does not fit a byte")));
        }
        lab.push(*l as u8);
    }
    std::fs::write(labels_path, lab)?;
    Ok(())
}

// ---- CIFAR-10 binary (1 label byte + 3072 pixel bytes per record) ----

const CIFAR_RECORD: usize = 3073;

pub fn load_cifar_binary(paths: &[std::path::PathBuf]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::InvalidSpec("no cifar batch files given".into()));
    }
    let mut data: Vec<f32> = Vec::new();
    let mut labels: Vec<u16> = Vec::new();
    for path in paths {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] > 9 {
                return Err(Error::Format(format!("cifar label byte {} > 9", rec[0])));
            }
            labels.push(rec[0] as u16);
            data.extend(rec[1..].iter().map(|b| *b as f32 / 255.0));
        }
    }
    let n = labels.len();
    let ds = Dataset {
        inputs: Tensor::new(&[n, 3, 32, 32], data)?,
        labels,
        classes: 10,
        split: "train".into(),
        provenance: Provenance::SourceFile {
            format: "cifar-binary".into(),
            files: paths.iter().map(|p| p.display().to_string()).collect(),
        },
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_cifar_binary(path: &Path, ds: &Dataset) -> Result<()> {
    if ds.example_shape() != [3, 32, 32] {
        return Err(Error::InvalidSpec("cifar writer needs (N,3,32,32) inputs".into()));
    }
    let mut bytes = Vec::with_capacity(ds.n() * CIFAR_RECORD);
    for i in 0..ds.n() {
        if ds.labels[i] > 9 {
            return Err(Error::InvalidSpec(format!("cifar label {} > 9", ds.labels[i])));
        }
        bytes.push(ds.labels[i] as u8);
        bytes.extend(ds.inputs.example(i).iter().map(|v| (v * 255.0).round() as u8));
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

// ---- native cache ----

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    provenance: Provenance,
    split: String,
    classes: usize,
    n: usize,
    shape: Vec<usize>,
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let header = DatasetHeader {
        provenance: ds.provenance.clone(),
        split: ds.split.clone(),
        classes: ds.classes,
        n: ds.n(),
        shape: ds.example_shape().to_vec(),
    };
    let hjson = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&hjson);
    for v in ds.inputs.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let need = |at: usize, len: usize| -> Result<&[u8]> {
        bytes
            .get(at..at + len)
            .ok_or_else(|| Error::Format("dataset cache truncated".into()))
    };
    if need(0, 4)? != DATASET_MAGIC {
        return Err(Error::Format("not a dataset cache file".into()));
    }
    let version = u32::from_le_bytes(need(4, 4)?.try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset cache version {version}")));
    }
    let hlen = u32::from_le_bytes(need(8, 4)?.try_into().unwrap()) as usize;
    let header: DatasetHeader = serde_json::from_slice(need(12, hlen)?)
        .map_err(|e| Error::Format(format!("dataset header: {e}")))?;
    let mut at = 12 + hlen;
    let per: usize = header.shape.iter().product();
    let count = header.n * per;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(f32::from_le_bytes(need(at, 4)?.try_into().unwrap()));
        at += 4;
    }
    let mut labels = Vec::with_capacity(header.n);
    for _ in 0..header.n {
        labels.push(u16::from_le_bytes(need(at, 2)?.try_into().unwrap()));
        at += 2;
    }
    if at != bytes.len() {
        return Err(Error::Format(format!(
            "dataset cache has {} trailing bytes",
            bytes.len() - at
        )));
    }
    let mut shape = vec![header.n];
    shape.extend_from_slice(&header.shape);
    let ds = Dataset {
        inputs: Tensor::new(&shape, data)?,
        labels,
        classes: header.classes,
        split: header.split,
        provenance: header.provenance,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

// ---- relabel-by-attack construction ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NrfMode {
    Rand,
    Det,
}

impl NrfMode {
    pub fn parse(s: &str) -> Result<NrfMode> {
        match s {
            "rand" => Ok(NrfMode::Rand),
            "det" => Ok(NrfMode::Det),
            other => Err(Error::InvalidSpec(format!("unknown construction mode {other:?}"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            NrfMode::Rand => "rand",
            NrfMode::Det => "det",
        }
    }
}

pub fn target_label(mode: NrfMode, y: u16, classes: usize, rng: &mut ChaCha8Rng) -> u16 {
    match mode {
        NrfMode::Rand => rng.random_range(0..classes) as u16,
        NrfMode::Det => ((y as usize + 1) % classes) as u16,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NrfConfig {
    pub epsilon: f64,
    pub steps: usize,
}

impl Default for NrfConfig {
    fn default() -> Self {
        NrfConfig { epsilon: 0.5, steps: 100 }
    }
}

/// Re-labels every example with an attack target and keeps the perturbed
/// example only where the base model actually predicts the target. The
/// resulting dataset's only label-relevant structure is the perturbation.
pub fn build_nonrobust_dataset<S: Scalar>(
    graph: &Graph,
    params: &ParamSet<S>,
    source: &Dataset,
    mode: NrfMode,
    conf: &NrfConfig,
    seed: u64,
) -> Result<(Dataset, f64)> {
    source.validate()?;
    let n = source.n();
    if n == 0 {
        return Err(Error::InvalidSpec("empty source dataset".into()));
    }
    let classes = source.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<u16> = source
        .labels
        .iter()
        .map(|y| target_label(mode, *y, classes, &mut rng))
        .collect();
    let x: Tensor<S> = source.inputs_as();
    let t_tensor: Tensor<S> =
        Tensor::from_vec(targets.iter().map(|t| S::from_f64(*t as f64)).collect());
    let y_tensor: Tensor<S> = source.labels_as();

    let adversarials = if conf.epsilon > 0.0 {
        let mut spec = AttackSpec::bim(conf.epsilon);
        spec.iterations = conf.steps.max(1);
        spec.step_size = 2.5 * conf.epsilon / conf.steps.max(1) as f64;
        spec.targeted = true;
        let model = AttackModel::single(graph, params);
        bim(&model, &x, &y_tensor, &spec, Some(&t_tensor), seed)?.adversarials
    } else {
        x.clone()
    };

    // keep only the examples the base model moved all the way to the target
    let mut keep = Vec::new();
    let per = source.example_shape().to_vec();
    let mut start = 0usize;
    while start < n {
        let end = (start + 256).min(n);
        let rows: Vec<&[S]> = (start..end).map(|i| adversarials.example(i)).collect();
        let logits = predict(graph, params, &Tensor::stack(&per, &rows)?, Mode::Eval)?;
        for (row, i) in (start..end).enumerate() {
            let l = logits.row(row);
            let mut best = 0usize;
            for c in 1..l.len() {
                if l[c].to_f64() > l[best].to_f64() {
                    best = c;
                }
            }
            if best == targets[i] as usize {
                keep.push(i);
            }
        }
        start = end;
    }
    let kept = keep.len() as f64 / n as f64;
    if kept < 0.5 {
        return Err(Error::ConstructionWeak { kept });
    }

    let rows: Vec<&[S]> = keep.iter().map(|&i| adversarials.example(i)).collect();
    let inputs_s: Tensor<S> = Tensor::stack(&per, &rows)?;
    let mut inputs: Tensor<f32> = inputs_s.cast();
    for v in inputs.data_mut().iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let ds = Dataset {
        inputs,
        labels: keep.iter().map(|&i| targets[i]).collect(),
        classes,
        split: source.split.clone(),
        provenance: Provenance::Construction {
            base: params.fingerprint().to_string(),
            mode: mode.tag().to_string(),
            epsilon: conf.epsilon,
            steps: conf.steps,
            seed,
            kept,
        },
    };
    ds.validate()?;
    Ok((ds, kept))
}

// ---- evaluation-set selection ----

/// Indices of a seeded size-n sample from the examples that every target
/// model classifies correctly.
pub fn select_eval_set<S: Scalar>(
    targets: &[(&Graph, &ParamSet<S>)],
    dataset: &Dataset,
    n: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidSpec("eval set size must be >= 1".into()));
    }
    if targets.is_empty() {
        return Err(Error::InvalidSpec("need at least one target model".into()));
    }
    let total = dataset.n();
    let mut ok = vec![true; total];
    let per = dataset.example_shape().to_vec();
    for (graph, params) in targets {
        let x: Tensor<S> = dataset.inputs_as();
        let mut start = 0usize;
        while start < total {
            let end = (start + 256).min(total);
            let rows: Vec<&[S]> = (start..end).map(|i| x.example(i)).collect();
            let logits = predict(graph, params, &Tensor::stack(&per, &rows)?, Mode::Eval)?;
            for (row, i) in (start..end).enumerate() {
                let l = logits.row(row);
                let mut best = 0usize;
                for c in 1..l.len() {
                    if l[c].to_f64() > l[best].to_f64() {
                        best = c;
                    }
                }
                if best != dataset.labels[i] as usize {
                    ok[i] = false;
                }
            }
            start = end;
        }
    }
    let mut pool: Vec<usize> = (0..total).filter(|&i| ok[i]).collect();
    if pool.len() < n {
        return Err(Error::InsufficientCorrect { available: pool.len(), requested: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut picked = pool[..n].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Misclassification (or target-hit) rate of a stored batch against each
/// target model in turn.
pub fn transfer_rates<S: Scalar>(
    adv: &AdvBatch<S>,
    targets: &[(&Graph, &ParamSet<S>)],
) -> Result<Vec<f64>> {
    targets
        .iter()
        .map(|(g, p)| success_rate(adv, g, p))
        .collect()
}
