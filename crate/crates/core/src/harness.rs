//! Experiment orchestration: staged, resumable artifact production under a
//! single output directory, plus parameter sweeps and validation-side epoch
//! selection.
//!
//! Stage layout under the output directory:
//!   data/{train,test}.fsds
//!   targets/target{i}.fsck
//!   eval/indices.json
//!   surrogates/seed{S}/epoch{E}.fsck + metrics.jsonl + passes.json + done.json
//!   alpha/seed{S}.csv
//!   transfer/raw.csv
//!   sharpness/seed{S}.csv
//!   early_stop/{selection,access_log}.json
//!   report/*
//!
//! Every stage checks its own outputs and is skipped when they already
//! exist, so rerunning over a completed directory does no work.

use std::collections::{BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::attack::{bim, encode_adv_batch, lgv_collect, AttackModel, AttackSpec};
use crate::config::ExperimentConfig;
use crate::data::{encode_dataset, gen_synthetic, load_dataset, transfer_rates, select_eval_set};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::{train, NoopObserver, TrainConfig, TrainObserver};
use crate::params::{sha256_hex, ParamSet};
use crate::report::{
    emit_report, line_plot_svg, parse_transfer_csv, transfer_csv, write_atomic, TransferReport,
    TransferRow,
};
use crate::sharpness::{
    alpha_campaign, alpha_csv, measure_sharpness, sharpness_csv, AlphaObserver, AlphaRecord,
    SharpnessOptions,
};
use crate::tensor::Tensor;
use crate::zoo::{build_model, encode_checkpoint, load_checkpoint, Checkpoint, CheckpointMeta};

pub const STAGES: [&str; 8] = [
    "data",
    "targets",
    "eval-set",
    "surrogates",
    "transfer",
    "sharpness",
    "early-stop",
    "report",
];

const LGV_EPOCHS: usize = 2;
const LGV_PER_EPOCH: usize = 5;

/// Distinct deterministic stream for each (base seed, purpose) pair.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let digest = sha256_hex(format!("{base}/{tag}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunState {
    pub config_hash: String,
    pub completed: Vec<String>,
    pub error: Option<StageError>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

fn save_state(dir: &Path, state: &RunState) -> Result<()> {
    let json = serde_json::to_string_pretty(state).expect("plain struct");
    write_atomic(&dir.join("run_state.json"), json.as_bytes())
}

/// Runs the closure jobs on up to `threads` worker threads, returning the
/// results in job order. One thread means plain sequential execution.
pub fn run_parallel<T, F>(jobs: Vec<F>, threads: usize) -> Vec<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    if threads <= 1 || jobs.len() <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let n = jobs.len();
    let queue: Mutex<VecDeque<(usize, F)>> = Mutex::new(jobs.into_iter().enumerate().collect());
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.min(n) {
            s.spawn(|| loop {
                let next = queue.lock().expect("job queue").pop_front();
                match next {
                    Some((i, job)) => {
                        let out = job();
                        *slots[i].lock().expect("result slot") = Some(out);
                    }
                    None => break,
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("job ran"))
        .collect()
}

fn first_error(results: Vec<Result<()>>) -> Result<()> {
    for r in results {
        r?;
    }
    Ok(())
}

/// Epoch with the highest mean validation success rate; ties go to the
/// earliest epoch.
pub fn early_stop_select(curve: &[(usize, f64)]) -> Result<usize> {
    if curve.is_empty() {
        return Err(Error::InvalidSpec("empty validation trajectory".into()));
    }
    let mut sorted = curve.to_vec();
    sorted.sort_by_key(|(e, _)| *e);
    let mut best = sorted[0];
    for &(e, r) in &sorted[1..] {
        if r > best.1 {
            best = (e, r);
        }
    }
    Ok(best.0)
}

/// Records which targets and example indices each phase touched so the
/// selection phase can be proven not to leak into the final evaluation.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AccessLog {
    pub selection_targets: BTreeSet<String>,
    pub selection_examples: BTreeSet<usize>,
    pub final_targets: BTreeSet<String>,
    pub final_examples: BTreeSet<usize>,
}

impl AccessLog {
    pub fn note_selection(&mut self, target: &str, examples: &[usize]) {
        self.selection_targets.insert(target.to_string());
        self.selection_examples.extend(examples.iter().copied());
    }

    pub fn note_final(&mut self, target: &str, examples: &[usize]) {
        self.final_targets.insert(target.to_string());
        self.final_examples.extend(examples.iter().copied());
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let shared_t: Vec<&String> =
            self.selection_targets.intersection(&self.final_targets).collect();
        if !shared_t.is_empty() {
            return Err(Error::Run(format!(
                "validation and final evaluation share targets {shared_t:?}"
            )));
        }
        let shared_e: Vec<&usize> =
            self.selection_examples.intersection(&self.final_examples).collect();
        if !shared_e.is_empty() {
            return Err(Error::Run(format!(
                "validation and final evaluation share {} example indices",
                shared_e.len()
            )));
        }
        Ok(())
    }
}

// ---- stage plumbing ----

fn train_path(dir: &Path) -> PathBuf {
    dir.join("data").join("train.fsds")
}
fn test_path(dir: &Path) -> PathBuf {
    dir.join("data").join("test.fsds")
}
fn target_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("targets").join(format!("target{i}.fsck"))
}
fn seed_dir(dir: &Path, seed: u64) -> PathBuf {
    dir.join("surrogates").join(format!("seed{seed}"))
}
fn indices_path(dir: &Path) -> PathBuf {
    dir.join("eval").join("indices.json")
}

fn save_checkpoint_atomic(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

fn stage_enabled(cfg: &ExperimentConfig, stage: &str) -> bool {
    match stage {
        "sharpness" => cfg.diagnostics.sharpness,
        "early-stop" => cfg.early_stop.enabled,
        _ => true,
    }
}

fn stage_done(cfg: &ExperimentConfig, dir: &Path, stage: &str) -> bool {
    match stage {
        "data" => train_path(dir).exists() && test_path(dir).exists(),
        "targets" => (0..cfg.targets.count).all(|i| target_path(dir, i).exists()),
        "eval-set" => indices_path(dir).exists(),
        "surrogates" => cfg
            .surrogate
            .seeds
            .iter()
            .all(|s| seed_dir(dir, *s).join("done.json").exists()),
        "transfer" => dir.join("transfer").join("raw.csv").exists(),
        "sharpness" => cfg
            .surrogate
            .seeds
            .iter()
            .all(|s| dir.join("sharpness").join(format!("seed{s}.csv")).exists()),
        "early-stop" => dir.join("early_stop").join("selection.json").exists(),
        "report" => dir.join("report").join("summary.json").exists(),
        _ => false,
    }
}

fn run_stage(cfg: &ExperimentConfig, dir: &Path, stage: &str, threads: usize) -> Result<()> {
    match stage {
        "data" => stage_data(cfg, dir),
        "targets" => stage_targets(cfg, dir, threads),
        "eval-set" => stage_eval_set(cfg, dir),
        "surrogates" => stage_surrogates(cfg, dir, threads),
        "transfer" => stage_transfer(cfg, dir, false),
        "sharpness" => stage_sharpness(cfg, dir),
        "early-stop" => stage_early_stop(cfg, dir),
        "report" => emit_report(dir).map(|_| ()),
        other => Err(Error::Run(format!("unknown stage {other:?}"))),
    }
}

/// Runs every enabled stage in order, resuming from whatever artifacts
/// already exist. A failing stage is recorded in run_state.json with its
/// name; everything written so far stays on disk.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_override: Option<&Path>,
    threads: usize,
) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    std::fs::create_dir_all(&dir)?;
    let hash = cfg.hash();
    let state_path = dir.join("run_state.json");
    let mut state = if state_path.exists() {
        let state: RunState = serde_json::from_str(&std::fs::read_to_string(&state_path)?)
            .map_err(|e| Error::Format(format!("run_state.json: {e}")))?;
        if state.config_hash != hash {
            return Err(Error::Config(format!(
                "output directory {} belongs to config {}, refusing to resume with config {}",
                dir.display(),
                state.config_hash,
                hash
            )));
        }
        state
    } else {
        RunState { config_hash: hash, ..RunState::default() }
    };
    state.error = None;
    save_state(&dir, &state)?;
    let snapshot = dir.join("config.toml");
    if !snapshot.exists() {
        write_atomic(&snapshot, cfg.to_toml().as_bytes())?;
    }

    let mut summary = RunSummary { dir: dir.clone(), executed: Vec::new(), skipped: Vec::new() };
    for stage in STAGES {
        if !stage_enabled(cfg, stage) || stage_done(cfg, &dir, stage) {
            summary.skipped.push(stage.to_string());
            continue;
        }
        match run_stage(cfg, &dir, stage, threads) {
            Ok(()) => {
                summary.executed.push(stage.to_string());
                if !state.completed.iter().any(|s| s == stage) {
                    state.completed.push(stage.to_string());
                }
                save_state(&dir, &state)?;
            }
            Err(e) => {
                state.error =
                    Some(StageError { stage: stage.to_string(), message: e.to_string() });
                save_state(&dir, &state)?;
                return Err(e);
            }
        }
    }
    Ok(summary)
}

/// Runs every enabled, not-yet-done stage up to and including `last`,
/// without touching the run journal. Returns the stages that actually ran.
pub fn ensure_stages(
    cfg: &ExperimentConfig,
    dir: &Path,
    last: &str,
    threads: usize,
) -> Result<Vec<String>> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut executed = Vec::new();
    for stage in STAGES {
        if stage_enabled(cfg, stage) && !stage_done(cfg, dir, stage) {
            run_stage(cfg, dir, stage, threads)?;
            executed.push(stage.to_string());
        }
        if stage == last {
            return Ok(executed);
        }
    }
    Err(Error::Run(format!("unknown stage {last:?}")))
}

pub fn stage_data(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let d = &cfg.data;
    let train_ds = gen_synthetic(&d.kind, d.n, d.classes, d.noise, d.seed)?;
    let mut test_ds =
        gen_synthetic(&d.kind, d.test_n, d.classes, d.noise, derive_seed(d.seed, "test"))?;
    test_ds.split = "test".into();
    write_atomic(&train_path(dir), &encode_dataset(&train_ds)?)?;
    write_atomic(&test_path(dir), &encode_dataset(&test_ds)?)?;
    Ok(())
}

pub fn stage_targets(cfg: &ExperimentConfig, dir: &Path, threads: usize) -> Result<()> {
    let train_ds = load_dataset(&train_path(dir))?;
    let model_cfg = cfg.targets.as_model(None);
    let arch = model_cfg.arch_spec(cfg.data.classes, train_ds.example_shape())?;
    let opt = model_cfg.optimizer_spec()?;
    let x = train_ds.inputs_as::<f32>();
    let y = train_ds.labels_as::<f32>();
    let hash = cfg.hash();

    let jobs: Vec<_> = (0..cfg.targets.count)
        .map(|i| {
            let (arch, opt, hash) = (&arch, &opt, &hash);
            let (x, y, model_cfg) = (&x, &y, &model_cfg);
            move || -> Result<()> {
                let path = target_path(dir, i);
                if path.exists() {
                    return Ok(());
                }
                let seed = cfg.targets.seed0 + i as u64;
                let (graph, mut params) = build_model::<f32>(arch, seed)?;
                let tc = TrainConfig {
                    epochs: model_cfg.epochs,
                    batch_size: model_cfg.batch_size,
                    seed,
                    checkpoint_every: 0,
                    refresh_fraction: 1.0,
                };
                train(&graph, &mut params, x, y, None, opt, &tc, &mut NoopObserver)?;
                let meta = CheckpointMeta {
                    epoch: model_cfg.epochs as u32 - 1,
                    seed,
                    optimizer: model_cfg.optimizer.clone(),
                    config_hash: hash.clone(),
                    arch: String::new(),
                    frozen: Vec::new(),
                };
                save_checkpoint_atomic(&path, &Checkpoint::from_params(&params, meta))
            }
        })
        .collect();
    first_error(run_parallel(jobs, threads))
}

fn load_target_models(
    cfg: &ExperimentConfig,
    dir: &Path,
    example_shape: &[usize],
) -> Result<(Graph, Vec<ParamSet<f32>>)> {
    let arch = cfg.targets.as_model(None).arch_spec(cfg.data.classes, example_shape)?;
    let (graph, proto) = build_model::<f32>(&arch, 0)?;
    let fp = proto.fingerprint().to_string();
    let mut sets = Vec::with_capacity(cfg.targets.count);
    for i in 0..cfg.targets.count {
        let ck = load_checkpoint(&target_path(dir, i), Some(&fp))?;
        sets.push(ck.params);
    }
    Ok((graph, sets))
}

fn read_eval_indices(dir: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(indices_path(dir))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("eval indices: {e}")))?;
    doc["indices"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_u64().map(|u| u as usize)).collect())
        .ok_or_else(|| Error::Format("eval indices: missing `indices` array".into()))
}

pub fn stage_eval_set(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let test_ds = load_dataset(&test_path(dir))?;
    let (graph, sets) = load_target_models(cfg, dir, test_ds.example_shape())?;
    let refs: Vec<(&Graph, &ParamSet<f32>)> = sets.iter().map(|p| (&graph, p)).collect();
    let indices = select_eval_set(&refs, &test_ds, cfg.eval.n, cfg.eval.seed)?;
    let json = serde_json::to_string_pretty(&serde_json::json!({ "indices": indices }))
        .expect("plain json");
    write_atomic(&indices_path(dir), json.as_bytes())
}

pub fn stage_surrogates(cfg: &ExperimentConfig, dir: &Path, threads: usize) -> Result<()> {
    let train_ds = load_dataset(&train_path(dir))?;
    let test_ds = load_dataset(&test_path(dir))?;
    let arch = cfg.surrogate.arch_spec(cfg.data.classes, train_ds.example_shape())?;
    let opt = cfg.surrogate.optimizer_spec()?;
    let x = train_ds.inputs_as::<f32>();
    let y = train_ds.labels_as::<f32>();
    let ex = test_ds.inputs_as::<f32>();
    let ey = test_ds.labels_as::<f32>();
    let collect_pool = cfg.attack.techniques.lgv.is_some();

    let jobs: Vec<_> = cfg
        .surrogate
        .seeds
        .iter()
        .map(|&seed| {
            let (arch, opt) = (&arch, &opt);
            let (x, y, ex, ey) = (&x, &y, &ex, &ey);
            move || -> Result<()> {
                let sdir = seed_dir(dir, seed);
                if sdir.join("done.json").exists() {
                    return Ok(());
                }
                std::fs::create_dir_all(&sdir)?;
                let (graph, mut params) = build_model::<f32>(arch, seed)?;
                let tc = TrainConfig {
                    epochs: cfg.surrogate.epochs,
                    batch_size: cfg.surrogate.batch_size,
                    seed,
                    checkpoint_every: 1,
                    refresh_fraction: 1.0,
                };
                let use_alpha = cfg.diagnostics.alpha_every > 0;
                let mut alpha_obs = AlphaObserver::new(cfg.diagnostics.alpha_every.max(1));
                let mut noop = NoopObserver;
                let observer: &mut dyn TrainObserver<f32> =
                    if use_alpha { &mut alpha_obs } else { &mut noop };
                let out = train(&graph, &mut params, x, y, Some((ex, ey)), opt, &tc, observer)?;
                for ckpt in &out.checkpoints {
                    save_checkpoint_atomic(
                        &sdir.join(format!("epoch{}.fsck", ckpt.meta.epoch)),
                        ckpt,
                    )?;
                }
                if let Some(swa) = &out.swa_params {
                    let meta = CheckpointMeta {
                        epoch: cfg.surrogate.epochs as u32 - 1,
                        seed,
                        optimizer: cfg.surrogate.optimizer.clone(),
                        config_hash: cfg.hash(),
                        arch: String::new(),
                        frozen: Vec::new(),
                    };
                    save_checkpoint_atomic(
                        &sdir.join("swa.fsck"),
                        &Checkpoint::from_params(swa, meta),
                    )?;
                }
                let mut jsonl = String::new();
                for m in &out.metrics {
                    jsonl.push_str(&serde_json::to_string(m).expect("plain struct"));
                    jsonl.push('\n');
                }
                write_atomic(&sdir.join("metrics.jsonl"), jsonl.as_bytes())?;
                write_atomic(
                    &sdir.join("passes.json"),
                    serde_json::json!({ "passes": out.passes }).to_string().as_bytes(),
                )?;
                if use_alpha {
                    write_atomic(
                        &dir.join("alpha").join(format!("seed{seed}.csv")),
                        alpha_csv(&alpha_obs.records).as_bytes(),
                    )?;
                }
                if collect_pool {
                    let lr = opt.schedule.lr0 / 2.0;
                    let pool = lgv_collect(
                        &graph,
                        &params,
                        x,
                        y,
                        lr,
                        LGV_EPOCHS,
                        LGV_PER_EPOCH,
                        derive_seed(seed, "lgv"),
                    )?;
                    save_lgv_pool(cfg, &sdir, seed, &pool)?;
                }
                let done = serde_json::json!({
                    "seed": seed,
                    "checkpoints": out.checkpoints.len(),
                    "passes": out.passes,
                });
                write_atomic(&sdir.join("done.json"), done.to_string().as_bytes())
            }
        })
        .collect();
    first_error(run_parallel(jobs, threads))
}

fn save_lgv_pool(
    cfg: &ExperimentConfig,
    sdir: &Path,
    seed: u64,
    pool: &[ParamSet<f32>],
) -> Result<()> {
    for (j, member) in pool.iter().enumerate() {
        let meta = CheckpointMeta {
            epoch: cfg.surrogate.epochs as u32 - 1,
            seed,
            optimizer: "sgd".into(),
            config_hash: cfg.hash(),
            arch: String::new(),
            frozen: Vec::new(),
        };
        save_checkpoint_atomic(
            &sdir.join("lgv").join(format!("pool{j}.fsck")),
            &Checkpoint::from_params(member, meta),
        )?;
    }
    Ok(())
}

/// Re-runs a burst of constant-rate training from each surrogate's final
/// checkpoint and stores the visited parameters as an attack pool.
pub fn stage_collect_lgv(
    cfg: &ExperimentConfig,
    dir: &Path,
    lr: Option<f64>,
    epochs: usize,
    per_epoch: usize,
) -> Result<()> {
    let train_ds = load_dataset(&train_path(dir))?;
    let arch = cfg.surrogate.arch_spec(cfg.data.classes, train_ds.example_shape())?;
    let opt = cfg.surrogate.optimizer_spec()?;
    let (graph, proto) = build_model::<f32>(&arch, 0)?;
    let fp = proto.fingerprint().to_string();
    let x = train_ds.inputs_as::<f32>();
    let y = train_ds.labels_as::<f32>();
    let last = cfg.surrogate.epochs - 1;
    for &seed in &cfg.surrogate.seeds {
        let sdir = seed_dir(dir, seed);
        if sdir.join("lgv").join("pool0.fsck").exists() {
            continue;
        }
        let ck = load_checkpoint(&sdir.join(format!("epoch{last}.fsck")), Some(&fp))?;
        let pool = lgv_collect(
            &graph,
            &ck.params,
            &x,
            &y,
            lr.unwrap_or(opt.schedule.lr0 / 2.0),
            epochs,
            per_epoch,
            derive_seed(seed, "lgv"),
        )?;
        save_lgv_pool(cfg, &sdir, seed, &pool)?;
    }
    Ok(())
}

/// Epochs whose checkpoints get attacked.
pub fn attack_epochs(cfg: &ExperimentConfig) -> Vec<usize> {
    match &cfg.attack.checkpoint_epochs {
        Some(list) => {
            let mut v = list.clone();
            v.sort_unstable();
            v.dedup();
            v
        }
        None => (0..cfg.surrogate.epochs).collect(),
    }
}

fn shifted_targets(y: &Tensor<f32>, classes: usize) -> Tensor<f32> {
    y.map(|v| ((v as usize + 1) % classes) as f32)
}

fn load_lgv_pool(sdir: &Path, fp: &str) -> Result<Vec<ParamSet<f32>>> {
    let mut pool = Vec::new();
    loop {
        let path = sdir.join("lgv").join(format!("pool{}.fsck", pool.len()));
        if !path.exists() {
            break;
        }
        pool.push(load_checkpoint(&path, Some(fp))?.params);
    }
    if pool.is_empty() {
        return Err(Error::Run(format!(
            "no checkpoint pool under {}; train surrogates with the lgv technique enabled",
            sdir.join("lgv").display()
        )));
    }
    Ok(pool)
}

/// Crafts adversarial batches from every requested surrogate checkpoint and
/// scores them on every target, writing transfer/raw.csv. With
/// `persist_batches` the crafted batches are stored alongside the table.
pub fn stage_transfer(cfg: &ExperimentConfig, dir: &Path, persist_batches: bool) -> Result<()> {
    let test_ds = load_dataset(&test_path(dir))?;
    let eval_idx = read_eval_indices(dir)?;
    let eval_ds = test_ds.subset(&eval_idx, "eval")?;
    let x = eval_ds.inputs_as::<f32>();
    let y = eval_ds.labels_as::<f32>();
    let spec = cfg.attack.to_spec()?;
    let targets_t = spec.targeted.then(|| shifted_targets(&y, cfg.data.classes));

    let (tgraph, tsets) = load_target_models(cfg, dir, test_ds.example_shape())?;
    let trefs: Vec<(&Graph, &ParamSet<f32>)> = tsets.iter().map(|p| (&tgraph, p)).collect();

    let arch = cfg.surrogate.arch_spec(cfg.data.classes, test_ds.example_shape())?;
    let (sgraph, proto) = build_model::<f32>(&arch, 0)?;
    let fp = proto.fingerprint().to_string();
    let use_pool = cfg.attack.techniques.lgv.is_some();
    let epochs = if use_pool { vec![cfg.surrogate.epochs - 1] } else { attack_epochs(cfg) };

    let mut rows = Vec::new();
    for &seed in &cfg.surrogate.seeds {
        let sdir = seed_dir(dir, seed);
        for &epoch in &epochs {
            let adv = if use_pool {
                let pool = load_lgv_pool(&sdir, &fp)?;
                let model = AttackModel::Pool { graph: &sgraph, pool: &pool };
                bim(&model, &x, &y, &spec, targets_t.as_ref(), derive_seed(seed, "attack-pool"))?
            } else {
                let ck = load_checkpoint(&sdir.join(format!("epoch{epoch}.fsck")), Some(&fp))?;
                let model = AttackModel::single(&sgraph, &ck.params);
                let aseed = derive_seed(seed, &format!("attack-epoch{epoch}"));
                bim(&model, &x, &y, &spec, targets_t.as_ref(), aseed)?
            };
            if persist_batches {
                let path = dir.join("attack").join(format!("seed{seed}-epoch{epoch}.fsab"));
                write_atomic(&path, &encode_adv_batch(&adv))?;
            }
            for (t, rate) in transfer_rates(&adv, &trefs)?.into_iter().enumerate() {
                rows.push(TransferRow { epoch, target: t, seed, success_rate: rate });
            }
        }
    }
    let report = TransferReport { rows };
    report.validate()?;
    write_atomic(&dir.join("transfer").join("raw.csv"), transfer_csv(&report).as_bytes())
}

pub fn stage_sharpness(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let train_ds = load_dataset(&train_path(dir))?;
    let m = cfg.diagnostics.sharpness_examples.min(train_ds.n());
    let sub_idx: Vec<usize> = (0..m).collect();
    let sub = train_ds.subset(&sub_idx, "sharpness")?;
    let x = sub.inputs_as::<f64>();
    let y = sub.labels_as::<f64>();
    let arch = cfg.surrogate.arch_spec(cfg.data.classes, train_ds.example_shape())?;
    let (graph, proto32) = build_model::<f32>(&arch, 0)?;
    let fp = proto32.fingerprint().to_string();
    let epochs = match &cfg.diagnostics.sharpness_epochs {
        Some(list) => list.clone(),
        None => (0..cfg.surrogate.epochs).collect(),
    };
    let opts = SharpnessOptions { probes: cfg.diagnostics.probes, ..SharpnessOptions::default() };

    for &seed in &cfg.surrogate.seeds {
        let out = dir.join("sharpness").join(format!("seed{seed}.csv"));
        if out.exists() {
            continue;
        }
        let sdir = seed_dir(dir, seed);
        let mut records = Vec::with_capacity(epochs.len());
        for &epoch in &epochs {
            let ck = load_checkpoint(&sdir.join(format!("epoch{epoch}.fsck")), Some(&fp))?;
            let params = ck.params.cast::<f64>();
            let rec_seed = derive_seed(seed, &format!("sharpness-epoch{epoch}"));
            records.push(measure_sharpness(&graph, &params, &x, &y, &opts, rec_seed, epoch)?);
        }
        write_atomic(&out, sharpness_csv(&records).as_bytes())?;
    }
    Ok(())
}

pub fn stage_early_stop(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let train_ds = load_dataset(&train_path(dir))?;
    let test_ds = load_dataset(&test_path(dir))?;
    let eval_idx = read_eval_indices(dir)?;
    let shape = test_ds.example_shape().to_vec();

    // validation targets: fresh models, seeds far outside the test-target
    // block
    let model_cfg = cfg.targets.as_model(None);
    let arch = model_cfg.arch_spec(cfg.data.classes, &shape)?;
    let opt = model_cfg.optimizer_spec()?;
    let x = train_ds.inputs_as::<f32>();
    let y = train_ds.labels_as::<f32>();
    let val_dir = dir.join("early_stop");
    let mut val_seeds = Vec::new();
    let mut val_sets = Vec::new();
    let (vgraph, _) = build_model::<f32>(&arch, 0)?;
    for i in 0..cfg.early_stop.val_targets {
        let seed = cfg.targets.seed0 + 10_000 + i as u64;
        val_seeds.push(seed);
        let path = val_dir.join(format!("val-target{i}.fsck"));
        if !path.exists() {
            let (graph, mut params) = build_model::<f32>(&arch, seed)?;
            let tc = TrainConfig {
                epochs: model_cfg.epochs,
                batch_size: model_cfg.batch_size,
                seed,
                checkpoint_every: 0,
                refresh_fraction: 1.0,
            };
            train(&graph, &mut params, &x, &y, None, &opt, &tc, &mut NoopObserver)?;
            let meta = CheckpointMeta {
                epoch: model_cfg.epochs as u32 - 1,
                seed,
                optimizer: model_cfg.optimizer.clone(),
                config_hash: cfg.hash(),
                arch: String::new(),
                frozen: Vec::new(),
            };
            save_checkpoint_atomic(&path, &Checkpoint::from_params(&params, meta))?;
        }
        val_sets.push(load_checkpoint(&path, None)?.params);
    }
    let vrefs: Vec<(&Graph, &ParamSet<f32>)> = val_sets.iter().map(|p| (&vgraph, p)).collect();

    // validation examples come from the part of the test split the final
    // evaluation never sees
    let eval_set: BTreeSet<usize> = eval_idx.iter().copied().collect();
    let candidates: Vec<usize> =
        (0..test_ds.n()).filter(|i| !eval_set.contains(i)).collect();
    let pool_ds = test_ds.subset(&candidates, "validation")?;
    let picked = select_eval_set(
        &vrefs,
        &pool_ds,
        cfg.early_stop.val_examples,
        derive_seed(cfg.eval.seed, "early-stop"),
    )?;
    let val_idx: Vec<usize> = picked.iter().map(|&i| candidates[i]).collect();
    let val_ds = test_ds.subset(&val_idx, "validation")?;
    let vx = val_ds.inputs_as::<f32>();
    let vy = val_ds.labels_as::<f32>();

    let mut log = AccessLog::default();
    for i in 0..cfg.targets.count {
        log.note_final(&format!("target{i}"), &eval_idx);
    }

    let spec = cfg.attack.to_spec()?;
    let targets_t = spec.targeted.then(|| shifted_targets(&vy, cfg.data.classes));
    let sarch = cfg.surrogate.arch_spec(cfg.data.classes, &shape)?;
    let (sgraph, sproto) = build_model::<f32>(&sarch, 0)?;
    let fp = sproto.fingerprint().to_string();
    let epochs = attack_epochs(cfg);

    let mut curve = Vec::with_capacity(epochs.len());
    for &epoch in &epochs {
        let mut rates = Vec::new();
        for &seed in &cfg.surrogate.seeds {
            let ck = load_checkpoint(
                &seed_dir(dir, seed).join(format!("epoch{epoch}.fsck")),
                Some(&fp),
            )?;
            let model = AttackModel::single(&sgraph, &ck.params);
            let aseed = derive_seed(seed, &format!("val-attack-epoch{epoch}"));
            let adv = bim(&model, &vx, &vy, &spec, targets_t.as_ref(), aseed)?;
            for (i, rate) in transfer_rates(&adv, &vrefs)?.into_iter().enumerate() {
                log.note_selection(&format!("val-target{i}"), &val_idx);
                rates.push(rate);
            }
        }
        curve.push((epoch, crate::stats::mean(&rates)));
    }
    let chosen = early_stop_select(&curve)?;
    log.check_disjoint()?;

    let selection = serde_json::json!({
        "epoch": chosen,
        "curve": curve,
        "val_indices": val_idx,
        "val_target_seeds": val_seeds,
    });
    write_atomic(
        &val_dir.join("access_log.json"),
        serde_json::to_string_pretty(&log).expect("plain struct").as_bytes(),
    )?;
    write_atomic(
        &val_dir.join("selection.json"),
        serde_json::to_string_pretty(&selection).expect("plain json").as_bytes(),
    )
}

// ---- step-quality campaign over recorded traces ----

fn parse_alpha_records(text: &str) -> Result<Vec<AlphaRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some("epoch,iteration,f0,s0,f1,s1,alpha") {
        return Err(Error::Format("unexpected step-quality table header".into()));
    }
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!("bad step-quality row {line:?}")));
        }
        let u = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad integer field {s:?}")))
        };
        let d = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad numeric field {s:?}")))
        };
        out.push(AlphaRecord {
            epoch: u(f[0])?,
            iteration: u(f[1])?,
            f0: d(f[2])?,
            s0: d(f[3])?,
            f1: d(f[4])?,
            s1: d(f[5])?,
            alpha: d(f[6])?,
        });
    }
    Ok(out)
}

/// Pools the recorded per-seed step-quality traces and tests whether the
/// quantity drops across the first learning-rate decay.
pub fn stage_alpha_campaign(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let schedule = cfg.surrogate.optimizer_spec()?.schedule;
    let decay_epoch = schedule
        .decays
        .first()
        .map(|(e, _)| *e)
        .ok_or_else(|| Error::InvalidSpec("schedule has no decay epoch".into()))?;
    let mut records = Vec::new();
    for &seed in &cfg.surrogate.seeds {
        let path = dir.join("alpha").join(format!("seed{seed}.csv"));
        if !path.exists() {
            return Err(Error::Run(format!(
                "no step-quality trace at {}; retrain surrogates with diagnostics.alpha_every > 0",
                path.display()
            )));
        }
        records.extend(parse_alpha_records(&std::fs::read_to_string(&path)?)?);
    }
    let (before, after, test) = alpha_campaign(
        &records,
        decay_epoch,
        decay_epoch,
        cfg.surrogate.epochs - decay_epoch,
    )?;
    let doc = serde_json::json!({
        "decay_epoch": decay_epoch,
        "n_before": before.len(),
        "n_after": after.len(),
        "mean_before": crate::stats::mean(&before),
        "mean_after": crate::stats::mean(&after),
        "t": test.t,
        "df": test.df,
        "p": test.p,
    });
    write_atomic(
        &dir.join("alpha").join("campaign.json"),
        serde_json::to_string_pretty(&doc).expect("plain json").as_bytes(),
    )
}

// ---- parameter sweeps ----

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub dir: String,
    pub success_rate: Option<f64>,
    pub error: Option<String>,
}

fn final_mean_rate(dir: &Path) -> Result<f64> {
    let report = parse_transfer_csv(&std::fs::read_to_string(dir.join("transfer/raw.csv"))?)?;
    report
        .aggregate()
        .last()
        .map(|a| a.mean)
        .ok_or_else(|| Error::Run("transfer table has no rows".into()))
}

/// One experiment per sweep value, sharing seeds and data settings. A value
/// that fails is recorded in its row and the sweep keeps going.
pub fn sweep(
    cfg: &ExperimentConfig,
    out_override: Option<&Path>,
    threads: usize,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let sw = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::Config("config has no sweep section".into()))?;
    let root = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    std::fs::create_dir_all(&root)?;

    let jobs: Vec<_> = sw
        .values
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let (cfg, root, path) = (cfg, &root, sw.path.as_str());
            move || -> SweepRow {
                let cdir = root.join(format!("value{i}"));
                let run = cfg
                    .with_value(path, value)
                    .and_then(|child| run_experiment(&child, Some(&cdir), 1))
                    .and_then(|_| final_mean_rate(&cdir));
                match run {
                    Ok(rate) => SweepRow {
                        value,
                        dir: cdir.display().to_string(),
                        success_rate: Some(rate),
                        error: None,
                    },
                    Err(e) => SweepRow {
                        value,
                        dir: cdir.display().to_string(),
                        success_rate: None,
                        error: Some(e.to_string()),
                    },
                }
            }
        })
        .collect();
    let rows = run_parallel(jobs, threads);

    let mut csv = String::from("value,success_rate,status\n");
    for r in &rows {
        let rate = r.success_rate.map(|v| v.to_string()).unwrap_or_default();
        let status = match &r.error {
            Some(e) => format!("error: {}", e.replace(',', ";")),
            None => "ok".into(),
        };
        csv.push_str(&format!("{},{},{}\n", r.value, rate, status));
    }
    write_atomic(&root.join("sweep.csv"), csv.as_bytes())?;
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.success_rate.map(|s| (r.value, s)))
        .collect();
    write_atomic(
        &root.join("sweep.svg"),
        line_plot_svg(
            &format!("sweep over {}", sw.path),
            &sw.path,
            "success rate",
            &[("success".to_string(), points)],
        )
        .as_bytes(),
    )?;
    Ok(rows)
}

/// A single crafted batch outside the harness flow, for the command line.
pub fn craft_batch(
    cfg: &ExperimentConfig,
    dir: &Path,
    spec: &AttackSpec,
    seed_override: Option<u64>,
) -> Result<PathBuf> {
    let test_ds = load_dataset(&test_path(dir))?;
    let eval_idx = read_eval_indices(dir)?;
    let eval_ds = test_ds.subset(&eval_idx, "eval")?;
    let x = eval_ds.inputs_as::<f32>();
    let y = eval_ds.labels_as::<f32>();
    let targets_t = spec.targeted.then(|| shifted_targets(&y, cfg.data.classes));
    let arch = cfg.surrogate.arch_spec(cfg.data.classes, test_ds.example_shape())?;
    let (graph, proto) = build_model::<f32>(&arch, 0)?;
    let fp = proto.fingerprint().to_string();
    let seed = cfg.surrogate.seeds[0];
    let epoch = cfg.surrogate.epochs - 1;
    let ck = load_checkpoint(&seed_dir(dir, seed).join(format!("epoch{epoch}.fsck")), Some(&fp))?;
    let aseed = seed_override.unwrap_or_else(|| derive_seed(seed, "cli-attack"));
    let adv = bim(&AttackModel::single(&graph, &ck.params), &x, &y, spec, targets_t.as_ref(), aseed)?;
    let path = dir.join("attack").join(format!("seed{seed}-epoch{epoch}.fsab"));
    write_atomic(&path, &encode_adv_batch(&adv))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{LgvConf, Techniques};

    fn base_toml(out: &str) -> String {
        format!(
            r#"
[data]
kind = "blobs"
n = 64
classes = 2
noise = 0.02
seed = 11
test_n = 64

[surrogate]
arch = "mlp"
hidden = [6]
optimizer = "sam"
epochs = 3
batch_size = 16
seeds = [1, 2]

[targets]
arch = "mlp"
hidden = [4]
count = 2
epochs = 6
batch_size = 16
seed0 = 500

[attack]
epsilon = 0.1
iterations = 4

[eval]
n = 8
seed = 77

[output]
dir = "{out}"
"#
        )
    }

    fn config(out: &Path) -> ExperimentConfig {
        ExperimentConfig::parse(&base_toml(&out.display().to_string())).unwrap()
    }

    #[test]
    fn end_to_end_run_produces_artifacts_then_reruns_do_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let mut cfg = config(&dir);
        cfg.diagnostics.sharpness = true;
        cfg.diagnostics.sharpness_epochs = Some(vec![0, 2]);
        cfg.diagnostics.sharpness_examples = 16;
        cfg.diagnostics.probes = 2;
        cfg.diagnostics.alpha_every = 1;

        let summary = run_experiment(&cfg, None, 1).unwrap();
        assert_eq!(
            summary.executed,
            vec!["data", "targets", "eval-set", "surrogates", "transfer", "sharpness", "report"]
        );
        assert!(summary.skipped.contains(&"early-stop".to_string()));
        for p in [
            "data/train.fsds",
            "data/test.fsds",
            "targets/target0.fsck",
            "targets/target1.fsck",
            "eval/indices.json",
            "surrogates/seed1/epoch0.fsck",
            "surrogates/seed1/epoch2.fsck",
            "surrogates/seed1/metrics.jsonl",
            "surrogates/seed2/done.json",
            "alpha/seed1.csv",
            "transfer/raw.csv",
            "sharpness/seed1.csv",
            "report/transfer.svg",
            "report/summary.json",
            "config.toml",
            "run_state.json",
        ] {
            assert!(dir.join(p).exists(), "missing artifact {p}");
        }
        let raw = std::fs::read_to_string(dir.join("transfer/raw.csv")).unwrap();
        let report = parse_transfer_csv(&raw).unwrap();
        assert_eq!(report.rows.len(), 3 * 2 * 2, "epochs x targets x seeds");

        let again = run_experiment(&cfg, None, 1).unwrap();
        assert!(again.executed.is_empty(), "rerun retrained: {:?}", again.executed);
        assert_eq!(std::fs::read_to_string(dir.join("transfer/raw.csv")).unwrap(), raw);

        stage_alpha_campaign(&cfg, &dir).unwrap();
        let campaign: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join("alpha/campaign.json")).unwrap(),
        )
        .unwrap();
        assert!(campaign["p"].as_f64().unwrap() > 0.0);
        assert!(campaign["n_before"].as_u64().unwrap() >= 2);

        let other = config(&tmp.path().join("other"));
        let err = run_experiment(&other, Some(&dir), 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "foreign config must not resume: {err}");
    }

    #[test]
    fn identical_configs_give_identical_tables_across_directories() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config(&tmp.path().join("unused"));
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        run_experiment(&cfg, Some(&a), 1).unwrap();
        run_experiment(&cfg, Some(&b), 2).unwrap();
        let ta = std::fs::read(a.join("transfer/raw.csv")).unwrap();
        let tb = std::fs::read(b.join("transfer/raw.csv")).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(
            std::fs::read(a.join("eval/indices.json")).unwrap(),
            std::fs::read(b.join("eval/indices.json")).unwrap()
        );
    }

    #[test]
    fn failing_stage_is_recorded_and_earlier_artifacts_survive() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let mut cfg = config(&dir);
        cfg.eval.n = 1000;

        let err = run_experiment(&cfg, None, 1).unwrap_err();
        assert!(matches!(err, Error::InsufficientCorrect { .. }), "got {err}");
        let state: RunState =
            serde_json::from_str(&std::fs::read_to_string(dir.join("run_state.json")).unwrap())
                .unwrap();
        let stage_err = state.error.expect("error recorded");
        assert_eq!(stage_err.stage, "eval-set");
        assert!(!stage_err.message.is_empty());
        assert!(dir.join("data/train.fsds").exists());
        assert!(dir.join("targets/target1.fsck").exists());
        assert_eq!(state.completed, vec!["data", "targets"]);
    }

    #[test]
    fn early_stop_selection_is_audited_and_leak_free() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let mut cfg = config(&dir);
        cfg.early_stop.enabled = true;
        cfg.early_stop.val_targets = 1;
        cfg.early_stop.val_examples = 6;

        run_experiment(&cfg, None, 1).unwrap();
        let sel: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join("early_stop/selection.json")).unwrap(),
        )
        .unwrap();
        let epoch = sel["epoch"].as_u64().unwrap() as usize;
        assert!(epoch < cfg.surrogate.epochs);
        assert_eq!(sel["curve"].as_array().unwrap().len(), cfg.surrogate.epochs);

        let log: AccessLog = serde_json::from_str(
            &std::fs::read_to_string(dir.join("early_stop/access_log.json")).unwrap(),
        )
        .unwrap();
        assert!(!log.selection_examples.is_empty());
        assert!(!log.final_examples.is_empty());
        log.check_disjoint().unwrap();

        let mut tainted = log.clone();
        let leaked = *log.final_examples.iter().next().unwrap();
        tainted.note_selection("val-target0", &[leaked]);
        assert!(tainted.check_disjoint().is_err());
        let mut shared_target = log;
        shared_target.note_selection("target0", &[]);
        shared_target.note_final("target0", &[]);
        assert!(shared_target.check_disjoint().is_err());
    }

    #[test]
    fn epoch_selection_prefers_the_peak_then_the_earliest() {
        assert_eq!(early_stop_select(&[(0, 0.1), (1, 0.5), (2, 0.4)]).unwrap(), 1);
        assert_eq!(early_stop_select(&[(0, 0.3), (1, 0.3), (2, 0.3)]).unwrap(), 0);
        assert_eq!(early_stop_select(&[(0, 0.1), (1, 0.2), (2, 0.3)]).unwrap(), 2);
        assert_eq!(early_stop_select(&[(2, 0.5), (0, 0.1), (1, 0.5)]).unwrap(), 1);
        assert!(early_stop_select(&[]).is_err());
    }

    #[test]
    fn sweep_covers_every_value_and_survives_bad_points() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("sweep");
        let mut cfg = config(&root);
        cfg.attack.iterations = 2;
        cfg.sweep = Some(crate::config::SweepSection {
            path: "attack.epsilon".into(),
            values: vec![0.05, -1.0, 0.1],
        });

        let rows = sweep(&cfg, None, 1).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].success_rate.is_some());
        assert!(rows[1].success_rate.is_none());
        assert!(rows[1].error.as_deref().unwrap_or("").contains("epsilon"));
        assert!(rows[2].success_rate.is_some());
        let csv = std::fs::read_to_string(root.join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4, "header plus one row per value");
        assert!(root.join("sweep.svg").exists());
        assert!(root.join("value0/transfer/raw.csv").exists());
        assert!(!root.join("value1/transfer").exists());
    }

    #[test]
    fn zero_radius_sweep_point_matches_a_plain_sgd_run() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("sweep");
        let mut cfg = config(&root);
        cfg.attack.iterations = 2;
        cfg.attack.checkpoint_epochs = Some(vec![2]);
        cfg.sweep = Some(crate::config::SweepSection {
            path: "surrogate.rho".into(),
            values: vec![0.0, 0.05],
        });
        let rows = sweep(&cfg, None, 1).unwrap();
        assert!(rows.iter().all(|r| r.error.is_none()));

        let mut sgd_cfg = cfg.clone();
        sgd_cfg.sweep = None;
        sgd_cfg.surrogate.optimizer = "sgd".into();
        let sgd_dir = tmp.path().join("sgd");
        run_experiment(&sgd_cfg, Some(&sgd_dir), 1).unwrap();

        let swept = std::fs::read(root.join("value0/transfer/raw.csv")).unwrap();
        let plain = std::fs::read(sgd_dir.join("transfer/raw.csv")).unwrap();
        assert_eq!(swept, plain, "zero-radius point must reduce to the plain run");
    }

    #[test]
    fn checkpoint_pool_attack_flows_through_the_stages() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let mut cfg = config(&dir);
        cfg.attack.iterations = 2;
        cfg.attack.techniques = Techniques { lgv: Some(LgvConf {}), ..Techniques::default() };

        run_experiment(&cfg, None, 1).unwrap();
        assert!(dir.join("surrogates/seed1/lgv/pool0.fsck").exists());
        let raw = std::fs::read_to_string(dir.join("transfer/raw.csv")).unwrap();
        let report = parse_transfer_csv(&raw).unwrap();
        assert_eq!(report.rows.len(), 2 * 2, "one pooled batch per seed, scored per target");
        assert!(report.rows.iter().all(|r| r.epoch == cfg.surrogate.epochs - 1));
    }

    #[test]
    fn crafted_batches_persist_when_requested() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let mut cfg = config(&dir);
        cfg.attack.iterations = 2;
        cfg.attack.checkpoint_epochs = Some(vec![1, 2]);
        run_experiment(&cfg, None, 1).unwrap();

        std::fs::remove_file(dir.join("transfer/raw.csv")).unwrap();
        stage_transfer(&cfg, &dir, true).unwrap();
        for p in [
            "attack/seed1-epoch1.fsab",
            "attack/seed1-epoch2.fsab",
            "attack/seed2-epoch2.fsab",
        ] {
            assert!(dir.join(p).exists(), "missing batch {p}");
        }
        let batch = crate::attack::load_adv_batch(&dir.join("attack/seed1-epoch2.fsab")).unwrap();
        assert_eq!(batch.adversarials.shape()[0], cfg.eval.n);

        let spec = cfg.attack.to_spec().unwrap();
        let path = craft_batch(&cfg, &dir, &spec, Some(99)).unwrap();
        assert!(path.exists());
    }
}
