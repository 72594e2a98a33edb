//! C ABI over the core library: opaque handles, integer status codes, and a
//! thread-local last-error message. The matching declarations live in
//! include/flatsurr.h.
//!
//! Ownership rules: every `fs_*_new`/`_generate`/`_load`/`_run` constructor
//! hands the caller an owned handle that must be released with the matching
//! `fs_*_free`. Out-parameters are written only on `FS_OK`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use flatsurr::attack::{bim, load_adv_batch, save_adv_batch, AdvBatch, AttackModel, AttackSpec};
use flatsurr::config::ExperimentConfig;
use flatsurr::data::{gen_synthetic, load_dataset, save_dataset, Dataset};
use flatsurr::graph::{Graph, Mode};
use flatsurr::harness::run_experiment;
use flatsurr::optim::{optimizer_preset, train, NoopObserver, TrainConfig};
use flatsurr::params::ParamSet;
use flatsurr::sharpness::{measure_sharpness, SharpnessOptions};
use flatsurr::stats::{welch_t_test, Alternative};
use flatsurr::tensor::Tensor;
use flatsurr::zoo::{
    accuracy, build_model, load_checkpoint, predict, save_checkpoint, ArchSpec, Checkpoint,
    CheckpointMeta,
};
use flatsurr::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsStatus {
    Ok = 0,
    InvalidArgument = 1,
    Config = 2,
    Run = 3,
    Io = 4,
    Format = 5,
    NullPointer = 6,
    Utf8 = 7,
}

enum FfiError {
    Core(Error),
    Null(&'static str),
    Utf8(&'static str),
    Arg(String),
}

impl From<Error> for FfiError {
    fn from(e: Error) -> Self {
        FfiError::Core(e)
    }
}

impl FfiError {
    fn status(&self) -> FsStatus {
        match self {
            FfiError::Core(Error::Config(_)) => FsStatus::Config,
            FfiError::Core(Error::InvalidSpec(_)) => FsStatus::InvalidArgument,
            FfiError::Core(Error::Format(_)) => FsStatus::Format,
            FfiError::Core(Error::Io(_)) => FsStatus::Io,
            FfiError::Core(_) => FsStatus::Run,
            FfiError::Null(_) => FsStatus::NullPointer,
            FfiError::Utf8(_) => FsStatus::Utf8,
            FfiError::Arg(_) => FsStatus::InvalidArgument,
        }
    }

    fn message(&self) -> String {
        match self {
            FfiError::Core(e) => e.to_string(),
            FfiError::Null(what) => format!("null pointer passed for `{what}`"),
            FfiError::Utf8(what) => format!("`{what}` is not valid UTF-8"),
            FfiError::Arg(msg) => msg.clone(),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn run_ffi<F: FnOnce() -> Result<(), FfiError>>(f: F) -> FsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            FsStatus::Ok
        }
        Ok(Err(err)) => {
            let status = err.status();
            LAST_ERROR.with(|e| *e.borrow_mut() = err.message());
            status
        }
        Err(_) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = "internal panic".into());
            FsStatus::Run
        }
    }
}

unsafe fn want_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, FfiError> {
    p.as_ref().ok_or(FfiError::Null(what))
}

unsafe fn want_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, FfiError> {
    p.as_mut().ok_or(FfiError::Null(what))
}

unsafe fn want_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, FfiError> {
    if p.is_null() {
        return Err(FfiError::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| FfiError::Utf8(what))
}

pub struct FsDataset(Dataset);

pub struct FsModel {
    graph: Graph,
    params: ParamSet<f32>,
    arch: ArchSpec,
}

pub struct FsBatch(AdvBatch<f32>);

/// Architecture description for model constructors. `hidden` may be null
/// when `hidden_len` is zero.
#[repr(C)]
pub struct FsArchDesc {
    pub kind: *const c_char,
    pub width: usize,
    pub hidden: *const usize,
    pub hidden_len: usize,
    pub blocks: usize,
}

unsafe fn arch_from(
    desc: &FsArchDesc,
    in_shape: &[usize],
    classes: usize,
) -> Result<ArchSpec, FfiError> {
    let kind = want_str(desc.kind, "arch.kind")?;
    let hidden: Vec<usize> = if desc.hidden_len == 0 {
        Vec::new()
    } else if desc.hidden.is_null() {
        return Err(FfiError::Null("arch.hidden"));
    } else {
        std::slice::from_raw_parts(desc.hidden, desc.hidden_len).to_vec()
    };
    let chw = |shape: &[usize]| -> Result<[usize; 3], FfiError> {
        if shape.len() != 3 {
            return Err(FfiError::Arg(format!(
                "convolutional architectures need (C,H,W) inputs, got {shape:?}"
            )));
        }
        Ok([shape[0], shape[1], shape[2]])
    };
    let arch = match kind {
        "mlp" => ArchSpec::Mlp { in_shape: in_shape.to_vec(), hidden, classes },
        "smallcnn" => ArchSpec::SmallCnn { in_chw: chw(in_shape)?, classes, width: desc.width },
        "miniresnet" => ArchSpec::MiniResnet {
            in_chw: chw(in_shape)?,
            classes,
            width: desc.width,
            blocks: desc.blocks,
        },
        other => return Err(FfiError::Arg(format!("unknown architecture {other:?}"))),
    };
    arch.validate()?;
    Ok(arch)
}

/// Version of the library, as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the current thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap > 0`) and returns the full message length
/// in bytes. Zero means the last call on this thread succeeded.
#[no_mangle]
pub unsafe extern "C" fn fs_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

// ---- datasets ----

#[no_mangle]
pub unsafe extern "C" fn fs_dataset_generate(
    kind: *const c_char,
    n: usize,
    classes: usize,
    noise: f64,
    seed: u64,
    out: *mut *mut FsDataset,
) -> FsStatus {
    run_ffi(|| {
        let slot = want_mut(out, "out")?;
        let kind = want_str(kind, "kind")?;
        let ds = gen_synthetic(kind, n, classes, noise, seed)?;
        *slot = Box::into_raw(Box::new(FsDataset(ds)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fs_dataset_load(path: *const c_char, out: *mut *mut FsDataset) -> FsStatus {
    run_ffi(|| {
        let slot = want_mut(out, "out")?;
        let ds = load_dataset(Path::new(want_str(path, "path")?))?;
        *slot = Box::into_raw(Box::new(FsDataset(ds)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fs_dataset_save(ds: *const FsDataset, path: *const c_char) -> FsStatus {
    run_ffi(|| {
        let ds = want_ref(ds, "dataset")?;
        save_dataset(Path::new(want_str(path, "path")?), &ds.0)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fs_dataset_len(ds: *const FsDataset, out: *mut usize) -> FsStatus {
    run_ffi(|| {
        let ds = want_ref(ds, "dataset")?;
        *want_mut(out, "out")? = ds.0.n();
        Ok(())
    })
}

/// Writes the per-example shape. `rank` always receives the number of
/// dimensions; `dims` is filled only when `cap` is large enough (pass
/// `cap = 0` to query the rank alone).
#[no_mangle]
pub unsafe extern "C" fn fs_dataset_shape(
    ds: *const FsDataset,
    dims: *mut usize,
    cap: usize,
    rank: *mut usize,
) -> FsStatus {
    run_ffi(|| {
        let ds = want_ref(ds, "dataset")?;
        let shape = ds.0.example_shape();
        *want_mut(rank, "rank")? = shape.len();
        if cap == 0 {
            return Ok(());
        }
        if cap < shape.len() {
            return Err(FfiError::Arg(format!(
                "shape buffer holds {cap} values, need {}",
                shape.len()
            )));
        }
        let dims = want_mut(dims, "dims")?;
        std::ptr::copy_nonoverlapping(shape.as_ptr(), dims as *mut usize, shape.len());
        Ok(())
    })
}

/// Contiguous row range [start, start+len) as a new dataset.
#[no_mangle]
pub unsafe extern "C" fn fs_dataset_slice(
    ds: *const FsDataset,
    start: usize,
    len: usize,
    out: *mut *mut FsDataset,
) -> FsStatus {
    run_ffi(|| {
        let slot = want_mut(out, "out")?;
        let ds = want_ref(ds, "dataset")?;
        let idx: Vec<usize> = (start..start.saturating_add(len)).collect();
        let split = ds.0.split.clone();
        let sub = ds.0.subset(&idx, &split)?;
        *slot = Box::into_raw(Box::new(FsDataset(sub)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fs_dataset_free(ds: *mut FsDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

// ---- models ----

#[no_mangle]
pub unsafe extern "C" fn fs_model_new(
    desc: *const FsArchDesc,
    ds: *const FsDataset,
    seed: u64,
    out: *mut *mut FsModel,
) -> FsStatus {
    run_ffi(|| {
        let slot = want_mut(out, "out")?;
        let desc = want_ref(desc, "arch")?;
        let ds = want_ref(ds, "dataset")?;
        let arch = arch_from(desc, ds.0.example_shape(), ds.0.classes)?;
        let (graph, params) = build_model::<f32>(&arch, seed)?;
        *slot = Box::into_raw(Box::new(FsModel { graph, params, arch }));
        Ok(())
    })
}

/// Trains in place with a named optimizer preset (`sgd`, `sam`, `l-sam`,
/// `asam`, `gsam`, `looksam`, `wasam`, and their `l-` variants).
#[no_mangle]
pub unsafe extern "C" fn fs_model_train(
    model: *mut FsModel,
    ds: *const FsDataset,
    optimizer: *const c_char,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> FsStatus {
    run_ffi(|| {
        let m = want_mut(model, "model")?;
        let ds = want_ref(ds, "dataset")?;
        let name = want_str(optimizer, "optimizer")?;
        let opt = optimizer_preset(name)
            .ok_or_else(|| FfiError::Arg(format!("unknown optimizer {name:?}")))?;
        let x = ds.0.inputs_as::<f32>();
        let y = ds.0.labels_as::<f32>();
        let tc = TrainConfig {
            epochs,
            batch_size,
            seed,
            checkpoint_every: 0,
            refresh_fraction: 1.0,
        };
        train(&m.graph, &mut m.params, &x, &y, None, &opt, &tc, &mut NoopObserver)?;
        Ok(())
    })
}

fn dataset_accuracy(m: &FsModel, ds: &Dataset) -> Result<f64, Error> {
    let x = ds.inputs_as::<f32>();
    let y = ds.labels_as::<f32>();
    let n = ds.n();
    let per = x.shape()[1..].to_vec();
    let mut correct = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + 256).min(n);
        let rows: Vec<&[f32]> = (start..end).map(|i| x.example(i)).collect();
        let bx = Tensor::stack(&per, &rows)?;
        let yrows: Vec<&[f32]> = (start..end).map(|i| y.example(i)).collect();
        let by = Tensor::stack(&[], &yrows)?;
        let logits = predict(&m.graph, &m.params, &bx, Mode::Eval)?;
        correct += accuracy(&logits, &by) * (end - start) as f64;
        start = end;
    }
    Ok(correct / n as f64)
}

#[no_mangle]
pub unsafe extern "C" fn fs_model_accuracy(
    model: *const FsModel,
    ds: *const FsDataset,
    out: *mut f64,
) -> FsStatus {
    run_ffi(|| {
        let m = want_ref(model, "model")?;
        let ds = want_ref(ds, "dataset")?;
        *want_mut(out, "out")? = dataset_accuracy(m, &ds.0)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fs_model_save(model: *const FsModel, path: *const c_char) -> FsStatus {
    run_ffi(|| {
        let m = want_ref(model, "model")?;
        let meta = CheckpointMeta {
            epoch: 0,
            seed: 0,
            optimizer: String::new(),
            config_hash: String::new(),
            arch: String::new(),
            frozen: Vec::new(),
        };
        let ckpt = Checkpoint::from_params(&m.params, meta);
        save_checkpoint(Path::new(want_str(path, "path")?), &ckpt)?;
        Ok(())
    })
}

/// Rebuilds the graph from `desc` + the dataset's shape/classes and loads
/// stored parameters, verifying that they fit the architecture.
#[no_mangle]
pub unsafe extern "C" fn fs_model_load(
    desc: *const FsArchDesc,
    ds: *const FsDataset,
    path: *const c_char,
    out: *mut *mut FsModel,
) -> FsStatus {
    run_ffi(|| {
        let slot = want_mut(out, "out")?;
        let desc = want_ref(desc, "arch")?;
        let ds = want_ref(ds, "dataset")?;
        let arch = arch_from(desc, ds.0.example_shape(), ds.0.classes)?;
        let (graph, proto) = build_model::<f32>(&arch, 0)?;
        let fp = proto.fingerprint().to_string();
        let ckpt = load_checkpoint(Path::new(want_str(path, "path")?), Some(&fp))?;
        *slot = Box::into_raw(Box::new(FsModel { graph, params: ckpt.params, arch }));
        Ok(())
    })
}

/// Curvature measurements at the model's current parameters, on the first
/// `max_examples` rows of the dataset.
#[no_mangle]
pub unsafe extern "C" fn fs_model_sharpness(
    model: *const FsModel,
    ds: *const FsDataset,
    max_examples: usize,
    probes: usize,
    seed: u64,
    lambda_max: *mut f64,
    trace: *mut f64,
    trace_se: *mut f64,
    worst_gap: *mut f64,
) -> FsStatus {
    run_ffi(|| {
        let m = want_ref(model, "model")?;
        let ds = want_ref(ds, "dataset")?;
        let n = ds.0.n().min(max_examples.max(1));
        let idx: Vec<usize> = (0..n).collect();
        let sub = ds.0.subset(&idx, "sharpness")?;
        let x = sub.inputs_as::<f64>();
        let y = sub.labels_as::<f64>();
        let params = m.params.cast::<f64>();
        let opts = SharpnessOptions { probes: probes.max(1), ..SharpnessOptions::default() };
        let rec = measure_sharpness(&m.graph, &params, &x, &y, &opts, seed, 0)?;
        *want_mut(lambda_max, "lambda_max")? = rec.top_eigenvalue;
        *want_mut(trace, "trace")? = rec.trace_estimate;
        *want_mut(trace_se, "trace_se")? = rec.trace_stderr;
        *want_mut(worst_gap, "worst_gap")? = rec.worst_case_gap;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fs_model_free(model: *mut FsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---- attacks ----

/// Crafts adversarial examples for every row of `ds` against `model`.
/// `spec_json` is a JSON document with `epsilon`, `iterations`, `step_size`,
/// and optional `targeted` / `techniques` fields.
#[no_mangle]
pub unsafe extern "C" fn fs_attack_run(
    model: *const FsModel,
    ds: *const FsDataset,
    spec_json: *const c_char,
    seed: u64,
    out: *mut *mut FsBatch,
) -> FsStatus {
    run_ffi(|| {
        let slot = want_mut(out, "out")?;
        let m = want_ref(model, "model")?;
        let ds = want_ref(ds, "dataset")?;
        let spec: AttackSpec = serde_json::from_str(want_str(spec_json, "spec_json")?)
            .map_err(|e| FfiError::Arg(format!("attack spec: {e}")))?;
        let x = ds.0.inputs_as::<f32>();
        let y = ds.0.labels_as::<f32>();
        let classes = m.arch.classes();
        let targets = spec
            .targeted
            .then(|| y.map(|v| ((v as usize + 1) % classes) as f32));
        let adv = bim(
            &AttackModel::single(&m.graph, &m.params),
            &x,
            &y,
            &spec,
            targets.as_ref(),
            seed,
        )?;
        *slot = Box::into_raw(Box::new(FsBatch(adv)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fs_batch_len(batch: *const FsBatch, out: *mut usize) -> FsStatus {
    run_ffi(|| {
        let b = want_ref(batch, "batch")?;
        *want_mut(out, "out")? = b.0.adversarials.shape()[0];
        Ok(())
    })
}

/// Fraction of the batch that fools `model` (or hits the stored target
/// class, for a targeted batch).
#[no_mangle]
pub unsafe extern "C" fn fs_batch_success_rate(
    batch: *const FsBatch,
    model: *const FsModel,
    out: *mut f64,
) -> FsStatus {
    run_ffi(|| {
        let b = want_ref(batch, "batch")?;
        let m = want_ref(model, "model")?;
        *want_mut(out, "out")? = flatsurr::attack::success_rate(&b.0, &m.graph, &m.params)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fs_batch_save(batch: *const FsBatch, path: *const c_char) -> FsStatus {
    run_ffi(|| {
        let b = want_ref(batch, "batch")?;
        save_adv_batch(Path::new(want_str(path, "path")?), &b.0)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fs_batch_load(path: *const c_char, out: *mut *mut FsBatch) -> FsStatus {
    run_ffi(|| {
        let slot = want_mut(out, "out")?;
        let adv = load_adv_batch(Path::new(want_str(path, "path")?))?;
        *slot = Box::into_raw(Box::new(FsBatch(adv)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fs_batch_free(batch: *mut FsBatch) {
    if !batch.is_null() {
        drop(Box::from_raw(batch));
    }
}

// ---- statistics ----

/// Welch's unequal-variance t-test. `alternative`: 0 = greater, 1 = less,
/// 2 = two-sided.
#[no_mangle]
pub unsafe extern "C" fn fs_welch_t_test(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    alternative: i32,
    t: *mut f64,
    df: *mut f64,
    p: *mut f64,
) -> FsStatus {
    run_ffi(|| {
        if a.is_null() {
            return Err(FfiError::Null("a"));
        }
        if b.is_null() {
            return Err(FfiError::Null("b"));
        }
        let a = std::slice::from_raw_parts(a, na);
        let b = std::slice::from_raw_parts(b, nb);
        let alt = match alternative {
            0 => Alternative::Greater,
            1 => Alternative::Less,
            2 => Alternative::TwoSided,
            other => return Err(FfiError::Arg(format!("unknown alternative {other}"))),
        };
        let test = welch_t_test(a, b, alt)?;
        *want_mut(t, "t")? = test.t;
        *want_mut(df, "df")? = test.df;
        *want_mut(p, "p")? = test.p;
        Ok(())
    })
}

// ---- experiments ----

/// Full staged experiment from a configuration file; `out_dir` may be null
/// to use the directory named in the config.
#[no_mangle]
pub unsafe extern "C" fn fs_run_experiment(
    config_path: *const c_char,
    out_dir: *const c_char,
    threads: usize,
) -> FsStatus {
    run_ffi(|| {
        let cfg = ExperimentConfig::load(Path::new(want_str(config_path, "config_path")?))?;
        let out: Option<PathBuf> = if out_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(want_str(out_dir, "out_dir")?))
        };
        run_experiment(&cfg, out.as_deref(), threads.max(1))?;
        Ok(())
    })
}
