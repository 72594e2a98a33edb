use std::ffi::{c_char, CStr, CString};

use flatsurr_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let mut buf = [0 as c_char; 512];
    let n = unsafe { fs_last_error(buf.as_mut_ptr(), buf.len()) };
    if n == 0 {
        return String::new();
    }
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn mlp_desc(kind: &CString, hidden: &[usize]) -> FsArchDesc {
    FsArchDesc {
        kind: kind.as_ptr(),
        width: 0,
        hidden: if hidden.is_empty() { std::ptr::null() } else { hidden.as_ptr() },
        hidden_len: hidden.len(),
        blocks: 0,
    }
}

#[test]
fn version_and_error_channel() {
    let version = unsafe { CStr::from_ptr(fs_version()) }.to_str().unwrap();
    assert!(version.split('.').count() >= 2);

    let kind = c("blobs");
    let status = unsafe {
        fs_dataset_generate(kind.as_ptr(), 16, 2, 0.0, 1, std::ptr::null_mut())
    };
    assert_eq!(status, FsStatus::NullPointer);
    assert!(last_error().contains("out"));

    let mut ds: *mut FsDataset = std::ptr::null_mut();
    let status = unsafe { fs_dataset_generate(kind.as_ptr(), 16, 2, 0.0, 1, &mut ds) };
    assert_eq!(status, FsStatus::Ok);
    assert_eq!(unsafe { fs_last_error(std::ptr::null_mut(), 0) }, 0);
    unsafe { fs_dataset_free(ds) };

    let bad = c("fractal");
    let status = unsafe { fs_dataset_generate(bad.as_ptr(), 16, 2, 0.0, 1, &mut ds) };
    assert_eq!(status, FsStatus::InvalidArgument);
    assert!(last_error().contains("fractal"));

    let invalid_utf8 = CStr::from_bytes_with_nul(&[0xFF, 0]).unwrap();
    let status =
        unsafe { fs_dataset_generate(invalid_utf8.as_ptr(), 16, 2, 0.0, 1, &mut ds) };
    assert_eq!(status, FsStatus::Utf8);
}

#[test]
fn dataset_lifecycle() {
    let kind = c("blobs");
    let mut ds: *mut FsDataset = std::ptr::null_mut();
    assert_eq!(
        unsafe { fs_dataset_generate(kind.as_ptr(), 32, 2, 0.02, 7, &mut ds) },
        FsStatus::Ok
    );

    let mut n = 0usize;
    assert_eq!(unsafe { fs_dataset_len(ds, &mut n) }, FsStatus::Ok);
    assert_eq!(n, 32);

    let mut rank = 0usize;
    assert_eq!(
        unsafe { fs_dataset_shape(ds, std::ptr::null_mut(), 0, &mut rank) },
        FsStatus::Ok
    );
    assert_eq!(rank, 1);
    let mut dims = [0usize; 4];
    assert_eq!(unsafe { fs_dataset_shape(ds, dims.as_mut_ptr(), 4, &mut rank) }, FsStatus::Ok);
    assert_eq!(dims[0], 2);
    assert_eq!(
        unsafe { fs_dataset_shape(ds, dims.as_mut_ptr(), 0, std::ptr::null_mut()) },
        FsStatus::NullPointer
    );

    let mut slice: *mut FsDataset = std::ptr::null_mut();
    assert_eq!(unsafe { fs_dataset_slice(ds, 4, 8, &mut slice) }, FsStatus::Ok);
    assert_eq!(unsafe { fs_dataset_len(slice, &mut n) }, FsStatus::Ok);
    assert_eq!(n, 8);
    assert_eq!(
        unsafe { fs_dataset_slice(ds, 30, 8, &mut slice) },
        FsStatus::InvalidArgument,
        "out-of-range slice must fail"
    );

    let tmp = tempfile::tempdir().unwrap();
    let path = c(tmp.path().join("cache.fsds").to_str().unwrap());
    assert_eq!(unsafe { fs_dataset_save(ds, path.as_ptr()) }, FsStatus::Ok);
    let mut back: *mut FsDataset = std::ptr::null_mut();
    assert_eq!(unsafe { fs_dataset_load(path.as_ptr(), &mut back) }, FsStatus::Ok);
    assert_eq!(unsafe { fs_dataset_len(back, &mut n) }, FsStatus::Ok);
    assert_eq!(n, 32);

    let missing = c(tmp.path().join("nope.fsds").to_str().unwrap());
    assert_eq!(unsafe { fs_dataset_load(missing.as_ptr(), &mut back) }, FsStatus::Io);

    unsafe {
        fs_dataset_free(slice);
        fs_dataset_free(back);
        fs_dataset_free(ds);
        fs_dataset_free(std::ptr::null_mut());
    }
}

#[test]
fn train_attack_and_persist_models() {
    let kind = c("blobs");
    let mut ds: *mut FsDataset = std::ptr::null_mut();
    assert_eq!(
        unsafe { fs_dataset_generate(kind.as_ptr(), 64, 2, 0.02, 3, &mut ds) },
        FsStatus::Ok
    );

    let mlp = c("mlp");
    let hidden = [8usize];
    let desc = mlp_desc(&mlp, &hidden);
    let mut model: *mut FsModel = std::ptr::null_mut();
    assert_eq!(unsafe { fs_model_new(&desc, ds, 5, &mut model) }, FsStatus::Ok);

    let sgd = c("sgd");
    assert_eq!(
        unsafe { fs_model_train(model, ds, sgd.as_ptr(), 10, 16, 5) },
        FsStatus::Ok
    );
    let mut acc = 0.0f64;
    assert_eq!(unsafe { fs_model_accuracy(model, ds, &mut acc) }, FsStatus::Ok);
    assert!(acc >= 0.9, "trained accuracy {acc}");

    let bad_opt = c("adam");
    assert_eq!(
        unsafe { fs_model_train(model, ds, bad_opt.as_ptr(), 1, 16, 5) },
        FsStatus::InvalidArgument
    );

    let spec = c(r#"{"epsilon": 0.4, "iterations": 8, "step_size": 0.08}"#);
    let mut batch: *mut FsBatch = std::ptr::null_mut();
    assert_eq!(unsafe { fs_attack_run(model, ds, spec.as_ptr(), 9, &mut batch) }, FsStatus::Ok);
    let mut bn = 0usize;
    assert_eq!(unsafe { fs_batch_len(batch, &mut bn) }, FsStatus::Ok);
    assert_eq!(bn, 64);
    let mut rate = 0.0f64;
    assert_eq!(unsafe { fs_batch_success_rate(batch, model, &mut rate) }, FsStatus::Ok);
    assert!(rate > 0.5, "white-box success {rate}");

    let bad_spec = c(r#"{"epsilon": 0.25}"#);
    assert_eq!(
        unsafe { fs_attack_run(model, ds, bad_spec.as_ptr(), 9, &mut batch) },
        FsStatus::InvalidArgument,
        "incomplete attack spec must be rejected"
    );

    let tmp = tempfile::tempdir().unwrap();
    let bpath = c(tmp.path().join("batch.fsab").to_str().unwrap());
    assert_eq!(unsafe { fs_batch_save(batch, bpath.as_ptr()) }, FsStatus::Ok);
    let mut batch2: *mut FsBatch = std::ptr::null_mut();
    assert_eq!(unsafe { fs_batch_load(bpath.as_ptr(), &mut batch2) }, FsStatus::Ok);
    let mut rate2 = 0.0f64;
    assert_eq!(unsafe { fs_batch_success_rate(batch2, model, &mut rate2) }, FsStatus::Ok);
    assert_eq!(rate, rate2);

    let mpath = c(tmp.path().join("model.fsck").to_str().unwrap());
    assert_eq!(unsafe { fs_model_save(model, mpath.as_ptr()) }, FsStatus::Ok);
    let mut model2: *mut FsModel = std::ptr::null_mut();
    assert_eq!(unsafe { fs_model_load(&desc, ds, mpath.as_ptr(), &mut model2) }, FsStatus::Ok);
    let mut acc2 = 0.0f64;
    assert_eq!(unsafe { fs_model_accuracy(model2, ds, &mut acc2) }, FsStatus::Ok);
    assert_eq!(acc, acc2);

    let wrong_hidden = [4usize];
    let wrong = mlp_desc(&mlp, &wrong_hidden);
    let mut model3: *mut FsModel = std::ptr::null_mut();
    assert_ne!(
        unsafe { fs_model_load(&wrong, ds, mpath.as_ptr(), &mut model3) },
        FsStatus::Ok,
        "checkpoint must not load into a mismatched architecture"
    );

    let mut lambda = 0.0;
    let mut trace = 0.0;
    let mut se = 0.0;
    let mut gap = 0.0;
    assert_eq!(
        unsafe {
            fs_model_sharpness(model, ds, 32, 2, 11, &mut lambda, &mut trace, &mut se, &mut gap)
        },
        FsStatus::Ok
    );
    assert!(lambda.is_finite() && trace.is_finite() && gap.is_finite());
    assert!(se >= 0.0);

    unsafe {
        fs_batch_free(batch);
        fs_batch_free(batch2);
        fs_model_free(model);
        fs_model_free(model2);
        fs_dataset_free(ds);
    }
}

#[test]
fn welch_matches_the_native_routine() {
    let a = [1.1f64, 1.2, 1.3, 1.4];
    let b = [0.9f64, 1.0, 1.1, 1.2];
    let (mut t, mut df, mut p) = (0.0, 0.0, 0.0);
    let status = unsafe {
        fs_welch_t_test(a.as_ptr(), a.len(), b.as_ptr(), b.len(), 0, &mut t, &mut df, &mut p)
    };
    assert_eq!(status, FsStatus::Ok);
    let native = flatsurr::stats::welch_t_test(
        &a,
        &b,
        flatsurr::stats::Alternative::Greater,
    )
    .unwrap();
    assert_eq!(t, native.t);
    assert_eq!(df, native.df);
    assert_eq!(p, native.p);

    let status = unsafe {
        fs_welch_t_test(a.as_ptr(), a.len(), b.as_ptr(), b.len(), 9, &mut t, &mut df, &mut p)
    };
    assert_eq!(status, FsStatus::InvalidArgument);
    let status = unsafe {
        fs_welch_t_test(a.as_ptr(), 1, b.as_ptr(), b.len(), 0, &mut t, &mut df, &mut p)
    };
    assert_ne!(status, FsStatus::Ok, "single-element sample must be rejected");
}

#[test]
fn experiment_runs_from_a_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let config = format!(
        r#"
[data]
kind = "blobs"
n = 48
classes = 2
noise = 0.02
seed = 11
test_n = 48

[surrogate]
arch = "mlp"
hidden = [4]
optimizer = "sgd"
epochs = 2
batch_size = 16
seeds = [1]

[targets]
arch = "mlp"
hidden = [4]
count = 1
epochs = 4
seed0 = 500

[attack]
epsilon = 0.1
iterations = 2

[eval]
n = 6
seed = 77

[output]
dir = "{}"
"#,
        out.display()
    );
    let cfg_path = tmp.path().join("exp.toml");
    std::fs::write(&cfg_path, config).unwrap();

    let cpath = c(cfg_path.to_str().unwrap());
    assert_eq!(
        unsafe { fs_run_experiment(cpath.as_ptr(), std::ptr::null(), 1) },
        FsStatus::Ok
    );
    assert!(out.join("transfer/raw.csv").exists());
    assert!(out.join("report/summary.json").exists());

    let missing = c(tmp.path().join("nope.toml").to_str().unwrap());
    assert_eq!(
        unsafe { fs_run_experiment(missing.as_ptr(), std::ptr::null(), 1) },
        FsStatus::Io
    );
}
