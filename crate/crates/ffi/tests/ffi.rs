use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use amrlab::data::{generate_synthetic, SyntheticConfig};
use amrlab_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = amrlab_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_config(dir: &Path) -> String {
    format!(
        r#"
[data.synthetic]
num_classes = 3
train_samples = 120
val_samples = 60
modality_dims = [4, 3]
signal_scales = [3.0, 1.0]
noise_stds = [1.0, 1.0]
seed = 5

[model]
encoding_dim = 4
encoder_hidden = [6]
classifier_hidden = [5]

[train]
strategy = "naive"
epochs = 2
batch_size = 32
seed = 5

[amr]
enabled = true
ratios = [1.0, 1.0]

[output]
dir = "{}"
"#,
        dir.join("run").display()
    )
}

#[test]
fn dataset_handle_reports_shape() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = generate_synthetic(&SyntheticConfig {
        num_classes: 4,
        train_samples: 30,
        val_samples: 10,
        modality_dims: vec![3, 5],
        signal_scales: vec![1.0, 1.0],
        noise_stds: vec![1.0, 1.0],
        label_noise: 0.0,
        seed: 1,
    })
    .unwrap();
    let path = dir.path().join("t.amrdata");
    train.write_feature_file(&path).unwrap();

    let mut ds = ptr::null_mut();
    let st = unsafe { amrlab_dataset_load(cstr(&path).as_ptr(), &mut ds) };
    assert_eq!(st, AmrlabStatus::Ok);
    let (mut n, mut m, mut c) = (0, 0, 0);
    assert_eq!(unsafe { amrlab_dataset_shape(ds, &mut n, &mut m, &mut c) }, AmrlabStatus::Ok);
    assert_eq!((n, m, c), (30, 2, 4));
    let mut d = 0;
    assert_eq!(unsafe { amrlab_dataset_modality_dim(ds, 1, &mut d) }, AmrlabStatus::Ok);
    assert_eq!(d, 5);
    assert_eq!(
        unsafe { amrlab_dataset_modality_dim(ds, 2, &mut d) },
        AmrlabStatus::InvalidArgument
    );
    unsafe { amrlab_dataset_free(ds) };
}

#[test]
fn missing_file_is_a_data_error() {
    let mut ds = ptr::null_mut();
    let p = CString::new("/nonexistent/x.amrdata").unwrap();
    let st = unsafe { amrlab_dataset_load(p.as_ptr(), &mut ds) };
    assert_eq!(st, AmrlabStatus::Data);
    assert!(ds.is_null());
    assert!(last_error().contains("x.amrdata"));
}

#[test]
fn null_arguments_are_rejected() {
    let mut out = 0.0;
    let st = unsafe { amrlab_amr_loss(ptr::null(), ptr::null(), 2, &mut out) };
    assert_eq!(st, AmrlabStatus::InvalidArgument);
    let st = unsafe { amrlab_dataset_load(ptr::null(), ptr::null_mut()) };
    assert_eq!(st, AmrlabStatus::InvalidArgument);
    unsafe {
        amrlab_dataset_free(ptr::null_mut());
        amrlab_model_free(ptr::null_mut());
    }
}

#[test]
fn amr_loss_matches_hand_value() {
    let a = [0.74, 0.26];
    let r = [1.0, 1.0];
    let mut out = 0.0;
    assert_eq!(unsafe { amrlab_amr_loss(a.as_ptr(), r.as_ptr(), 2, &mut out) }, AmrlabStatus::Ok);
    assert!((out - 0.48).abs() < 1e-12);

    let bad = [-1.0, 2.0];
    let st = unsafe { amrlab_amr_loss(bad.as_ptr(), r.as_ptr(), 2, &mut out) };
    assert_ne!(st, AmrlabStatus::Ok);
}

#[test]
fn ogm_coefficients_closed_form() {
    let a = [0.8, 0.2];
    let mut k = [0.0; 2];
    assert_eq!(
        unsafe { amrlab_ogm_coefficients(a.as_ptr(), 2, 1.5, k.as_mut_ptr()) },
        AmrlabStatus::Ok
    );
    assert!((k[0] - (1.0 - (1.5f64 * 0.6).tanh())).abs() < 1e-12);
    assert_eq!(k[1], 1.0);
}

#[test]
fn map_of_perfect_ranking_is_one() {
    let scores = [0.9, 0.1, 0.2, 0.8, 0.7, 0.3];
    let labels = [0u32, 1, 0];
    let mut out = 0.0;
    let st = unsafe {
        amrlab_mean_average_precision(scores.as_ptr(), 3, 2, labels.as_ptr(), &mut out)
    };
    assert_eq!(st, AmrlabStatus::Ok);
    assert_eq!(out, 1.0);
}

#[test]
fn train_then_attribute_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.toml");
    std::fs::write(&cfg_path, small_config(dir.path())).unwrap();
    let out = dir.path().join("run");
    let st = unsafe { amrlab_train(cstr(&cfg_path).as_ptr(), cstr(&out).as_ptr()) };
    assert_eq!(st, AmrlabStatus::Ok);

    let mut model = ptr::null_mut();
    let st = unsafe { amrlab_model_load(cstr(&out.join("model.ckpt")).as_ptr(), &mut model) };
    assert_eq!(st, AmrlabStatus::Ok);
    let mut m = 0;
    assert_eq!(unsafe { amrlab_model_num_modalities(model, &mut m) }, AmrlabStatus::Ok);
    assert_eq!(m, 2);

    let cfg = amrlab::config::ExperimentConfig::load(&cfg_path).unwrap();
    let (_, val) = cfg.load_data().unwrap();
    let data_path = dir.path().join("val.amrdata");
    val.write_feature_file(&data_path).unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { amrlab_dataset_load(cstr(&data_path).as_ptr(), &mut ds) }, AmrlabStatus::Ok);

    let mut a = [0.0; 2];
    assert_eq!(unsafe { amrlab_attribution(model, ds, a.as_mut_ptr(), 2) }, AmrlabStatus::Ok);
    assert!((a[0] + a[1] - 1.0).abs() < 1e-9);
    assert_eq!(
        unsafe { amrlab_attribution(model, ds, a.as_mut_ptr(), 3) },
        AmrlabStatus::InvalidArgument
    );
    unsafe {
        amrlab_dataset_free(ds);
        amrlab_model_free(model);
    }
}

#[test]
fn train_with_bad_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.toml");
    std::fs::write(&cfg_path, "[train]\nepochs = \"many\"\n").unwrap();
    let st = unsafe { amrlab_train(cstr(&cfg_path).as_ptr(), ptr::null()) };
    assert_eq!(st, AmrlabStatus::Config);
    assert!(!last_error().is_empty());
}
