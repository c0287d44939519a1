//! Exercises the C ABI end to end: handle lifecycle, reconstruction,
//! metrics, and every documented failure path.

use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::ptr;

use madun_core::checkpoint::save_checkpoint;
use madun_core::cs::GaussianOperator;
use madun_core::model::{ClmVariant, HsmVariant, ModelConfig, ModelParams, OperatorKind};
use madun_core::tensor::Tensor;
use madun_core::trainer::{TrainConfig, TrainState};

use madun_ffi::*;

fn c_path(path: &std::path::Path) -> CString {
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe {
        CStr::from_ptr(madun_last_error_message())
            .to_string_lossy()
            .into_owned()
    }
}

/// Writes a checkpoint whose model is the exact identity: zero weights and
/// an identity Φ at ratio 1, so every GDM step returns the input unchanged.
fn write_identity_checkpoint(dir: &std::path::Path, block: usize) -> std::path::PathBuf {
    let n = block * block;
    let config = ModelConfig {
        stages: 2,
        channels: 2,
        hsm: HsmVariant::Rb2,
        clm: ClmVariant::Lstm,
        operator: OperatorKind::Gaussian,
        ratio: 1.0,
    };
    let train_cfg = TrainConfig {
        block,
        epochs_phase2: 0,
        ..TrainConfig::default()
    };
    let eye = Tensor::from_fn(&[n, n], |i| if i % n == i / n { 1.0 } else { 0.0 });
    let op = GaussianOperator::from_phi(eye, 1.0, false, 0).unwrap();
    let mut state = TrainState::new(&config, &train_cfg, op);
    state.params = ModelParams::zeros(&config);
    let path = dir.join("identity.ckpt");
    save_checkpoint(&path, &state.to_checkpoint(&config, &train_cfg)).unwrap();
    path
}

#[test]
fn version_is_a_valid_string() {
    let v = unsafe { CStr::from_ptr(madun_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn load_reconstruct_free_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_identity_checkpoint(dir.path(), 9);

    let mut model: *mut MadunModel = ptr::null_mut();
    let status = unsafe { madun_model_load(c_path(&ckpt).as_ptr(), ptr::null(), &mut model) };
    assert_eq!(status, MadunStatus::MADUN_STATUS_OK, "{}", last_error());
    assert!(!model.is_null());

    unsafe {
        assert_eq!(madun_model_stages(model), 2);
        assert_eq!(madun_model_channels(model), 2);
        assert_eq!(madun_model_ratio(model), 1.0);
        assert_eq!(madun_model_block(model), 9);
        assert_eq!(madun_model_kind(model), 0);
    }

    // The zero-weight identity model reproduces 8-bit pixels exactly, so the
    // ABI roundtrip is checked bit for bit.
    let (h, w) = (18usize, 27usize);
    let pixels: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 256) as f64).collect();
    let mut out = vec![-1.0f64; h * w];
    let status = unsafe {
        madun_reconstruct(model, pixels.as_ptr(), h, w, 9, out.as_mut_ptr())
    };
    assert_eq!(status, MadunStatus::MADUN_STATUS_OK, "{}", last_error());
    assert_eq!(out, pixels);

    let mut p = 0.0f64;
    let status = unsafe { madun_psnr(pixels.as_ptr(), out.as_ptr(), h, w, &mut p) };
    assert_eq!(status, MadunStatus::MADUN_STATUS_OK);
    assert!(p.is_infinite());

    let mut s = 0.0f64;
    let status = unsafe { madun_ssim(pixels.as_ptr(), out.as_ptr(), h, w, &mut s) };
    assert_eq!(status, MadunStatus::MADUN_STATUS_OK);
    assert_eq!(s, 1.0);

    unsafe { madun_model_free(model) };
    unsafe { madun_model_free(ptr::null_mut()) }; // null is a safe no-op
}

#[test]
fn missing_checkpoint_reports_io_with_message() {
    let mut model: *mut MadunModel = ptr::null_mut();
    let path = CString::new("/no/such/file.ckpt").unwrap();
    let status = unsafe { madun_model_load(path.as_ptr(), ptr::null(), &mut model) };
    assert_eq!(status, MadunStatus::MADUN_STATUS_IO);
    assert!(model.is_null());
    assert!(last_error().contains("/no/such/file.ckpt"), "{}", last_error());
}

#[test]
fn null_arguments_are_rejected_not_crashed() {
    let mut model: *mut MadunModel = ptr::null_mut();
    let status = unsafe { madun_model_load(ptr::null(), ptr::null(), &mut model) };
    assert_eq!(status, MadunStatus::MADUN_STATUS_NULL_ARGUMENT);

    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_identity_checkpoint(dir.path(), 9);
    let status = unsafe { madun_model_load(c_path(&ckpt).as_ptr(), ptr::null(), ptr::null_mut()) };
    assert_eq!(status, MadunStatus::MADUN_STATUS_NULL_ARGUMENT);

    let mut out = [0.0f64; 81];
    let status = unsafe {
        madun_reconstruct(ptr::null(), out.as_ptr(), 9, 9, 9, out.as_mut_ptr())
    };
    assert_eq!(status, MadunStatus::MADUN_STATUS_NULL_ARGUMENT);

    let mut p = 0.0;
    let status = unsafe { madun_psnr(ptr::null(), ptr::null(), 4, 4, &mut p) };
    assert_eq!(status, MadunStatus::MADUN_STATUS_NULL_ARGUMENT);
    assert!(last_error().contains("reference"));
}

#[test]
fn undersized_images_report_shape_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_identity_checkpoint(dir.path(), 9);
    let mut model: *mut MadunModel = ptr::null_mut();
    let status = unsafe { madun_model_load(c_path(&ckpt).as_ptr(), ptr::null(), &mut model) };
    assert_eq!(status, MadunStatus::MADUN_STATUS_OK);

    // 5x5 is smaller than the 9-pixel sampling block.
    let pixels = [0.0f64; 25];
    let mut out = [0.0f64; 25];
    let status = unsafe {
        madun_reconstruct(model, pixels.as_ptr(), 5, 5, 5, out.as_mut_ptr())
    };
    assert_ne!(status, MadunStatus::MADUN_STATUS_OK);
    assert!(!last_error().is_empty());

    // SSIM needs at least 11x11.
    let mut s = 0.0;
    let status = unsafe { madun_ssim(pixels.as_ptr(), pixels.as_ptr(), 5, 5, &mut s) };
    assert_eq!(status, MadunStatus::MADUN_STATUS_DATA);

    unsafe { madun_model_free(model) };
}

#[test]
fn mri_model_requires_a_mask() {
    let dir = tempfile::tempdir().unwrap();
    // Build a tiny MRI-flavored checkpoint: same parameter layout, operator
    // flag flipped, Φ stored as a placeholder (MRI models keep the mask
    // outside the checkpoint).
    let config = ModelConfig {
        stages: 1,
        channels: 2,
        hsm: HsmVariant::Rb2,
        clm: ClmVariant::Lstm,
        operator: OperatorKind::Mri,
        ratio: 1.0,
    };
    let params = ModelParams::<f64>::zeros(&config);
    let mut tensors = Vec::new();
    params.walk(|name, t| tensors.push((name, t.clone())));
    tensors.push(("phi".to_string(), Tensor::zeros(&[1, 1])));
    let ckpt = madun_core::checkpoint::Checkpoint {
        meta: madun_core::checkpoint::CheckpointMeta {
            config,
            dtype: "f64".to_string(),
            epoch: 0,
            step: 0,
            seed: 0,
            learn_phi: false,
            loss_history: vec![],
        },
        tensors,
    };
    let path = dir.path().join("mri.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();

    let mut model: *mut MadunModel = ptr::null_mut();
    let status = unsafe { madun_model_load(c_path(&path).as_ptr(), ptr::null(), &mut model) };
    assert_eq!(status, MadunStatus::MADUN_STATUS_CONFIG);
    assert!(last_error().contains("mask"));

    // With a mask supplied, the load succeeds and reports the MRI kind.
    let mask_path = dir.path().join("mask.pgm");
    let mask = Tensor::from_fn(&[16, 16], |i| if i % 3 == 0 { 255.0 } else { 0.0 });
    madun_core::pgm::write_pgm(&mask_path, &mask).unwrap();
    let status = unsafe {
        madun_model_load(
            c_path(&path).as_ptr(),
            c_path(&mask_path).as_ptr(),
            &mut model,
        )
    };
    assert_eq!(status, MadunStatus::MADUN_STATUS_OK, "{}", last_error());
    unsafe {
        assert_eq!(madun_model_kind(model), 1);
        assert_eq!(madun_model_block(model), 0);
        madun_model_free(model);
    }
}

#[test]
fn generated_header_declares_the_api() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("madun.h");
    let text = std::fs::read_to_string(&header)
        .unwrap_or_else(|e| panic!("missing generated header {}: {e}", header.display()));
    for symbol in [
        "MADUN_H",
        "MadunStatus",
        "MadunModel",
        "madun_model_load",
        "madun_model_free",
        "madun_reconstruct",
        "madun_psnr",
        "madun_ssim",
        "madun_last_error_message",
        "madun_version",
    ] {
        assert!(text.contains(symbol), "header lacks {symbol}");
    }
    // The handle must be opaque: a forward declaration, never a definition
    // with fields.
    assert!(text.contains("typedef struct MadunModel MadunModel;"));
}

#[test]
fn invalid_utf8_path_is_rejected() {
    let bytes: [c_char; 4] = [-1i8 as c_char, -2i8 as c_char, -3i8 as c_char, 0];
    let mut model: *mut MadunModel = ptr::null_mut();
    let status = unsafe { madun_model_load(bytes.as_ptr(), ptr::null(), &mut model) };
    assert_eq!(status, MadunStatus::MADUN_STATUS_INVALID_UTF8);
}
