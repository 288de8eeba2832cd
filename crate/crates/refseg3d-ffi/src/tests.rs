use std::ffi::{CStr, CString};
use std::ptr;

use refseg3d::harness::{generate_scene, SynthSpec};
use refseg3d::model::params::{save_checkpoint, ParamStore};
use refseg3d::model::{forward, infer_gres, infer_res, ModelConfig, RawFeatures, SceneInputs};
use refseg3d::tensor::Tape;

use super::*;

fn checkpoint_dir() -> (tempfile::TempDir, ModelConfig, ParamStore) {
    let cfg = ModelConfig {
        radius: 0.3,
        ..ModelConfig::micro()
    };
    let store = ParamStore::init(&cfg, 99);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &cfg, &store).unwrap();
    (dir, cfg, store)
}

fn load(dir: &tempfile::TempDir) -> *mut RefsegModel {
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut model: *mut RefsegModel = ptr::null_mut();
    let status = unsafe { refseg_model_load(path.as_ptr(), &mut model) };
    assert_eq!(status, RefsegStatus::Ok, "{}", last_error_str());
    assert!(!model.is_null());
    model
}

fn last_error_str() -> String {
    unsafe { CStr::from_ptr(refseg_last_error()) }
        .to_str()
        .unwrap()
        .to_string()
}

#[test]
fn inference_matches_direct_library_calls() {
    let (dir, cfg, store) = checkpoint_dir();
    let model = load(&dir);
    let (scene, _views, text) = generate_scene(&SynthSpec {
        seed: 5,
        ..SynthSpec::default()
    })
    .unwrap();

    let inputs =
        SceneInputs::prepare(&scene, &RawFeatures, &[], text.clone(), &cfg).unwrap();
    let tape = Tape::new();
    let out = forward(&inputs, &cfg, &store.leaves(&tape, false)).unwrap();

    for (mode, want) in [
        (REFSEG_MODE_RES, infer_res(&out.queries, &inputs.sp, scene.num_points())),
        (REFSEG_MODE_GRES, infer_gres(&out.queries, &inputs.sp, scene.num_points())),
    ] {
        let mut mask = vec![0xffu8; scene.num_points()];
        let status = unsafe {
            refseg_infer(
                model,
                scene.points.data.as_ptr(),
                scene.num_points(),
                scene.point_features.data.as_ptr(),
                scene.point_features.cols,
                scene.superpoint_id.as_ptr(),
                text.data.as_ptr(),
                text.rows,
                text.cols,
                mode,
                mask.as_mut_ptr(),
            )
        };
        assert_eq!(status, RefsegStatus::Ok, "{}", last_error_str());
        let want: Vec<u8> = want.iter().map(|&b| b as u8).collect();
        assert_eq!(mask, want, "mode {mode}");
    }
    unsafe { refseg_model_free(model) };
}

#[test]
fn config_json_and_param_count_round_trip() {
    let (dir, cfg, store) = checkpoint_dir();
    let model = load(&dir);

    let json = unsafe { refseg_model_config_json(model) };
    assert!(!json.is_null());
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_string();
    unsafe { refseg_string_free(json) };
    let parsed: ModelConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::to_value(&parsed).unwrap(), serde_json::to_value(&cfg).unwrap());

    let mut count = 0usize;
    let status = unsafe { refseg_model_num_params(model, &mut count) };
    assert_eq!(status, RefsegStatus::Ok);
    assert_eq!(count, store.num_values());

    let version = unsafe { CStr::from_ptr(refseg_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
    unsafe { refseg_model_free(model) };
}

#[test]
fn error_paths_set_status_and_message() {
    let missing = CString::new("/definitely/not/a/checkpoint").unwrap();
    let mut model: *mut RefsegModel = ptr::null_mut();
    let status = unsafe { refseg_model_load(missing.as_ptr(), &mut model) };
    assert_eq!(status, RefsegStatus::Io);
    assert!(model.is_null());
    assert!(last_error_str().contains("/definitely/not/a/checkpoint"));

    let status = unsafe { refseg_model_load(ptr::null(), &mut model) };
    assert_eq!(status, RefsegStatus::NullArgument);

    let (dir, _cfg, _store) = checkpoint_dir();
    let model = load(&dir);
    let (scene, _views, text) = generate_scene(&SynthSpec::default()).unwrap();
    let n = scene.num_points();
    let mut mask = vec![0u8; n];

    let status = unsafe {
        refseg_infer(
            model,
            scene.points.data.as_ptr(),
            n,
            scene.point_features.data.as_ptr(),
            scene.point_features.cols,
            scene.superpoint_id.as_ptr(),
            text.data.as_ptr(),
            text.rows,
            text.cols,
            7,
            mask.as_mut_ptr(),
        )
    };
    assert_eq!(status, RefsegStatus::InvalidArgument);
    assert!(last_error_str().contains("mode"));

    // Feature width disagreeing with the checkpoint is caught by preparation.
    let narrow = vec![0.0; n * 2];
    let status = unsafe {
        refseg_infer(
            model,
            scene.points.data.as_ptr(),
            n,
            narrow.as_ptr(),
            2,
            scene.superpoint_id.as_ptr(),
            text.data.as_ptr(),
            text.rows,
            text.cols,
            REFSEG_MODE_RES,
            mask.as_mut_ptr(),
        )
    };
    assert_eq!(status, RefsegStatus::InvalidArgument);
    assert!(!last_error_str().is_empty());

    let status = unsafe {
        refseg_infer(
            model,
            ptr::null(),
            n,
            scene.point_features.data.as_ptr(),
            scene.point_features.cols,
            scene.superpoint_id.as_ptr(),
            text.data.as_ptr(),
            text.rows,
            text.cols,
            REFSEG_MODE_RES,
            mask.as_mut_ptr(),
        )
    };
    assert_eq!(status, RefsegStatus::NullArgument);

    unsafe { refseg_model_free(model) };
    unsafe { refseg_model_free(ptr::null_mut()) };
    unsafe { refseg_string_free(ptr::null_mut()) };
}
