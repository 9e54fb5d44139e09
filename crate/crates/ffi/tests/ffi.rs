use std::ffi::{CStr, CString};
use std::ptr;

use kgrec::checkpoint;
use kgrec::fixtures::overfit_fixture;
use kgrec::model::ModelConfig;
use kgrec::training::{build_model, TrainConfig};
use kgrec_ffi::*;

fn tiny_checkpoint(dir: &std::path::Path) {
    let fx = overfit_fixture(6, 3);
    let mut config = ModelConfig::desk();
    config.d_model = 16;
    config.heads = 2;
    config.ffn_dim = 32;
    config.encoder_layers = 1;
    config.decoder_layers = 1;
    config.max_response_len = 8;
    let model = build_model(config, fx.tokenizer, fx.kg, &TrainConfig::default()).unwrap();
    checkpoint::save(&model, dir).unwrap();
}

unsafe fn take(s: *mut std::ffi::c_char) -> String {
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    kgrec_string_free(s);
    out
}

#[test]
fn load_chat_recommend_free() {
    let dir = tempfile::tempdir().unwrap();
    tiny_checkpoint(dir.path());
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(kgrec_model_load(path.as_ptr(), &mut model), KgrecStatus::Ok);
        assert!(!model.is_null());

        let mut out = ptr::null_mut();
        let req = CString::new(r#"{"history":[{"speaker":"seeker","text":"any good movies?"}],"top_k":3}"#).unwrap();
        assert_eq!(kgrec_chat_json(model, req.as_ptr(), &mut out), KgrecStatus::Ok);
        let resp: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(resp["recommendations"].as_array().unwrap().len(), 3);
        assert!(resp["filled_response"].is_string());

        let text = CString::new("something funny").unwrap();
        assert_eq!(kgrec_recommend(model, text.as_ptr(), 2, &mut out), KgrecStatus::Ok);
        let items: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(items.as_array().unwrap().len(), 2);

        assert_eq!(kgrec_checkpoint_hash(model, &mut out), KgrecStatus::Ok);
        assert_eq!(take(out), checkpoint::checkpoint_hash(dir.path()).unwrap());

        let bad = CString::new(r#"{"history":[],"top_k":3}"#).unwrap();
        assert_eq!(kgrec_chat_json(model, bad.as_ptr(), &mut out), KgrecStatus::BadRequest);
        assert!(out.is_null());
        assert!(!kgrec_last_error().is_null());

        kgrec_model_free(model);
    }
}

#[test]
fn errors_are_codes_not_crashes() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(kgrec_model_load(ptr::null(), &mut model), KgrecStatus::NullPointer);
        let missing = CString::new("/nonexistent/checkpoint").unwrap();
        assert_eq!(kgrec_model_load(missing.as_ptr(), &mut model), KgrecStatus::Io);
        assert!(model.is_null());
        let msg = CStr::from_ptr(kgrec_last_error()).to_str().unwrap();
        assert!(msg.contains("nonexistent"), "{msg}");
        let mut out = ptr::null_mut();
        assert_eq!(kgrec_chat_json(ptr::null(), ptr::null(), &mut out), KgrecStatus::NullPointer);
        kgrec_model_free(ptr::null_mut());
        kgrec_string_free(ptr::null_mut());
        assert_eq!(CStr::from_ptr(kgrec_version()).to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/kgrec.h")).unwrap();
    for name in [
        "kgrec_model_load",
        "kgrec_model_free",
        "kgrec_chat_json",
        "kgrec_recommend",
        "kgrec_checkpoint_hash",
        "kgrec_last_error",
        "kgrec_string_free",
        "KGREC_STATUS_BAD_REQUEST",
        "typedef struct KgrecModel KgrecModel",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}
