use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use arf_core::anchors::{build_candidate_index, retrieve, RetrievalMode};
use arf_core::benchgen::{generate_benchmark, GenConfig};
use arf_core::encoders::{encode, init_params, Modality};
use arf_core::io::checkpoint::write_checkpoint;
use arf_core::io::records::write_index;
use arf_core::training::{Checkpoint, Provenance};
use arf_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    ckpt: CString,
    ckpt2: CString,
    index: CString,
    checkpoint: Checkpoint,
    bundle: arf_core::benchgen::BenchmarkBundle,
}

fn fixture() -> Fixture {
    let bundle = generate_benchmark(&GenConfig::tiny(3, 6, 5)).unwrap();
    let checkpoint = Checkpoint::new(
        init_params(3, (6, 5), 8, 4).unwrap(),
        "t".into(),
        Provenance::Pretrained,
    )
    .unwrap();
    let other = Checkpoint::new(
        init_params(4, (6, 5), 8, 4).unwrap(),
        "t".into(),
        Provenance::Finetuned,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    write_checkpoint(&p("pre.json"), &checkpoint).unwrap();
    write_checkpoint(&p("ft.json"), &other).unwrap();
    write_index(
        &p("index.json"),
        &build_candidate_index(&checkpoint, &bundle.candidates).unwrap(),
    )
    .unwrap();
    let c = |n: &str| CString::new(p(n).to_str().unwrap()).unwrap();
    Fixture {
        ckpt: c("pre.json"),
        ckpt2: c("ft.json"),
        index: c("index.json"),
        _dir: dir,
        checkpoint,
        bundle,
    }
}

unsafe fn load(path: &CString) -> *mut ArfModel {
    let mut m = ptr::null_mut();
    assert_eq!(arf_model_load(path.as_ptr(), &mut m), ArfStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = arf_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn model_round_trip_through_handles() {
    let f = fixture();
    unsafe {
        let m = load(&f.ckpt);
        let (mut i, mut t, mut e) = (0usize, 0usize, 0usize);
        assert_eq!(arf_model_dims(m, &mut i, &mut t, &mut e), ArfStatus::Ok);
        assert_eq!((i, t, e), (6, 5, 4));
        let mut tau = 0.0;
        assert_eq!(arf_model_tau(m, &mut tau), ArfStatus::Ok);
        assert_eq!(tau, f.checkpoint.params.tau());

        let id = arf_model_checkpoint_id(m);
        assert_eq!(CStr::from_ptr(id).to_str().unwrap(), f.checkpoint.id());
        arf_string_free(id);

        let x = f.bundle.finetune[0].feature.as_slice();
        let mut out = [0.0f64; 4];
        assert_eq!(
            arf_model_encode(
                m,
                ArfModality::Image,
                x.as_ptr(),
                x.len(),
                out.as_mut_ptr(),
                out.len()
            ),
            ArfStatus::Ok
        );
        assert_eq!(
            out.as_slice(),
            encode(&f.checkpoint.params, Modality::Image, x)
                .unwrap()
                .as_slice()
        );
        assert_eq!(
            arf_model_encode(
                m,
                ArfModality::Image,
                x.as_ptr(),
                x.len(),
                out.as_mut_ptr(),
                3
            ),
            ArfStatus::BufferTooSmall
        );
        assert_eq!(
            arf_model_encode(
                m,
                ArfModality::Text,
                x.as_ptr(),
                x.len(),
                out.as_mut_ptr(),
                4
            ),
            ArfStatus::DimensionMismatch
        );
        assert!(last_error().contains("expected dimension 5"));
        arf_model_free(m);
    }
}

#[test]
fn classify_matches_core() {
    let f = fixture();
    let b = &f.bundle;
    let images: Vec<f64> = b
        .id_test
        .iter()
        .flat_map(|s| s.feature.iter().copied())
        .collect();
    let prompts = b.prompts_id.features().as_slice();
    let ids = b.prompts_id.class_ids();
    let mut preds = vec![u32::MAX; b.id_test.len()];
    unsafe {
        let m = load(&f.ckpt);
        assert_eq!(
            arf_model_classify(
                m,
                images.as_ptr(),
                b.id_test.len(),
                6,
                prompts.as_ptr(),
                ids.len(),
                5,
                ids.as_ptr(),
                preds.as_mut_ptr()
            ),
            ArfStatus::Ok
        );
        arf_model_free(m);
    }
    let classifier =
        arf_core::evaluation::build_prompt_classifier(&f.checkpoint.params, &b.prompts_id).unwrap();
    let expected =
        arf_core::evaluation::classify(&f.checkpoint.params, &b.id_test, &classifier, ids).unwrap();
    assert_eq!(preds, expected);
}

#[test]
fn ensemble_endpoints() {
    let f = fixture();
    unsafe {
        let (a, b) = (load(&f.ckpt), load(&f.ckpt2));
        let mut e = ptr::null_mut();
        assert_eq!(arf_model_ensemble(a, b, 0.0, &mut e), ArfStatus::Ok);
        let x = [0.3, -0.1, 0.2, 0.5, 0.0];
        let (mut u, mut v) = ([0.0; 4], [0.0; 4]);
        arf_model_encode(a, ArfModality::Text, x.as_ptr(), 5, u.as_mut_ptr(), 4);
        arf_model_encode(e, ArfModality::Text, x.as_ptr(), 5, v.as_mut_ptr(), 4);
        assert_eq!(u, v);
        arf_model_free(e);
        let mut e = ptr::null_mut();
        assert_eq!(
            arf_model_ensemble(a, b, 1.5, &mut e),
            ArfStatus::InvalidArgument
        );
        assert!(e.is_null());
        arf_model_free(a);
        arf_model_free(b);
    }
}

#[test]
fn index_retrieval_matches_core() {
    let f = fixture();
    unsafe {
        let m = load(&f.ckpt);
        let mut idx = ptr::null_mut();
        assert_eq!(arf_index_load(f.index.as_ptr(), &mut idx), ArfStatus::Ok);
        assert_eq!(arf_index_len(idx), f.bundle.candidates.len());
        let q = &f.bundle.finetune[1].feature;
        let (mut ids, mut scores) = ([0u64; 3], [0.0f64; 3]);
        assert_eq!(
            arf_index_retrieve(
                idx,
                m,
                ArfRetrievalMode::V2T,
                q.as_ptr(),
                q.len(),
                3,
                ids.as_mut_ptr(),
                scores.as_mut_ptr()
            ),
            ArfStatus::Ok
        );
        let core_index = build_candidate_index(&f.checkpoint, &f.bundle.candidates).unwrap();
        let hits = retrieve(
            &core_index,
            &[(0, q.clone())],
            &f.checkpoint,
            RetrievalMode::V2T,
            3,
        )
        .unwrap();
        assert_eq!(
            ids.to_vec(),
            hits.iter().map(|h| h.candidate_id).collect::<Vec<_>>()
        );
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));

        let other = load(&f.ckpt2);
        assert_eq!(
            arf_index_retrieve(
                idx,
                other,
                ArfRetrievalMode::V2T,
                q.as_ptr(),
                q.len(),
                3,
                ids.as_mut_ptr(),
                scores.as_mut_ptr()
            ),
            ArfStatus::CheckpointMismatch
        );
        assert_eq!(
            arf_index_retrieve(
                idx,
                m,
                ArfRetrievalMode::V2T,
                q.as_ptr(),
                q.len(),
                0,
                ids.as_mut_ptr(),
                scores.as_mut_ptr()
            ),
            ArfStatus::InvalidArgument
        );
        arf_model_free(other);
        arf_model_free(m);
        arf_index_free(idx);
    }
}

#[test]
fn contrastive_loss_values() {
    let mut out = ArfLoss::default();
    let one = [0.6, 0.8];
    let other = [1.0, 0.0];
    unsafe {
        assert_eq!(
            arf_contrastive_loss(one.as_ptr(), other.as_ptr(), 1, 2, 0.07, &mut out),
            ArfStatus::Ok
        );
        assert!(out.total.abs() < 1e-12);
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(
            arf_contrastive_loss(eye.as_ptr(), eye.as_ptr(), 2, 2, 1.0, &mut out),
            ArfStatus::Ok
        );
        assert!((out.total - 2.0 * (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        let bad = [2.0, 0.0];
        assert_eq!(
            arf_contrastive_loss(bad.as_ptr(), other.as_ptr(), 1, 2, 0.07, &mut out),
            ArfStatus::InvalidArgument
        );
        assert_eq!(
            arf_contrastive_loss(ptr::null(), other.as_ptr(), 1, 2, 0.07, &mut out),
            ArfStatus::NullPointer
        );
    }
}

#[test]
fn load_failures_report_status_and_message() {
    let f = fixture();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(arf_model_load(ptr::null(), &mut m), ArfStatus::NullPointer);
        let missing = CString::new("/nonexistent/ckpt.json").unwrap();
        assert_eq!(arf_model_load(missing.as_ptr(), &mut m), ArfStatus::Io);
        assert!(m.is_null());

        let path = Path::new(f.ckpt.to_str().unwrap());
        let text = std::fs::read_to_string(path).unwrap();
        let tampered = text.replacen(
            "\"config_fingerprint\": \"t\"",
            "\"config_fingerprint\": \"u\"",
            1,
        );
        assert_ne!(text, tampered);
        std::fs::write(path, tampered).unwrap();
        assert_eq!(
            arf_model_load(f.ckpt.as_ptr(), &mut m),
            ArfStatus::HashMismatch
        );
        assert!(last_error().contains("hash"));
        arf_model_free(ptr::null_mut());
        arf_index_free(ptr::null_mut());
        assert_eq!(arf_index_len(ptr::null()), 0);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(arf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn saved_ensemble_reloads_with_same_id() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().join("mix.json").to_str().unwrap()).unwrap();
    unsafe {
        let (a, b) = (load(&f.ckpt), load(&f.ckpt2));
        let mut e = ptr::null_mut();
        assert_eq!(arf_model_ensemble(a, b, 0.25, &mut e), ArfStatus::Ok);
        assert_eq!(arf_model_save(e, out.as_ptr()), ArfStatus::Ok);
        let back = load(&out);
        let (ie, ib) = (arf_model_checkpoint_id(e), arf_model_checkpoint_id(back));
        assert_eq!(CStr::from_ptr(ie), CStr::from_ptr(ib));
        arf_string_free(ie);
        arf_string_free(ib);
        assert_eq!(arf_model_save(ptr::null(), out.as_ptr()), ArfStatus::NullPointer);
        for m in [a, b, e, back] {
            arf_model_free(m);
        }
    }
}
