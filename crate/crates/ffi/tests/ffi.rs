//! Exercises the C ABI end to end: model load, scene generation,
//! compress/decompress round trip, and error-code discipline.

use std::ffi::{CStr, CString};
use std::path::PathBuf;

use icm::backbone::{build_backbone, pretrain_backbone, save_backbone, BackboneConfig, PretextTaskConfig};
use icm::pipeline::{Pipeline, PipelineConfig, TrainMode};
use icm::training::{train, TrainConfig};

use icm_ffi::*;

/// Train a tiny model once and reuse it across tests.
struct Fixture {
    _dir: tempfile::TempDir,
    ckpt: CString,
    backbone: CString,
    bad_backbone: CString,
}

fn fixture() -> &'static Fixture {
    use std::sync::OnceLock;
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let bcfg = BackboneConfig {
            stage_channels: vec![8, 12, 16, 20],
            stage_depths: vec![1, 1, 1, 1],
            num_heads: 2,
            ..Default::default()
        };
        let (mut bb, mut bstore) = build_backbone(bcfg.clone(), 0).unwrap();
        let px = PretextTaskConfig { n_train: 8, n_val: 4, batch_size: 4, ..Default::default() };
        pretrain_backbone(&mut bb, &mut bstore, &px, 2, 0).unwrap();
        bb.set_frozen(&mut bstore, true);
        let backbone_path = dir.path().join("bb.icmc");
        save_backbone(&backbone_path, &bb, &bstore).unwrap();

        // a second, different backbone to test the hash check
        let (mut bb2, mut bstore2) = build_backbone(bcfg.clone(), 99).unwrap();
        pretrain_backbone(&mut bb2, &mut bstore2, &px, 1, 99).unwrap();
        bb2.set_frozen(&mut bstore2, true);
        let bad_backbone_path = dir.path().join("bb_bad.icmc");
        save_backbone(&bad_backbone_path, &bb2, &bstore2).unwrap();

        let mut pcfg = PipelineConfig::dora(icm::task::TaskId::Semseg);
        pcfg.backbone = bcfg;
        pcfg.adapter = Some(icm::adaptation::AdapterPlan::qkv(
            icm::adaptation::AdapterKind::Dora,
            2,
            "semseg",
        ));
        assert_eq!(pcfg.mode, TrainMode::DoraFt);
        let mut cfg = TrainConfig::desk_default(pcfg, 0.1);
        cfg.iterations = 5;
        cfg.n_train = 8;
        cfg.n_val = 4;
        let (pipe, mut store) = Pipeline::build(cfg.pipeline.clone(), Some((&bb, &bstore))).unwrap();
        let report = train(&pipe, &mut store, &cfg, dir.path()).unwrap();

        let to_c = |p: &PathBuf| CString::new(p.to_str().unwrap()).unwrap();
        Fixture {
            ckpt: to_c(&report.ckpt_path),
            backbone: to_c(&backbone_path),
            bad_backbone: to_c(&bad_backbone_path),
            _dir: dir,
        }
    })
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(icm_last_error_message()).to_string_lossy().into_owned() }
}

#[test]
fn load_compress_decompress_round_trip() {
    let fix = fixture();
    unsafe {
        let mut model: *mut IcmModel = std::ptr::null_mut();
        let code = icm_model_load(fix.ckpt.as_ptr(), fix.backbone.as_ptr(), &mut model);
        assert_eq!(code, ICM_OK, "{}", last_error());
        assert!(!model.is_null());
        let task = CStr::from_ptr(icm_model_task(model)).to_str().unwrap();
        assert_eq!(task, "semseg");

        let (h, w) = (64usize, 64usize);
        let mut image = vec![0.0f64; 3 * h * w];
        assert_eq!(icm_scene_generate(5, h, w, 4, image.as_mut_ptr()), ICM_OK);
        // same seed, same scene
        let mut image2 = vec![0.0f64; 3 * h * w];
        assert_eq!(icm_scene_generate(5, h, w, 4, image2.as_mut_ptr()), ICM_OK);
        assert_eq!(image, image2);

        let mut bytes: *mut u8 = std::ptr::null_mut();
        let mut len = 0usize;
        let code = icm_compress(model, image.as_ptr(), h, w, 1, &mut bytes, &mut len);
        assert_eq!(code, ICM_OK, "{}", last_error());
        assert!(len > icm::codec::HEADER_LEN);

        let mut pred: *mut f64 = std::ptr::null_mut();
        let (mut c, mut ph, mut pw) = (0usize, 0usize, 0usize);
        let code = icm_decompress(model, bytes, len, &mut pred, &mut c, &mut ph, &mut pw);
        assert_eq!(code, ICM_OK, "{}", last_error());
        assert_eq!((c, ph, pw), (icm::synth::MAX_SHAPE_CLASSES + 1, h, w));
        let pred_slice = std::slice::from_raw_parts(pred, c * ph * pw);
        assert!(pred_slice.iter().all(|v| v.is_finite()));

        // cross-check against the in-process reference model
        let scene = icm::synth::generate_scene(5, h, w, 4).unwrap();
        let (pipe, mut store, _) = icm::training::load_trained_pipeline(
            std::path::Path::new(fix.ckpt.to_str().unwrap()),
            Some(std::path::Path::new(fix.backbone.to_str().unwrap())),
        )
        .unwrap();
        let images = icm::pipeline::batch_images(&[&scene]);
        let (reference, _) = pipe.predict(&mut store, &images).unwrap();
        let max_err = reference
            .iter()
            .zip(pred_slice)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1e-5, "FFI round trip deviates by {max_err}");

        icm_doubles_free(pred, c * ph * pw);
        icm_bytes_free(bytes, len);
        icm_model_free(model);
    }
}

#[test]
fn error_codes_and_messages() {
    let fix = fixture();
    unsafe {
        let mut model: *mut IcmModel = std::ptr::null_mut();

        // null arguments are usage errors
        assert_eq!(
            icm_model_load(std::ptr::null(), std::ptr::null(), &mut model),
            ICM_ERR_USAGE
        );

        // missing checkpoint file is a data error
        let missing = CString::new("/nonexistent/model.icmc").unwrap();
        assert_eq!(
            icm_model_load(missing.as_ptr(), fix.backbone.as_ptr(), &mut model),
            ICM_ERR_DATA
        );
        assert!(!last_error().is_empty());

        // frozen-backbone checkpoint without a backbone file is a usage error
        assert_eq!(
            icm_model_load(fix.ckpt.as_ptr(), std::ptr::null(), &mut model),
            ICM_ERR_USAGE
        );

        // wrong backbone weights are a model-compatibility error
        assert_eq!(
            icm_model_load(fix.ckpt.as_ptr(), fix.bad_backbone.as_ptr(), &mut model),
            ICM_ERR_MODEL
        );

        // invalid scene parameters are usage errors
        let mut buf = vec![0.0f64; 3 * 64 * 64];
        assert_eq!(icm_scene_generate(0, 64, 64, 99, buf.as_mut_ptr()), ICM_ERR_USAGE);
        // non-multiple-of-16 dims are a shape (data-class) error
        assert_eq!(icm_scene_generate(0, 63, 64, 4, buf.as_mut_ptr()), ICM_ERR_DATA);

        // corrupt stream is a model/stream error on a valid model
        let code = icm_model_load(fix.ckpt.as_ptr(), fix.backbone.as_ptr(), &mut model);
        assert_eq!(code, ICM_OK, "{}", last_error());
        let junk = [0u8; 8];
        let mut pred: *mut f64 = std::ptr::null_mut();
        let (mut c, mut h, mut w) = (0usize, 0usize, 0usize);
        assert_eq!(
            icm_decompress(model, junk.as_ptr(), junk.len(), &mut pred, &mut c, &mut h, &mut w),
            ICM_ERR_MODEL
        );
        icm_model_free(model);

        // frees of null are no-ops
        icm_model_free(std::ptr::null_mut());
        icm_bytes_free(std::ptr::null_mut(), 0);
        icm_doubles_free(std::ptr::null_mut(), 0);
    }
}

#[test]
fn generated_header_covers_the_surface() {
    let header = std::fs::read_to_string(
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/icm.h"),
    )
    .unwrap();
    for sym in [
        "icm_last_error_message",
        "icm_model_load",
        "icm_model_free",
        "icm_model_task",
        "icm_scene_generate",
        "icm_compress",
        "icm_decompress",
        "icm_bytes_free",
        "icm_doubles_free",
        "typedef struct IcmModel IcmModel;",
        "#define ICM_ERR_USAGE 2",
        "#define ICM_ERR_DATA 3",
        "#define ICM_ERR_MODEL 4",
    ] {
        assert!(header.contains(sym), "header is missing {sym}");
    }
}
