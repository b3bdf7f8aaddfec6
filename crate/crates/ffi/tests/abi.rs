use std::ffi::{CStr, CString};
use std::ptr;

use petdiff::diffusion::DiffusionConfig;
use petdiff::networks::{init_params, Checkpoint, NetworkConfig};
use petdiff_ffi::*;

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = pd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_volume(dims: [usize; 3], f: impl Fn(usize) -> f32) -> *mut PdVolume {
    let n = dims.iter().product();
    let data: Vec<f32> = (0..n).map(f).collect();
    let mut v = ptr::null_mut();
    let st = unsafe { pd_volume_new(dims.as_ptr(), [2.0, 2.0, 2.0].as_ptr(), data.as_ptr(), n, &mut v) };
    assert_eq!(st, PdStatus::PdOk);
    v
}

#[test]
fn volume_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(&dir.path().join("v.pvol"));
    let v = new_volume([4, 3, 2], |i| i as f32 * 0.5);
    unsafe {
        assert_eq!(pd_volume_write(v, path.as_ptr()), PdStatus::PdOk);
        let mut back = ptr::null_mut();
        assert_eq!(pd_volume_read(path.as_ptr(), &mut back), PdStatus::PdOk);
        let mut dims = [0usize; 3];
        assert_eq!(pd_volume_dims(back, dims.as_mut_ptr()), PdStatus::PdOk);
        assert_eq!(dims, [4, 3, 2]);
        let mut buf = vec![0f32; 24];
        assert_eq!(pd_volume_copy_data(back, buf.as_mut_ptr(), 24), PdStatus::PdOk);
        assert_eq!(buf[5], 2.5);
        assert_eq!(pd_volume_copy_data(back, buf.as_mut_ptr(), 3), PdStatus::PdErrData);
        let mut err = 0.0;
        assert_eq!(pd_nrmse(v, back, &mut err), PdStatus::PdOk);
        assert_eq!(err, 0.0);
        pd_volume_free(back);
        pd_volume_free(v);
    }
}

#[test]
fn errors_are_reported_with_codes() {
    unsafe {
        let mut v = ptr::null_mut();
        assert_eq!(pd_volume_read(ptr::null(), &mut v), PdStatus::PdErrArgument);
        assert!(last_error().contains("null"));
        let missing = CString::new("/nonexistent/dir/x.pvol").unwrap();
        assert_eq!(pd_volume_read(missing.as_ptr(), &mut v), PdStatus::PdErrIo);
        assert!(last_error().contains("x.pvol"));
        assert!(v.is_null());

        let data = [1.0f32; 8];
        let st = pd_volume_new([0usize, 2, 2].as_ptr(), [1.0, 1.0, 1.0].as_ptr(), data.as_ptr(), 0, &mut v);
        assert_eq!(st, PdStatus::PdErrData);
        let st = pd_volume_new([2usize, 2, 2].as_ptr(), [1.0, 1.0, 1.0].as_ptr(), data.as_ptr(), 7, &mut v);
        assert_eq!(st, PdStatus::PdErrData);

        let ok = new_volume([2, 2, 2], |_| 1.0);
        assert!(pd_last_error().is_null());
        pd_volume_free(ok);
        pd_volume_free(ptr::null_mut());
    }
    assert!(!unsafe { CStr::from_ptr(pd_version()) }.to_bytes().is_empty());
}

#[test]
fn model_inference_and_quantification() {
    let dir = tempfile::tempdir().unwrap();
    let net = NetworkConfig {
        base_channels: 4,
        levels: 3,
        time_embed_dim: 8,
        ssm_state_dim: 2,
        revision_channels: 3,
        classes: 3,
        ..Default::default()
    };
    let ck = Checkpoint::new(net.clone(), DiffusionConfig { steps: 3, ..Default::default() }, init_params(&net, 1).unwrap());
    let ck_path = dir.path().join("m.pckpt");
    ck.save(&ck_path).unwrap();

    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(pd_model_load(cstr(&ck_path).as_ptr(), &mut model), PdStatus::PdOk);
        let lc = new_volume([8, 8, 8], |i| 1.0 + (i % 5) as f32);
        let (patch, stride) = ([8usize; 3], [8usize; 3]);

        let mut den = ptr::null_mut();
        assert_eq!(pd_denoise(model, lc, patch.as_ptr(), stride.as_ptr(), false, 4, &mut den), PdStatus::PdOk);
        let mut den2 = ptr::null_mut();
        assert_eq!(pd_denoise(model, lc, patch.as_ptr(), stride.as_ptr(), false, 4, &mut den2), PdStatus::PdOk);
        let mut diff = 1.0;
        assert_eq!(pd_nrmse(den, den2, &mut diff), PdStatus::PdOk);
        assert_eq!(diff, 0.0);

        let bad = [6usize; 3];
        let mut none = ptr::null_mut();
        assert_eq!(pd_denoise(model, lc, bad.as_ptr(), bad.as_ptr(), true, 4, &mut none), PdStatus::PdErrConfig);

        let (mut rev, mut lab) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(pd_segment(model, lc, patch.as_ptr(), stride.as_ptr(), true, 4, &mut rev, &mut lab), PdStatus::PdOk);
        let mut labels = vec![0u8; 512];
        assert_eq!(pd_labels_copy_data(lab, labels.as_mut_ptr(), 512), PdStatus::PdOk);
        assert!(labels.iter().all(|&l| l <= 3));

        let (mut mtv, mut tlg) = (-1.0, -1.0);
        assert_eq!(pd_quantify(rev, lab, &mut mtv, &mut tlg), PdStatus::PdOk);
        assert!(mtv >= 0.0 && tlg.is_finite());
        let mut json = ptr::null_mut();
        assert_eq!(pd_quantify_json(rev, lab, &mut json), PdStatus::PdOk);
        let text = CStr::from_ptr(json).to_str().unwrap().to_string();
        assert!(text.contains("\"tlg\""), "{text}");
        pd_string_free(json);

        let lpath = cstr(&dir.path().join("l.pvol"));
        assert_eq!(pd_labels_write(lab, lpath.as_ptr()), PdStatus::PdOk);
        let mut lab2 = ptr::null_mut();
        assert_eq!(pd_labels_read(lpath.as_ptr(), &mut lab2), PdStatus::PdOk);

        for v in [lc, den, den2, rev] {
            pd_volume_free(v);
        }
        pd_labels_free(lab);
        pd_labels_free(lab2);
        pd_model_free(model);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/petdiff.h")).unwrap();
    for name in [
        "typedef struct PdVolume PdVolume",
        "typedef struct PdModel PdModel",
        "PD_OK = 0",
        "PD_ERR_INTERNAL = 6",
        "pd_last_error",
        "pd_volume_read",
        "pd_denoise",
        "pd_segment",
        "pd_quantify",
        "pd_model_free",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
