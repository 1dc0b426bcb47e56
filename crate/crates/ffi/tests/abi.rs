use std::ffi::{c_void, CStr, CString};
use std::ptr;

use homogenize_ffi::*;

fn last_error() -> String {
    let p = hm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

const FLAT: &str = r#"
name = "flat"
kind = "elliptic"
seed = 3
[model]
dim = 1
system = { dim = 1, kind = "periodic-shift" }
tensor = { type = "isotropic", value = { terms = [{ scale = 2.0 }] } }
"#;

#[test]
fn effective_tensor_through_the_abi() {
    unsafe {
        let mut s = ptr::null_mut();
        let toml = CString::new(FLAT).unwrap();
        assert_eq!(hm_scenario_from_toml(toml.as_ptr(), &mut s), HM_OK);
        let mut buf = [0.0; 1];
        let mut dim = 0usize;
        assert_eq!(
            hm_effective_tensor(s, 1, buf.as_mut_ptr(), 1, &mut dim),
            HM_OK
        );
        assert_eq!(dim, 1);
        assert!((buf[0] - 2.0).abs() < 1e-12);
        hm_scenario_free(s);
    }
}

#[test]
fn small_buffer_reports_required_size() {
    unsafe {
        let mut s = ptr::null_mut();
        let name = CString::new("laminate-2d").unwrap();
        assert_eq!(hm_scenario_builtin(name.as_ptr(), 42, &mut s), HM_OK);
        let mut buf = [0.0; 2];
        let mut dim = 0usize;
        assert_eq!(
            hm_effective_tensor(s, 0, buf.as_mut_ptr(), 2, &mut dim),
            HM_ERR_BUFFER
        );
        assert_eq!(dim, 2);
        let mut buf = [0.0; 4];
        assert_eq!(
            hm_effective_tensor(s, 0, buf.as_mut_ptr(), 4, &mut dim),
            HM_OK
        );
        assert!((buf[0] - 3f64.sqrt()).abs() < 2e-3 && (buf[3] - 2.0).abs() < 1e-9);
        hm_scenario_free(s);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut s = ptr::null_mut();
        let bad = CString::new("name = \"x\"\nkind = \"elliptic\"\n").unwrap();
        assert_eq!(hm_scenario_from_toml(bad.as_ptr(), &mut s), HM_ERR_CONFIG);
        assert!(last_error().contains("seed"), "{}", last_error());
        assert!(s.is_null());

        assert_eq!(hm_scenario_from_toml(ptr::null(), &mut s), HM_ERR_NULL);
        let name = CString::new("no-such-scenario").unwrap();
        assert_eq!(hm_scenario_builtin(name.as_ptr(), 1, &mut s), HM_ERR_CONFIG);
        let bytes = [0xffu8, 0xfe, 0];
        assert_eq!(
            hm_scenario_from_toml(bytes.as_ptr().cast(), &mut s),
            HM_ERR_UTF8
        );
        hm_scenario_free(ptr::null_mut());
        hm_run_free(ptr::null_mut());
        hm_string_free(ptr::null_mut());
    }
}

#[test]
fn run_and_manifest() {
    unsafe {
        let mut s = ptr::null_mut();
        let toml = CString::new(FLAT).unwrap();
        assert_eq!(hm_scenario_from_toml(toml.as_ptr(), &mut s), HM_OK);
        assert_eq!(hm_scenario_set_seed(s, 9), HM_OK);
        assert_eq!(hm_scenario_set_output(s, ptr::null()), HM_OK);
        let mut r = ptr::null_mut();
        assert_eq!(hm_scenario_run(s, 2, &mut r), HM_OK);
        assert!(hm_run_pass(r));
        let mut json = ptr::null_mut();
        assert_eq!(hm_run_manifest_json(r, &mut json), HM_OK);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        hm_string_free(json);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["seed"], 9);
        assert_eq!(v["scenario"], "flat");

        let mut hash = ptr::null_mut();
        assert_eq!(hm_scenario_hash(s, &mut hash), HM_OK);
        assert_eq!(CStr::from_ptr(hash).to_bytes().len(), 64);
        hm_string_free(hash);
        hm_run_free(r);
        hm_scenario_free(s);
    }
}

extern "C" fn sin_squared(y: *const f64, dim: usize, user: *mut c_void) -> f64 {
    let calls = unsafe { &mut *(user as *mut usize) };
    *calls += 1;
    let y = unsafe { std::slice::from_raw_parts(y, dim) };
    (2.0 * std::f64::consts::PI * y[0]).sin().powi(2)
}

#[test]
fn mean_value_callback() {
    let mut calls = 0usize;
    let (mut v, mut e) = (0.0, 0.0);
    let code = unsafe {
        hm_mean_value(
            Some(sin_squared),
            (&mut calls as *mut usize).cast(),
            1,
            &mut v,
            &mut e,
        )
    };
    assert_eq!(code, HM_OK);
    assert!((v - 0.5).abs() < 1e-10, "{v}");
    assert!(calls > 0);
    let code = unsafe { hm_mean_value(None, ptr::null_mut(), 1, &mut v, &mut e) };
    assert_eq!(code, HM_ERR_NULL);
    let code = unsafe {
        hm_mean_value(
            Some(sin_squared),
            (&mut calls as *mut usize).cast(),
            4,
            &mut v,
            &mut e,
        )
    };
    assert_eq!(code, HM_ERR_PARAMETER);
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(hm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
