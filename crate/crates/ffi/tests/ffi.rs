use std::ffi::{c_char, CStr, CString};
use std::ptr;

use stcf_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        stcf_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn simulate(len: usize) -> *mut StcfDataset {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { stcf_simulate(len, 20, 7, 0, &mut h) }, StcfStatus::Ok);
    assert!(!h.is_null());
    h
}

#[test]
fn dataset_lifecycle() {
    let h = simulate(6);
    let mut n = 0usize;
    assert_eq!(unsafe { stcf_dataset_len(h, &mut n) }, StcfStatus::Ok);
    assert_eq!(n, 6);
    let mut z = vec![0u64; 6];
    let mut y = vec![0u64; 6];
    assert_eq!(unsafe { stcf_dataset_counts(h, z.as_mut_ptr(), y.as_mut_ptr(), 6) }, StcfStatus::Ok);
    assert!(y.iter().sum::<u64>() > 0);
    assert_eq!(unsafe { stcf_dataset_counts(h, z.as_mut_ptr(), ptr::null_mut(), 3) }, StcfStatus::BufferTooSmall);
    assert!(last_error().contains("need 6"));
    unsafe { stcf_dataset_free(h) };
    unsafe { stcf_dataset_free(ptr::null_mut()) };
}

#[test]
fn errors_map_to_codes() {
    let mut v = 0.0;
    assert_eq!(unsafe { stcf_poisson_log_pmf(2, 2.0, &mut v) }, StcfStatus::Ok);
    assert!((v.exp() - 2.0 * (-2.0f64).exp()).abs() < 1e-12);
    assert_eq!(unsafe { stcf_poisson_log_pmf(2, -1.0, &mut v) }, StcfStatus::Domain);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { stcf_dataset_len(ptr::null(), ptr::null_mut()) }, StcfStatus::NullPointer);
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { stcf_simulate(2, 20, 1, 0, &mut h) }, StcfStatus::Config);
    assert!(h.is_null());
    let missing = CString::new("/nonexistent/stcf").unwrap();
    assert_eq!(unsafe { stcf_dataset_load(missing.as_ptr(), &mut h) }, StcfStatus::Io);
}

#[test]
fn truth_and_estimate() {
    let h = simulate(6);
    let (mut g, mut se) = (0.0, 0.0);
    assert_eq!(unsafe { stcf_ground_truth(h, 1, 3.0, 50, 1, &mut g, &mut se) }, StcfStatus::Ok);
    assert!(g > 0.0 && se > 0.0);
    let cfg = CString::new("[intensity]\nbackend = \"kernel\"\n[propensity]\nepochs = 2\n").unwrap();
    let mut est = -1.0;
    assert_eq!(unsafe { stcf_estimate(h, 1, 3.0, cfg.as_ptr(), 0, 3, &mut est) }, StcfStatus::Ok);
    assert!(est >= 0.0 && est.is_finite());
    let bad = CString::new("no_such_key = 1").unwrap();
    assert_eq!(unsafe { stcf_estimate(h, 1, 3.0, bad.as_ptr(), 1, 3, &mut est) }, StcfStatus::Config);
    assert_eq!(unsafe { stcf_estimate(h, 9, 3.0, cfg.as_ptr(), 1, 3, &mut est) }, StcfStatus::Config);
    unsafe { stcf_dataset_free(h) };
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(stcf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
