use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use quakectl_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe {
        qk_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn shipped() -> CString {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper_sec6.cfg");
    CString::new(p.to_str().unwrap()).unwrap()
}

const SHORT: &str = "[scenario]\nnx = 1\nnz = 1\nlx = 300.0\nlz = 300.0\nwell_positions = [[150.0, 150.0]]\nelement_mass = 10.0\n\n\
[gains]\nlambda_delta = 40.0\nlambda_v = 346.4\nlambda_xi = 5e3\nmu_min = 0.25\nl_delta = 0.04\nl_v = 0.0\n\n\
[reference]\nd_max = 0.5\nt_op = 100.0\n\n[sim]\nmode = \"track\"\nt_end = 100.0\n";

#[test]
fn shipped_config_loads() {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(qk_config_load(shipped().as_ptr(), &mut cfg), QkStatus::Ok);
        let (mut n, mut q) = (0, 0);
        assert_eq!(qk_config_dims(cfg, &mut n, &mut q), QkStatus::Ok);
        assert_eq!((n, q), (100, 4));
        qk_config_free(cfg);
    }
}

#[test]
fn invalid_text_reports_config_error() {
    let text = CString::new(SHORT.replace("lambda_delta = 40.0", "lambda_delta = 1.0")).unwrap();
    let mut cfg = ptr::null_mut();
    let status = unsafe { qk_config_parse(text.as_ptr(), ptr::null(), &mut cfg) };
    assert_eq!(status, QkStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("4.16"), "{}", last_error());
    let name = unsafe { CStr::from_ptr(qk_status_name(status)) };
    assert_eq!(name.to_str().unwrap(), "invalid configuration");
}

#[test]
fn null_arguments_are_rejected() {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(qk_config_load(ptr::null(), &mut cfg), QkStatus::NullPointer);
        assert_eq!(qk_config_load(shipped().as_ptr(), ptr::null_mut()), QkStatus::NullPointer);
        assert_eq!(qk_trajectory_len(ptr::null()), 0);
        qk_config_free(ptr::null_mut());
        qk_trajectory_free(ptr::null_mut());
    }
}

#[test]
fn run_and_read_trajectory() {
    let text = CString::new(SHORT).unwrap();
    let mut cfg = ptr::null_mut();
    let mut tr = ptr::null_mut();
    unsafe {
        assert_eq!(qk_config_parse(text.as_ptr(), ptr::null(), &mut cfg), QkStatus::Ok, "{}", last_error());
        assert_eq!(qk_run(cfg, &mut tr), QkStatus::Ok, "{}", last_error());
        let len = qk_trajectory_len(tr);
        assert!(len > 10);
        assert!(qk_trajectory_event_count(tr) > 2);
        let (mut t_final, mut slip, mut peak, mut ok) = (0.0, 0.0, 0.0, false);
        assert_eq!(qk_trajectory_summary(tr, &mut t_final, &mut slip, &mut peak, &mut ok), QkStatus::Ok);
        assert_eq!(t_final, 100.0);
        assert!((slip - 0.5).abs() < 0.01 && ok, "{slip}");
        let (mut t, mut x1) = (0.0, [0.0f64; 1]);
        assert_eq!(qk_trajectory_sample(tr, len - 1, 1, &mut t, x1.as_mut_ptr(), ptr::null_mut(), ptr::null_mut()), QkStatus::Ok);
        assert_eq!((t, x1[0]), (t_final, slip));
        assert_eq!(qk_trajectory_sample(tr, len, 1, &mut t, x1.as_mut_ptr(), ptr::null_mut(), ptr::null_mut()), QkStatus::OutOfRange);
        assert_eq!(qk_trajectory_sample(tr, 0, 2, &mut t, x1.as_mut_ptr(), ptr::null_mut(), ptr::null_mut()), QkStatus::OutOfRange);
        qk_trajectory_free(tr);
        qk_config_free(cfg);
    }
}

#[test]
fn export_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let text = CString::new(SHORT).unwrap();
    let out = CString::new(dir.path().join("run").to_str().unwrap()).unwrap();
    let mut cfg = ptr::null_mut();
    let mut code = -1;
    unsafe {
        assert_eq!(qk_config_parse(text.as_ptr(), ptr::null(), &mut cfg), QkStatus::Ok);
        assert_eq!(qk_run_export(cfg, out.as_ptr(), &mut code), QkStatus::Ok, "{}", last_error());
        qk_config_free(cfg);
    }
    assert_eq!(code, 0);
    for f in ["trajectory.csv", "events.csv", "summary.json", "timing.json"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
}

#[test]
fn gain_and_reference_helpers() {
    let (mut d, mut v, mut ok) = (0.0, 0.0, false);
    unsafe {
        assert_eq!(qk_validate_gains(40.0, 346.4, 0.25, 0.04, 0.0, &mut d, &mut v, &mut ok), QkStatus::Ok);
    }
    assert_eq!((d, v, ok), (4.16, 0.0, true));
    let (mut r, mut rd) = (0.0, 0.0);
    unsafe {
        assert_eq!(qk_reference(0.5, 100.0, 50.0, &mut r, &mut rd), QkStatus::Ok);
        assert_eq!(r, 0.25);
        assert_eq!(qk_reference(0.5, -1.0, 50.0, &mut r, &mut rd), QkStatus::Config);
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"quakectl.h\"\nint main(void) {\n  QkConfig *c = 0;\n  QkStatus s = qk_config_load(\"x\", &c);\n  return s == QK_STATUS_OK ? 0 : (int)qk_last_error(0, 0);\n}\n",
    )
    .unwrap();
    for (compiler, extra) in [("cc", &["-std=c99"][..]), ("c++", &["-x", "c++"][..])] {
        let Ok(out) = Command::new(compiler)
            .args(extra)
            .args(["-Wall", "-Werror", "-fsyntax-only", "-I"])
            .arg(&include)
            .arg(&src)
            .output()
        else {
            eprintln!("{compiler} not available; skipping");
            continue;
        };
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
