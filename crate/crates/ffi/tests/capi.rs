use std::ffi::{CStr, CString};
use std::ptr;

use safeagg::orgtree::TreeConfig;
use safeagg::sim::{ScenarioConfig, WorkloadMode};
use safeagg_ffi::*;

fn small_toml(rounds: u32) -> CString {
    let mut cfg = ScenarioConfig {
        users: 27,
        rounds,
        seed: 4,
        tree: TreeConfig::new(1, 3, 1),
        ..ScenarioConfig::default()
    };
    cfg.workload.mode = WorkloadMode::Synthetic;
    cfg.workload.synthetic.dim = 4;
    CString::new(cfg.to_toml()).unwrap()
}

fn last_error() -> String {
    let p = safeagg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take(s: *mut std::ffi::c_char) -> String {
    assert!(!s.is_null());
    let out = CStr::from_ptr(s).to_str().unwrap().to_owned();
    safeagg_string_free(s);
    out
}

#[test]
fn step_then_finish() {
    unsafe {
        let toml = small_toml(3);
        let mut sc = ptr::null_mut();
        assert_eq!(safeagg_scenario_new(toml.as_ptr(), &mut sc), SafeaggStatus::Ok);
        assert!(safeagg_last_error().is_null());

        let mut row = ptr::null_mut();
        assert_eq!(safeagg_scenario_step(sc, &mut row), SafeaggStatus::Ok);
        let row: serde_json::Value = serde_json::from_str(&take(row)).unwrap();
        assert_eq!(row["round"], 1);
        assert_eq!(safeagg_scenario_round(sc), 1);

        let mut rep = ptr::null_mut();
        assert_eq!(safeagg_scenario_finish(sc, &mut rep), SafeaggStatus::Ok);
        assert_eq!(safeagg_scenario_step(sc, ptr::null_mut()), SafeaggStatus::Finished);

        let json: serde_json::Value = serde_json::from_str(&take(safeagg_report_json(rep))).unwrap();
        assert_eq!(json["rows"].as_array().unwrap().len(), 3);
        let csv = take(safeagg_report_csv(rep));
        assert!(csv.starts_with("# "));
        assert_eq!(csv.lines().count(), 5);

        let mut rates = SafeaggRates::default();
        assert_eq!(safeagg_report_rates(rep, &mut rates), SafeaggStatus::Ok);
        assert_eq!(rates.fpr, 0.0);

        safeagg_report_free(rep);
        safeagg_scenario_free(sc);
    }
}

#[test]
fn step_past_end_is_finished() {
    unsafe {
        let toml = small_toml(1);
        let mut sc = ptr::null_mut();
        assert_eq!(safeagg_scenario_new(toml.as_ptr(), &mut sc), SafeaggStatus::Ok);
        assert_eq!(safeagg_scenario_step(sc, ptr::null_mut()), SafeaggStatus::Ok);
        assert_eq!(safeagg_scenario_step(sc, ptr::null_mut()), SafeaggStatus::Finished);
        safeagg_scenario_free(sc);
    }
}

#[test]
fn matches_native_run() {
    let toml = small_toml(2);
    let native = safeagg::sim::run_scenario(ScenarioConfig::from_toml(toml.to_str().unwrap()).unwrap()).unwrap();
    unsafe {
        let mut sc = ptr::null_mut();
        assert_eq!(safeagg_scenario_new(toml.as_ptr(), &mut sc), SafeaggStatus::Ok);
        let mut rep = ptr::null_mut();
        assert_eq!(safeagg_scenario_finish(sc, &mut rep), SafeaggStatus::Ok);
        assert_eq!(take(safeagg_report_json(rep)), native.to_json());
        safeagg_report_free(rep);
        safeagg_scenario_free(sc);
    }
}

#[test]
fn bad_inputs() {
    unsafe {
        let mut sc = ptr::null_mut();
        assert_eq!(safeagg_scenario_new(ptr::null(), &mut sc), SafeaggStatus::NullPointer);
        assert!(sc.is_null());

        let junk = CString::new("users = \"many\"").unwrap();
        assert_eq!(safeagg_scenario_new(junk.as_ptr(), &mut sc), SafeaggStatus::InvalidConfig);
        assert!(!last_error().is_empty());

        let bad_tree = CString::new("users = 5\n[tree]\nheight = 3\ndegree = 3\n").unwrap();
        assert_ne!(safeagg_scenario_new(bad_tree.as_ptr(), &mut sc), SafeaggStatus::Ok);

        let invalid = [0x75u8, 0xff, 0];
        assert_eq!(safeagg_scenario_new(invalid.as_ptr().cast(), &mut sc), SafeaggStatus::InvalidUtf8);

        assert_eq!(safeagg_scenario_new(junk.as_ptr(), ptr::null_mut()), SafeaggStatus::NullPointer);
        assert_eq!(safeagg_scenario_step(ptr::null_mut(), ptr::null_mut()), SafeaggStatus::NullPointer);
        assert_eq!(safeagg_scenario_round(ptr::null()), 0);
        assert!(safeagg_report_json(ptr::null()).is_null());
        safeagg_scenario_free(ptr::null_mut());
        safeagg_report_free(ptr::null_mut());
        safeagg_string_free(ptr::null_mut());
    }
}

#[test]
fn detector_helpers() {
    unsafe {
        let mut rh = 0.0;
        assert_eq!(safeagg_compute_rh(9, 32.0, &mut rh), SafeaggStatus::Ok);
        assert_eq!(rh, safeagg::detection::compute_rh(9, 32.0).unwrap());
        assert_eq!(safeagg_compute_rh(0, 32.0, &mut rh), SafeaggStatus::InvalidArgument);
        assert_eq!(safeagg_compute_rh(9, 32.0, ptr::null_mut()), SafeaggStatus::NullPointer);

        let h = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(safeagg_adaptive_threshold(h.as_ptr(), 4, 1.5, 2), 1.5 / 2.0 * 7.0);
        assert!(safeagg_adaptive_threshold(h.as_ptr(), 1, 1.5, 2).is_infinite());
        assert!(safeagg_adaptive_threshold(ptr::null(), 0, 1.5, 2).is_infinite());
    }
}

#[test]
fn version_and_header() {
    let v = unsafe { CStr::from_ptr(safeagg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    let header = include_str!("../include/safeagg.h");
    for sym in ["safeagg_scenario_new", "safeagg_report_free", "safeagg_string_free", "SAFEAGG_STATUS_OK"] {
        assert!(header.contains(sym), "{sym}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = std::process::Command::new("cc").arg("--version").output() else {
        return;
    };
    assert!(cc.status.success());
    let dir = std::env::temp_dir().join(format!("safeagg-hdr-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let src = dir.join("use.c");
    std::fs::write(
        &src,
        "#include \"safeagg.h\"\nint main(void) { SafeaggScenario *s = 0; \
         return safeagg_scenario_new(\"\", &s) == SAFEAGG_STATUS_OK; }\n",
    )
    .unwrap();
    let out = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
        .unwrap();
    std::fs::remove_dir_all(&dir).ok();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
