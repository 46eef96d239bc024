use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use confab::*;
use serde_json::{json, Value};

fn fixture(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name);
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn run_json(devices: &[&str]) -> String {
    let tree = fixture("rpi3-tree.json");
    let devices: Vec<Value> = devices
        .iter()
        .map(|id| json!({"description": {"device_id": id, "class_id": "rpi3", "capabilities": tree}}))
        .collect();
    let commission = json!({
        "commission_id": "c1", "source": "ops", "importance": 5,
        "window": {"earliest": 0, "latest": 100},
        "targets": ["d1", "d2"],
        "required": [{"kind": "set-value", "path": "capabilities/sensing/temperature/polling_rate", "value": 12}],
        "submitted_at": 0
    });
    json!({
        "fleet": {"ofm": fixture("ofm.json"), "devices": devices},
        "components": [fixture("components/polling-rate.json"), fixture("components/temp-service.json")],
        "commissions": [{"at": 0, "commission": commission}],
        "strategy": {"kind": "push", "origin_fanout": 2},
        "seed": 5
    })
    .to_string()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let mut len = 0;
    unsafe { confab_last_error(buf.as_mut_ptr(), buf.len(), &mut len) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn world(json: &str) -> *mut ConfabWorld {
    let json = CString::new(json).unwrap();
    let mut w = ptr::null_mut();
    let status = unsafe { confab_world_from_json(json.as_ptr(), &mut w) };
    assert_eq!(status, ConfabStatus::Ok, "{}", last_error());
    w
}

fn status_of(w: *mut ConfabWorld, id: &str) -> Result<String, ConfabStatus> {
    let id = CString::new(id).unwrap();
    let mut buf = [0 as c_char; 32];
    let mut len = 0;
    match unsafe { confab_commission_status(w, id.as_ptr(), buf.as_mut_ptr(), buf.len(), &mut len) } {
        ConfabStatus::Ok => Ok(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string()),
        s => Err(s),
    }
}

#[test]
fn runs_a_commission_to_completion() {
    let w = world(&run_json(&["d1", "d2"]));
    let mut n = 0;
    assert_eq!(unsafe { confab_world_tick(w, &mut n) }, ConfabStatus::Ok);
    assert!(n > 0);
    assert_eq!(unsafe { confab_world_run(w, 30) }, ConfabStatus::Ok);
    let mut now = 0;
    assert_eq!(unsafe { confab_world_now(w, &mut now) }, ConfabStatus::Ok);
    assert_eq!(now, 31);
    assert_eq!(status_of(w, "c1").unwrap(), "completed");
    assert_eq!(status_of(w, "ghost"), Err(ConfabStatus::NotFound));
    assert!(last_error().contains("ghost"));
    unsafe { confab_world_free(w) };
}

#[test]
fn event_log_reports_needed_length() {
    let w = world(&run_json(&["d1", "d2"]));
    unsafe { confab_world_run(w, 10) };
    let mut len = 0;
    let mut small = [0 as c_char; 4];
    let status = unsafe { confab_world_event_log(w, small.as_mut_ptr(), small.len(), &mut len) };
    assert_eq!(status, ConfabStatus::BufferTooSmall);
    let mut buf = vec![0 as c_char; len + 1];
    assert_eq!(unsafe { confab_world_event_log(w, buf.as_mut_ptr(), buf.len(), &mut len) }, ConfabStatus::Ok);
    let log = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    assert_eq!(log.len(), len);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["kind"], "submitted");
    unsafe { confab_world_free(w) };
}

#[test]
fn submit_after_start() {
    let w = world(&run_json(&["d1", "d2"]));
    let doc = CString::new(
        json!({
            "commission_id": "late", "source": "ops", "importance": 1,
            "window": {"earliest": 0, "latest": 100}, "targets": ["d2"],
            "required": [{"kind": "provide-service", "service": "temp-sensing", "min_level": 2}],
            "submitted_at": 0
        })
        .to_string(),
    )
    .unwrap();
    unsafe { confab_world_run(w, 3) };
    assert_eq!(unsafe { confab_world_submit(w, doc.as_ptr()) }, ConfabStatus::Ok);
    unsafe { confab_world_run(w, 30) };
    assert_eq!(status_of(w, "late").unwrap(), "completed");
    unsafe { confab_world_free(w) };
}

#[test]
fn bad_arguments_map_to_codes() {
    let mut w = ptr::null_mut();
    assert_eq!(unsafe { confab_world_from_json(ptr::null(), &mut w) }, ConfabStatus::NullArgument);
    let junk = CString::new("{").unwrap();
    assert_eq!(unsafe { confab_world_from_json(junk.as_ptr(), &mut w) }, ConfabStatus::Parse);
    assert!(w.is_null());
    assert_eq!(unsafe { confab_world_run(ptr::null_mut(), 1) }, ConfabStatus::NullArgument);
    assert_eq!(last_error(), "world is null");
    let bytes = [0xffu8 as c_char, 0];
    assert_eq!(unsafe { confab_world_from_json(bytes.as_ptr(), &mut w) }, ConfabStatus::InvalidUtf8);
    unsafe { confab_world_free(ptr::null_mut()) };
}

#[test]
fn constraint_check_over_states() {
    let states = CString::new(
        json!({
            "a": {"device_id": "a", "current_values": {}, "provided_services": {"temp-sensing": 2}, "charge_pct": 80, "online": true, "last_updated": 0},
            "b": {"device_id": "b", "current_values": {}, "charge_pct": 30, "online": true, "last_updated": 0}
        })
        .to_string(),
    )
    .unwrap();
    let check = |text: &str| {
        let c = CString::new(text).unwrap();
        let mut holds = false;
        let s = unsafe { confab_constraint_check(c.as_ptr(), states.as_ptr(), &mut holds) };
        (s, holds)
    };
    assert_eq!(check("count(service temp-sensing level >= 1) >= 1"), (ConfabStatus::Ok, true));
    assert_eq!(check("charge_pct >= 50"), (ConfabStatus::Ok, false));
    assert_eq!(check("charge_pct >="), (ConfabStatus::Parse, false));
    assert_eq!(check("online@ghost").0, ConfabStatus::Invalid);
}

#[test]
fn version_matches_manifest() {
    let v = unsafe { CStr::from_ptr(confab_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/confab.h")).unwrap();
    for f in [
        "confab_world_from_json",
        "confab_world_free",
        "confab_world_tick",
        "confab_world_run",
        "confab_world_now",
        "confab_world_submit",
        "confab_world_event_log",
        "confab_commission_status",
        "confab_constraint_check",
        "confab_last_error",
        "confab_version",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing");
    }
    assert!(header.contains("typedef struct ConfabWorld ConfabWorld;"));
}

/// Directory holding the static library built alongside this test.
fn lib_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run.json");
    std::fs::write(&run, run_json(&["d1", "d2"])).unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "confab.h"

int main(int argc, char **argv) {
    static char doc[1 << 16];
    FILE *f = fopen(argv[1], "r");
    size_t n = fread(doc, 1, sizeof doc - 1, f);
    fclose(f);
    doc[n] = 0;
    ConfabWorld *w = NULL;
    if (confab_world_from_json(doc, &w) != CONFAB_STATUS_OK) return 10;
    if (confab_world_run(w, 30) != CONFAB_STATUS_OK) return 11;
    char status[32];
    size_t len = 0;
    if (confab_commission_status(w, "c1", status, sizeof status, &len) != CONFAB_STATUS_OK) return 12;
    printf("%s %s\n", confab_version(), status);
    confab_world_free(w);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let compiled = std::process::Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("include"))
        .arg(lib_dir().join("libconfab.a"))
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .expect("cc is installed");
    assert!(compiled.status.success(), "{}", String::from_utf8_lossy(&compiled.stderr));
    let out = std::process::Command::new(&exe).arg(&run).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        format!("{} completed", env!("CARGO_PKG_VERSION"))
    );
}
