//! Compiles and runs a small C program against the generated header and the
//! cdylib, exercising the ABI the way a foreign binding would.

use std::path::PathBuf;
use std::process::Command;

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <stdlib.h>
#include "meter.h"

int main(int argc, char **argv) {
    if (argc < 2) return 10;
    MeterConfigHandle *cfg = meter_config_new();
    if (!cfg) return 11;
    if (meter_config_set(cfg, "train.epochs", "30") != METER_OK) return 12;
    if (meter_config_set(cfg, "engine.use_ous", "false") != METER_OK) return 13;

    /* a tiny 3-feature training buffer: 120 rows around two points */
    double rows[120 * 3];
    for (int i = 0; i < 120; i++) {
        double base = (i % 2 == 0) ? 0.5 : -0.5;
        rows[i * 3 + 0] = base + 0.01 * (i % 7);
        rows[i * 3 + 1] = -base;
        rows[i * 3 + 2] = 0.25 * base;
    }
    MeterModelHandle *model = meter_train_buffer(cfg, rows, 120, 3);
    if (!model) {
        fprintf(stderr, "train: %s\n", meter_last_error_message());
        return 14;
    }
    if (meter_model_feature_dim(model) != 3) return 15;

    MeterSessionHandle *session = meter_session_new(model, cfg, 0);
    if (!session) return 16;
    MeterDecision d;
    double x[3] = {0.5, -0.5, 0.125};
    if (meter_session_step(session, x, 3, &d) != METER_OK) return 17;
    if (d.score < 0.0) return 18;
    if (meter_session_step(session, x, 2, &d) != METER_ERR_SHAPE) return 19;

    meter_session_free(session);
    meter_model_free(model);
    meter_config_free(cfg);
    printf("ok\n");
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let include_dir = manifest.join("include");
    let target_dir = manifest
        .parent()
        .and_then(|p| p.parent())
        .map(|p| p.join("target").join("debug"))
        .expect("workspace target dir");
    let lib = target_dir.join("libmeter_ffi.so");
    if !lib.exists() {
        // the cdylib is built by `cargo test -p meter-ffi` / `--workspace`
        eprintln!("skipping: {} not built", lib.display());
        return;
    }

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let exe = dir.path().join("smoke");

    let compile = Command::new("gcc")
        .arg("-std=c99")
        .arg("-o")
        .arg(&exe)
        .arg(&src)
        .arg(format!("-I{}", include_dir.display()))
        .arg(format!("-L{}", target_dir.display()))
        .arg("-lmeter_ffi")
        .output()
        .expect("gcc available");
    assert!(
        compile.status.success(),
        "gcc failed: {}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let run = Command::new(&exe)
        .arg("go")
        .env("LD_LIBRARY_PATH", &target_dir)
        .output()
        .expect("run smoke binary");
    assert!(
        run.status.success(),
        "smoke exited {:?}: {}",
        run.status.code(),
        String::from_utf8_lossy(&run.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
