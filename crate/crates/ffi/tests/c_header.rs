use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include "stcf.h"

int main(void) {
    StcfDataset *d = NULL;
    if (stcf_simulate(5, 16, 3, 0, &d) != STCF_STATUS_OK) return 1;
    size_t n = 0;
    if (stcf_dataset_len(d, &n) != STCF_STATUS_OK || n != 5) return 2;
    uint64_t z[5], y[5];
    if (stcf_dataset_counts(d, z, y, 5) != STCF_STATUS_OK) return 3;
    double lp = 0.0;
    if (stcf_poisson_log_pmf(1, 0.0, &lp) != STCF_STATUS_DOMAIN) return 4;
    char msg[128];
    if (stcf_last_error_message(msg, sizeof msg) == 0) return 5;
    stcf_dataset_free(d);
    printf("ok %zu\n", n);
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let lib = target_dir().join("libstcf_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    let bin = tmp.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new("cc")
        .args(["-std=c11", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl"])
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok 5");
}
