//! Compiles and runs a C program against the generated header and the
//! static library.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "dlmwpo.h"

int main(void) {
    double adv[3] = {1.0, 0.0, -1.0};
    double wp[3], wn[3];
    if (dlmwpo_wd1_weights(adv, 3, 1.0, wp, wn) != DLMWPO_STATUS_OK) return 1;
    if (!(wp[0] > wp[1] && wp[1] > wp[2])) return 2;
    if (dlmwpo_wd1_weights(adv, 3, 0.0, wp, wn) != DLMWPO_STATUS_INVALID_ARGUMENT) return 3;
    if (strlen(dlmwpo_last_error()) == 0) return 4;
    dlmwpo_model *m = NULL;
    if (dlmwpo_model_init(16, 1, 2, 32, 24, 1, &m) != DLMWPO_STATUS_OK) return 5;
    char buf[64];
    size_t written = 0;
    if (dlmwpo_model_generate(m, "1,2,3=6:", 8, 4, 8, 0.0, 0, buf, sizeof buf, &written) != DLMWPO_STATUS_OK) return 6;
    dlmwpo_model_free(m);
    printf("ok %s\n", dlmwpo_version());
    return 0;
}
"#;

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

/// `target/<profile>`, two levels above the test executable.
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_compiles_as_c_and_cxx() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("probe.c");
    std::fs::write(&src, PROGRAM).unwrap();
    for (cc, extra) in [("cc", vec!["-std=c99"]), ("c++", vec!["-x", "c++"])] {
        let out = Command::new(cc)
            .args(&extra)
            .args(["-Wall", "-Werror", "-fsyntax-only", "-I"])
            .arg(header_dir())
            .arg(&src)
            .output()
            .expect("C compiler available");
        assert!(
            out.status.success(),
            "{cc}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn c_program_links_and_runs() {
    let lib = profile_dir().join("libdlmwpo_ffi.a");
    assert!(
        lib.exists(),
        "static library not found at {}",
        lib.display()
    );
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("probe.c");
    let bin = tmp.path().join("probe");
    std::fs::write(&src, PROGRAM).unwrap();
    let out = Command::new("cc")
        .arg("-I")
        .arg(header_dir())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
