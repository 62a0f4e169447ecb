use std::path::{Path, PathBuf};
use std::process::Command;

use cedit::models::{Arch, ModelParams};

fn profile_dir() -> PathBuf {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_header() {
    let lib = profile_dir().join("libcedit_ffi.a");
    assert!(lib.exists(), "missing {}", lib.display());
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let out = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "cc: {}", String::from_utf8_lossy(&out.stderr));

    let model = dir.path().join("m.cedm");
    cedit::checkpoint::save(&ModelParams::new(Arch::desk(), 0.015, 8).unwrap(), &model).unwrap();
    let run = Command::new(&exe).arg(&model).output().unwrap();
    assert!(
        run.status.success(),
        "status {:?}: {}",
        run.status.code(),
        String::from_utf8_lossy(&run.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
