use std::path::PathBuf;
use std::process::Command;

fn header_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/flatsurr.h")
}

#[test]
fn header_passes_a_strict_c_syntax_check() {
    let compiler = ["cc", "gcc", "clang"]
        .iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok());
    let Some(compiler) = compiler else {
        eprintln!("no C compiler on PATH, skipping syntax check");
        return;
    };
    let out = Command::new(compiler)
        .args(["-x", "c", "-std=c99", "-Wall", "-Wextra", "-Werror", "-fsyntax-only"])
        .arg(header_path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "header rejected by {compiler}:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn header_declares_every_exported_symbol() {
    let header = std::fs::read_to_string(header_path()).unwrap();
    let lib = std::fs::read_to_string(
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs"),
    )
    .unwrap();

    let mut exports = Vec::new();
    for line in lib.lines() {
        let line = line.trim_start();
        let sig = line
            .strip_prefix("pub unsafe extern \"C\" fn ")
            .or_else(|| line.strip_prefix("pub extern \"C\" fn "));
        if let Some(sig) = sig {
            exports.push(sig.split('(').next().unwrap().to_string());
        }
    }
    assert!(exports.len() >= 20, "expected a full export list, found {}", exports.len());
    for name in &exports {
        assert!(
            header.contains(&format!("{name}(")),
            "{name} is exported but missing from include/flatsurr.h"
        );
    }
}
