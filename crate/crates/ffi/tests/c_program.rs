//! Compiles a small C program against the generated header and the static
//! library, then runs it.

use std::path::PathBuf;
use std::process::Command;

#[test]
fn c_program_links_and_runs() {
    let Some(cc) = ["cc", "gcc", "clang"].into_iter().find(|c| Command::new(c).arg("--version").output().is_ok()) else {
        eprintln!("no C compiler; skipping");
        return;
    };
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // cargo test builds the archive next to the test binary
    let lib = std::env::current_exe().unwrap().with_file_name("libshardgraph_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "shardgraph.h"

int main(void) {
    const char *text =
        "module N=2 topology=ring {\n"
        "entry computation e (f32[4]) -> f32[4] {\n"
        "  %x = f32[4] parameter(0)\n"
        "  %s = f32[4] all-reduce(%x), op=add\n"
        "  return (%s)\n"
        "}\n"
        "}\n";
    SgModule *m = NULL;
    if (sg_module_parse(text, &m) != SG_STATUS_OK) return 1;
    char *out = NULL;
    if (sg_cost(m, NULL, &out) != SG_STATUS_OK) return 2;
    if (strstr(out, "collective_time") == NULL) return 3;
    sg_string_free(out);
    if (sg_module_parse("nonsense", &m) != SG_STATUS_PARSE) return 4;
    if (sg_last_error() == NULL) return 5;
    puts("ok");
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let st = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(st.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
