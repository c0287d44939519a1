use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let header = crate_dir.join("include").join("madun.h");
    match cbindgen::generate(&crate_dir) {
        Ok(bindings) => {
            std::fs::create_dir_all(header.parent().unwrap()).unwrap();
            bindings.write_to_file(&header);
        }
        Err(e) => {
            // Keep the previously generated header usable instead of failing
            // the whole build on a doc-comment parse hiccup.
            println!("cargo:warning=cbindgen failed: {e}");
            if !header.exists() {
                panic!("cbindgen failed and no existing header is available: {e}");
            }
        }
    }
}
