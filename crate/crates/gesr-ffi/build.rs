fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").expect("CARGO_MANIFEST_DIR");
    let header = std::path::Path::new(&crate_dir).join("include").join("gesr.h");
    std::fs::create_dir_all(header.parent().unwrap()).expect("create include dir");
    match cbindgen::generate(&crate_dir) {
        Ok(bindings) => {
            bindings.write_to_file(&header);
        }
        // A failed generation leaves the previously committed header in
        // place; the build itself should not break on tooling errors.
        Err(err) => println!("cargo:warning=cbindgen failed: {err}"),
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
}
