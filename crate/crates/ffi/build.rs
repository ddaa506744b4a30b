use std::env;

fn main() {
    let crate_dir = env::var("CARGO_MANIFEST_DIR").unwrap();

    // Regenerate the C header next to the crate so bindings consumers
    // can vendor it. Failures (e.g. offline doc builds) are non-fatal:
    // the committed header stays in place.
    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("CRN_FFI_H".to_string()),
        cpp_compat: true,
        documentation: true,
        ..Default::default()
    };
    match cbindgen::Builder::new().with_crate(&crate_dir).with_config(config).generate() {
        Ok(bindings) => {
            bindings.write_to_file(format!("{crate_dir}/include/crn.h"));
        }
        Err(e) => {
            println!("cargo:warning=cbindgen failed: {e}");
        }
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
}
