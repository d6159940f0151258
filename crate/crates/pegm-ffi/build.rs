fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").expect("cargo sets CARGO_MANIFEST_DIR");
    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("PEGM_H".into()),
        cpp_compat: true,
        documentation: true,
        usize_is_size_t: true,
        enumeration: cbindgen::EnumConfig {
            prefix_with_name: true,
            rename_variants: cbindgen::RenameRule::ScreamingSnakeCase,
            ..Default::default()
        },
        export: cbindgen::ExportConfig {
            // Functions take the family as a plain int so that arbitrary C
            // values cannot alias an enum on the Rust side; the enum is still
            // exported as the documented set of codes.
            include: vec!["PegmFamily".into()],
            ..Default::default()
        },
        ..Default::default()
    };
    // Header generation failing must not hide compile errors in the crate
    // itself, so it degrades to a warning.
    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
    {
        Ok(bindings) => {
            bindings.write_to_file(format!("{crate_dir}/include/pegm.h"));
        }
        Err(err) => println!("cargo:warning=header generation failed: {err}"),
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
}
