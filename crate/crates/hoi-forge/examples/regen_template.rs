//! Regenerates the default body template asset from the programmatic builder.
//!
//! Run with `cargo run -p hoi-forge --example regen_template` after editing
//! `build_default_template`; a unit test keeps the asset and builder in sync.

fn main() {
    let template = hoi_forge::body::build_default_template();
    let json = template.to_json().expect("serialise template");
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/body_template.json");
    std::fs::write(path, json + "\n").expect("write asset");
    println!("wrote {}", path);
}
