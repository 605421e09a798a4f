//! Regenerate the fitted defaults shipped in the library.
//!
//! Run with `cargo run --release --example fit_defaults`.

fn main() {
    let c = iodine_lock::calibration::calibrated_defaults().expect("bundled line table");
    println!("{}", serde_json::to_string_pretty(&c).expect("serializable"));
}
