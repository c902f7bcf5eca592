//! Writes the bundled synthetic trajectory to `data/synthetic_trajectory.json`.
//!
//!     cargo run --example synthetic_trajectory [output-path]

use flash_channel::harness::synthetic_trajectory;

fn main() -> anyhow::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/data/synthetic_trajectory.json").to_string());
    let json = serde_json::to_string_pretty(&synthetic_trajectory())?;
    std::fs::write(&path, json + "\n")?;
    println!("wrote {path}");
    Ok(())
}
