//! Write every preset scenario to a directory in canonical form.
//!
//! ```bash
//! cargo run -p mocobot --example export_presets -- scenarios
//! ```

use std::path::PathBuf;

use mocobot::scenario::presets;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "scenarios".into()));
    std::fs::create_dir_all(&dir)?;
    for cfg in presets::all() {
        let path = dir.join(format!("{}.toml", cfg.name));
        cfg.save(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
