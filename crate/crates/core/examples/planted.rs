// SPDX-License-Identifier: MIT OR Apache-2.0

//! Writes a synthetic dataset with known informative neurons.
//!
//! ```text
//! cargo run --release --example planted -- <out_dir> [seed] [standard|memorizable]
//! ```

use neuroprobe::synthetic::{planted_splits, write_splits, PlantedConfig};

fn main() -> neuroprobe::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "planted".into());
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let config = match args.next().as_deref() {
        Some("memorizable") => PlantedConfig::memorizable(seed),
        _ => PlantedConfig::standard(seed),
    };
    let splits = planted_splits(&config)?;
    write_splits(&out, &splits)?;
    println!(
        "task {:?}, informative neurons {:?}",
        config.task, config.informative
    );
    Ok(())
}
