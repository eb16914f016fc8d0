//! Segments a stack and classifies every particle against a saved library.
//!
//! ```text
//! cargo run -p fluoromap --example classify_stack -- stack/manifest.toml library.toml
//! ```

use std::path::PathBuf;

use fluoromap::classify::{classify_all, DEFAULT_TAU};
use fluoromap::fingerprint::library::load_library;
use fluoromap::fingerprint::{extract_all, ExtractOptions};
use fluoromap::ingest::{load_manifest, DEFAULT_MAX_SHIFT_PX};
use fluoromap::pipeline::{prepare_stack, segment_stack};
use fluoromap::segment::SegmentationConfig;

fn main() -> fluoromap::Result<()> {
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let (Some(manifest_path), Some(library_path)) = (args.next(), args.next()) else {
        eprintln!("usage: classify_stack <manifest.toml> <library.toml>");
        std::process::exit(2);
    };

    let manifest = load_manifest(&manifest_path)?;
    let stack = prepare_stack(&manifest, true, DEFAULT_MAX_SHIFT_PX)?;
    let seg = segment_stack(&stack, &manifest, &SegmentationConfig::default())?;
    let fps = extract_all(&stack, &seg.labels.regions, &manifest, ExtractOptions::default())?;
    let (library, _warnings) = load_library(&library_path, Some(&manifest))?;

    for r in classify_all(&fps, &library, DEFAULT_TAU)? {
        println!("{}\t{}", r.region_id, r.assigned_class.as_deref().unwrap_or("-"));
    }
    Ok(())
}
