//! Regenerate the bundled demo inputs and re-record the LLM transcript.
//!
//! cargo run --release -p qembed --example regen_demo

use std::fs;
use std::path::Path;

use qembed::pipeline::demo;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/demo");
    for (name, body) in demo::generated_assets() {
        fs::write(dir.join(name), body)?;
    }
    let ws = tempfile::tempdir()?;
    let transcript = dir.join(demo::TRANSCRIPT_FILE);
    // the bundled config and data are read from assets at compile time, so
    // the recording run must see the files just written
    demo::run_demo_from(&dir, ws.path(), Some(&transcript))?;
    println!("wrote {}", dir.display());
    Ok(())
}
