//! Score a dataset with a trained checkpoint and export anomaly maps as
//! grayscale PNGs plus float tensor containers.
//!
//! Run with: `cargo run --example infer_and_export_maps`

use std::path::Path;

use zsad::data;
use zsad::prompts;
use zsad::runner::{self, RunConfig};

fn main() -> zsad::Result<()> {
    let root = Path::new("target/example-infer");
    let dataset = root.join("dataset");
    if !dataset.exists() {
        data::generate_synthetic_dataset(&dataset, 0, 8, 64)?;
    }

    let mut config = RunConfig::stub_defaults();
    config.data.train_root = Some(dataset.clone());
    let handle = config.load_backbone()?;

    // Train a quick checkpoint, then reload it the way a separate inference
    // process would.
    let outcome = runner::run_train_with_backbone(&config, &handle, &root.join("run"))?;
    let state = prompts::load_prompt_state(&outcome.checkpoint, &handle)?;

    let run = runner::run_infer(&config, &handle, &state, &dataset)?;
    for r in &run.results {
        let peak = r.map.iter().cloned().fold(0.0f64, f64::max);
        println!(
            "{}  score {:.4}  map peak {:.4}",
            r.rel_path.display(),
            r.image_score,
            peak
        );
    }

    let out_dir = root.join("maps");
    let written = runner::export_maps(&run, &out_dir)?;
    println!("exported {} files under {}", written.len(), out_dir.display());
    Ok(())
}
