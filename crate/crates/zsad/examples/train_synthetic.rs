//! Generate a synthetic defect dataset and train prompt parameters on it
//! with the desk-scale stub backbone.
//!
//! Run with: `cargo run --example train_synthetic`

use std::path::Path;

use zsad::data;
use zsad::runner::{self, RunConfig};

fn main() -> zsad::Result<()> {
    let root = Path::new("target/example-train");
    let train_root = root.join("dataset");
    if !train_root.exists() {
        data::generate_synthetic_dataset(&train_root, 0, 16, 64)?;
        println!("generated 16 synthetic images under {}", train_root.display());
    }

    let mut config = RunConfig::stub_defaults();
    config.data.train_root = Some(train_root);

    let outcome = runner::run_train(&config, &root.join("run"))?;
    println!(
        "loss {:.4} -> {:.4} over {} epochs",
        outcome.initial_loss, outcome.final_loss, config.optim.epochs
    );
    println!("checkpoint: {}", outcome.checkpoint.display());
    println!("step log:   {}", outcome.log_path.display());
    Ok(())
}
