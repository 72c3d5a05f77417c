//! Train on one synthetic split, evaluate on a held-out split, and print the
//! per-class metric table (image AUROC/AP, pixel AUROC, AUPRO).
//!
//! Run with: `cargo run --example evaluate_metrics`

use std::path::Path;

use zsad::data;
use zsad::runner::{self, RunConfig};

fn main() -> zsad::Result<()> {
    let root = Path::new("target/example-eval");
    let train_root = root.join("train");
    let eval_root = root.join("eval");
    if !train_root.exists() {
        data::generate_synthetic_dataset(&train_root, 0, 16, 64)?;
        data::generate_synthetic_dataset(&eval_root, 1, 16, 64)?;
    }

    let mut config = RunConfig::stub_defaults();
    config.data.train_root = Some(train_root);
    config.data.eval_root = Some(eval_root);

    let handle = config.load_backbone()?;
    let outcome = runner::run_train_with_backbone(&config, &handle, &root.join("run"))?;
    println!(
        "trained: loss {:.4} -> {:.4}",
        outcome.initial_loss, outcome.final_loss
    );

    let report = runner::run_eval(&config, &handle, &outcome.state)?;
    print!("{}", report.to_markdown());
    let (json_path, _) = report.write(&root.join("run"))?;
    println!("full report: {}", json_path.display());
    Ok(())
}
