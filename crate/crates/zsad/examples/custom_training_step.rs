//! Build one glocal-loss graph by hand on the autodiff tape, inspect the
//! loss components, and apply a single Adam step — the inner loop of
//! `run_train` without the orchestration.
//!
//! Run with: `cargo run --example custom_training_step`

use std::path::Path;

use zsad::data;
use zsad::optim::Adam;
use zsad::prompts;
use zsad::runner::{train, RunConfig};
use zsad::tape::Tape;

fn main() -> zsad::Result<()> {
    let root = Path::new("target/example-step");
    let dataset = root.join("dataset");
    if !dataset.exists() {
        data::generate_synthetic_dataset(&dataset, 0, 8, 64)?;
    }

    let config = RunConfig::stub_defaults();
    let handle = config.load_backbone()?;
    let samples = train::load_train_samples(&config, &handle, &dataset)?;
    let batch: Vec<&train::TrainSample> = samples.iter().take(4).collect();

    let mut state = prompts::init_prompt_state(
        handle.text_width(),
        config.prompt.context_len,
        config.prompt.tuning_depth,
        config.prompt.tuning_length,
        config.seed,
        config.prompt.mode,
    )?;

    let mut tape = Tape::new();
    let loss = train::batch_loss_graph(&handle, &state, &config, &batch, &mut tape)?;
    println!("L_global = {:.4}", loss.global);
    for (i, l) in loss.locals.iter().enumerate() {
        println!("L_local[layer {}] = {l:.4}", config.tap_layers[i]);
    }
    println!("L_total  = {:.4}", loss.total);

    let grads = tape.backward(loss.total_node);
    let g_v = grads.get(&tape, loss.params.v);
    println!(
        "|dL/dV| = {:.6}",
        g_v.iter().map(|v| v * v).sum::<f64>().sqrt()
    );

    let mut optimizer = Adam::new(0.01, &[state.normal_ctx.dim(), state.abnormal_ctx.dim()]);
    let g_w = grads.get(&tape, loss.params.w);
    optimizer.step(
        &mut [&mut state.normal_ctx, &mut state.abnormal_ctx],
        &[g_v, g_w],
    );

    let mut tape = Tape::new();
    let after = train::batch_loss_graph(&handle, &state, &config, &batch, &mut tape)?;
    println!("after one step: L_total = {:.4}", after.total);
    Ok(())
}
