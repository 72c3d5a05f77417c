//! Prompt training: optimize only the prompt state with the glocal objective
//! over a frozen backbone. Visual features are computed once per sample and
//! cached for all epochs.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::backbone::{BackboneHandle, VisualFeatures};
use crate::data;
use crate::error::{Error, Result};
use crate::losses;
use crate::optim::Adam;
use crate::prompts::{self, PromptParams, PromptState};
use crate::scoring;
use crate::tape::{NodeId, Tape};

use super::config::RunConfig;

/// One cached training sample: frozen visual features plus the patch-level
/// mask.
pub struct TrainSample {
    pub features: VisualFeatures,
    pub label: u8,
    /// (H*W, 1) binary grid at patch resolution.
    pub mask_flat: Array2<f64>,
    pub class_name: String,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub state: PromptState,
}

#[derive(Serialize)]
struct LogLine {
    step: usize,
    epoch: usize,
    l_global: f64,
    l_local: Vec<f64>,
    l_total: f64,
}

/// Loss values extracted from one batch graph.
pub struct BatchLoss {
    pub total_node: NodeId,
    pub global: f64,
    pub locals: Vec<f64>,
    pub total: f64,
    pub params: PromptParams,
}

/// Preprocess, encode, and cache every training sample.
pub fn load_train_samples(
    config: &RunConfig,
    handle: &BackboneHandle,
    root: &Path,
) -> Result<Vec<TrainSample>> {
    let dataset = data::discover_dataset(root, config.data.layout)?;
    let spec = data::PreprocessSpec::for_size(handle.spec.input_size);
    let grid = handle.patch_grid();
    let mut samples = Vec::new();
    for (class_name, class_samples) in &dataset.classes {
        for s in class_samples {
            let image = data::preprocess_image(&s.image_path, &spec)?;
            let features = handle.encode_image(&image, &config.dpam, &config.tap_layers)?;
            let mask_grid = match (&s.mask_path, s.label) {
                (Some(mask_path), _) => {
                    let full = data::load_mask(
                        mask_path,
                        (handle.spec.input_size, handle.spec.input_size),
                    )?;
                    losses::downsample_mask_max(&full, grid)
                }
                (None, 0) => Array2::zeros(grid),
                (None, 1) => {
                    if config.loss.lambda > 0.0 {
                        return Err(Error::Config(format!(
                            "anomalous sample {} has no mask but lambda > 0",
                            s.image_path.display()
                        )));
                    }
                    Array2::zeros(grid)
                }
                _ => unreachable!(),
            };
            let mask_flat =
                Array2::from_shape_vec((grid.0 * grid.1, 1), mask_grid.iter().cloned().collect())
                    .expect("grid flatten");
            samples.push(TrainSample {
                features,
                label: s.label,
                mask_flat,
                class_name: class_name.clone(),
            });
        }
    }
    Ok(samples)
}

/// Build the glocal loss graph for one batch.
///
/// With lambda = 0 the local terms are still evaluated (for logging) but do
/// not contribute to the total.
pub fn batch_loss_graph(
    handle: &BackboneHandle,
    state: &PromptState,
    config: &RunConfig,
    batch: &[&TrainSample],
    tape: &mut Tape,
) -> Result<BatchLoss> {
    let params = prompts::register_prompt_params(tape, state);
    let mut class_embeds: BTreeMap<&str, (NodeId, NodeId)> = BTreeMap::new();
    for s in batch {
        if !class_embeds.contains_key(s.class_name.as_str()) {
            let class_name = match state.mode {
                prompts::PromptMode::Agnostic => config.prompt.class_name.as_str(),
                _ => s.class_name.as_str(),
            };
            let pair = prompts::prompt_embeddings_with_params(
                handle, tape, state, &params, class_name,
            )?;
            class_embeds.insert(s.class_name.as_str(), pair);
        }
    }

    let inv_b = 1.0 / batch.len() as f64;

    // Global cross-entropy.
    let mut ce_sum: Option<NodeId> = None;
    for s in batch {
        let (g_n, g_a) = class_embeds[s.class_name.as_str()];
        let probs =
            scoring::class_probs_on_tape(tape, g_n, g_a, &s.features.global_embed, handle.logit_scale);
        let ce = losses::cross_entropy_on_tape(tape, probs, s.label);
        ce_sum = Some(match ce_sum {
            Some(acc) => tape.add(acc, ce),
            None => ce,
        });
    }
    let global_node = tape.scale(ce_sum.expect("non-empty batch"), inv_b);

    // Per-layer local terms, each averaged over the batch.
    let n_layers = config.tap_layers.len();
    let mut local_nodes = Vec::with_capacity(n_layers);
    for layer_idx in 0..n_layers {
        let mut layer_sum: Option<NodeId> = None;
        for s in batch {
            let (g_n, g_a) = class_embeds[s.class_name.as_str()];
            let (s_n, s_a) = scoring::segmentation_on_tape(
                tape,
                g_n,
                g_a,
                &s.features.patch_embeds[layer_idx],
                handle.logit_scale,
            );
            let local = losses::local_loss_on_tape(tape, s_n, s_a, &s.mask_flat, &config.loss);
            layer_sum = Some(match layer_sum {
                Some(acc) => tape.add(acc, local),
                None => local,
            });
        }
        local_nodes.push(tape.scale(layer_sum.expect("non-empty batch"), inv_b));
    }

    let mut local_total: Option<NodeId> = None;
    for &node in &local_nodes {
        local_total = Some(match local_total {
            Some(acc) => tape.add(acc, node),
            None => node,
        });
    }
    let total_node = if config.loss.lambda > 0.0 {
        let weighted = tape.scale(local_total.expect("at least one tap layer"), config.loss.lambda);
        tape.add(global_node, weighted)
    } else {
        global_node
    };

    let locals: Vec<f64> = local_nodes.iter().map(|&n| tape.scalar_value(n)).collect();
    Ok(BatchLoss {
        total_node,
        global: tape.scalar_value(global_node),
        total: tape.scalar_value(total_node),
        locals,
        params,
    })
}

/// Full-dataset glocal loss under the current state (no gradient step).
pub fn dataset_loss(
    handle: &BackboneHandle,
    state: &PromptState,
    config: &RunConfig,
    samples: &[TrainSample],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(config.optim.batch) {
        let refs: Vec<&TrainSample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let loss = batch_loss_graph(handle, state, config, &refs, &mut tape)?;
        total += loss.total * refs.len() as f64;
        count += refs.len();
    }
    Ok(total / count as f64)
}

/// Train the prompt state against a pre-loaded backbone.
pub fn run_train_with_backbone(
    config: &RunConfig,
    handle: &BackboneHandle,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate(&handle.spec)?;
    let train_root = config
        .data
        .train_root
        .as_ref()
        .ok_or_else(|| Error::Config("data.train_root is required for training".into()))?;
    let samples = load_train_samples(config, handle, train_root)?;

    let mut state = prompts::init_prompt_state(
        handle.text_width(),
        config.prompt.context_len,
        config.prompt.tuning_depth,
        config.prompt.tuning_length,
        config.seed,
        config.prompt.mode,
    )?;
    state.abnormal_word = config.prompt.abnormal_word.clone();

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.ndjson");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let initial_loss = dataset_loss(handle, &state, config, &samples)?;

    let shapes: Vec<(usize, usize)> = std::iter::once(state.normal_ctx.dim())
        .chain(std::iter::once(state.abnormal_ctx.dim()))
        .chain(state.tuning.tokens.iter().map(|t| t.dim()))
        .collect();
    let mut optimizer = Adam::new(config.optim.lr, &shapes);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut step = 0usize;
    let mut checkpoint = PathBuf::new();
    for epoch in 0..config.optim.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        for batch_indices in order.chunks(config.optim.batch) {
            let batch: Vec<&TrainSample> = batch_indices.iter().map(|&i| &samples[i]).collect();
            let mut tape = Tape::new();
            let loss = batch_loss_graph(handle, &state, config, &batch, &mut tape)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }

            let grads = tape.backward(loss.total_node);
            let g_v = grads.get(&tape, loss.params.v);
            let g_w = grads.get(&tape, loss.params.w);
            let g_tuning: Vec<Array2<f64>> = loss
                .params
                .tuning
                .iter()
                .map(|&id| grads.get(&tape, id))
                .collect();

            let mut params: Vec<&mut Array2<f64>> = Vec::new();
            params.push(&mut state.normal_ctx);
            params.push(&mut state.abnormal_ctx);
            for t in state.tuning.tokens.iter_mut() {
                params.push(t);
            }
            let mut all_grads = vec![g_v, g_w];
            all_grads.extend(g_tuning);
            optimizer.step(&mut params, &all_grads);
            state.assert_finite()?;

            let line = LogLine {
                step,
                epoch,
                l_global: loss.global,
                l_local: loss.locals,
                l_total: loss.total,
            };
            writeln!(log, "{}", serde_json::to_string(&line).expect("log line"))
                .map_err(|e| Error::io(&log_path, e))?;
            step += 1;
        }
        checkpoint = out_dir.join(format!("prompt_epoch_{:03}.ztc", epoch + 1));
        prompts::save_prompt_state(&state, &checkpoint)?;
    }

    let final_loss = dataset_loss(handle, &state, config, &samples)?;
    Ok(TrainOutcome {
        checkpoint,
        log_path,
        initial_loss,
        final_loss,
        state,
    })
}

/// Load the backbone, train, and return the final checkpoint path.
pub fn run_train(config: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    let handle = config.load_backbone()?;
    run_train_with_backbone(config, &handle, out_dir)
}
