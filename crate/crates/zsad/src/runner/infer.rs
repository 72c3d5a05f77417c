//! Inference over a dataset: per-image anomaly scores and smoothed anomaly
//! maps, plus map export as 8-bit PNGs and float containers.

use ndarray::Array2;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::backbone::BackboneHandle;
use crate::container::TensorContainer;
use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::prompts::{self, PromptMode, PromptState};
use crate::scoring::{self, LayerId, ScorePair};

use super::config::RunConfig;

/// One scored image.
pub struct ImageResult {
    pub sample: Sample,
    /// Path relative to the dataset root, used to name exported maps.
    pub rel_path: PathBuf,
    pub image_score: f64,
    /// Smoothed anomaly map at model input resolution, values in [0, 1].
    pub map: Array2<f64>,
}

pub struct InferRun {
    pub results: Vec<ImageResult>,
    pub warnings: Vec<String>,
}

/// Resolve the prompt state for inference: load the checkpoint when given,
/// otherwise fall back to a fresh initialization (sensible for `plain_clip`,
/// which has no learnable slots).
pub fn resolve_prompt_state(
    config: &RunConfig,
    handle: &BackboneHandle,
    checkpoint: Option<&Path>,
) -> Result<PromptState> {
    match checkpoint {
        Some(path) => prompts::load_prompt_state(path, handle),
        None => {
            if config.prompt.mode != PromptMode::PlainClip {
                return Err(Error::Config(
                    "inference without a checkpoint requires prompt mode 'plain_clip'".into(),
                ));
            }
            let mut state = prompts::init_prompt_state(
                handle.text_width(),
                config.prompt.context_len,
                0,
                config.prompt.tuning_length,
                config.seed,
                config.prompt.mode,
            )?;
            state.abnormal_word = config.prompt.abnormal_word.clone();
            Ok(state)
        }
    }
}

/// Score one preprocessed image: encode, segment per tap layer, fuse, and
/// compose the smoothed anomaly map.
pub fn score_image(
    handle: &BackboneHandle,
    config: &RunConfig,
    g_n: &ndarray::Array1<f64>,
    g_a: &ndarray::Array1<f64>,
    image: &ndarray::Array3<f64>,
) -> Result<(f64, Array2<f64>)> {
    let features = handle.encode_image(image, &config.dpam, &config.tap_layers)?;
    let image_score = scoring::image_score(g_a, g_n, &features.global_embed, handle.logit_scale)?;
    let grid = handle.patch_grid();
    let pairs: Vec<ScorePair> = features
        .patch_embeds
        .iter()
        .zip(&features.tap_layers)
        .map(|(patches, &layer)| {
            scoring::segmentation_maps(
                g_n,
                g_a,
                patches,
                grid,
                handle.logit_scale,
                LayerId::Layer(layer),
            )
        })
        .collect::<Result<_>>()?;
    let fused = scoring::fuse_layers(&pairs, config.fusion)?;
    let size = handle.spec.input_size;
    let map = scoring::compose_anomaly_map(&fused, (size, size), config.sigma)?;
    Ok((image_score, map))
}

/// Run inference over every sample under `root`.
pub fn run_infer(
    config: &RunConfig,
    handle: &BackboneHandle,
    state: &PromptState,
    root: &Path,
) -> Result<InferRun> {
    let dataset = data::discover_dataset(root, config.data.layout)?;
    let spec = data::PreprocessSpec::for_size(handle.spec.input_size);

    // One (g_n, g_a) pair per class; object-agnostic prompts share one pair.
    let mut embeds: BTreeMap<String, (ndarray::Array1<f64>, ndarray::Array1<f64>)> =
        BTreeMap::new();
    for class_name in dataset.classes.keys() {
        let prompt_class = match state.mode {
            PromptMode::Agnostic => config.prompt.class_name.as_str(),
            _ => class_name.as_str(),
        };
        let pair = prompts::compute_prompt_embeddings(handle, state, prompt_class)?;
        embeds.insert(class_name.clone(), pair);
    }

    let mut results = Vec::new();
    for (class_name, samples) in &dataset.classes {
        let (g_n, g_a) = &embeds[class_name];
        for s in samples {
            let image = data::preprocess_image(&s.image_path, &spec)?;
            let (image_score, map) = score_image(handle, config, g_n, g_a, &image)?;
            let rel_path = s
                .image_path
                .strip_prefix(root)
                .unwrap_or(&s.image_path)
                .to_path_buf();
            results.push(ImageResult {
                sample: s.clone(),
                rel_path,
                image_score,
                map,
            });
        }
    }
    Ok(InferRun {
        results,
        warnings: dataset.warnings,
    })
}

/// Write each anomaly map as an 8-bit grayscale PNG plus a float container,
/// mirroring the dataset-relative path under `out_dir`.
pub fn export_maps(run: &InferRun, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for r in &run.results {
        let stem = r.rel_path.with_extension("");
        let png_path = out_dir.join(stem.with_extension("png"));
        let ztc_path = out_dir.join(stem.with_extension("ztc"));
        if let Some(parent) = png_path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }

        let (h, w) = r.map.dim();
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for ((y, x), &v) in r.map.indexed_iter() {
            img.put_pixel(x as u32, y as u32, image::Luma([(v * 255.0).round() as u8]));
        }
        img.save(&png_path).map_err(|e| Error::Image {
            path: png_path.clone(),
            message: e.to_string(),
        })?;

        let mut c = TensorContainer::new();
        c.set_meta("kind", "anomaly_map");
        c.set_meta("source", r.rel_path.to_string_lossy().to_string());
        c.set_meta("image_score", r.image_score);
        c.insert_a2("map", &r.map);
        c.save(&ztc_path)?;

        written.push(png_path);
        written.push(ztc_path);
    }
    Ok(written)
}
