//! Evaluation: run inference over the eval split and report per-class
//! metrics plus an unweighted mean row, as JSON and a Markdown table.

use ndarray::Array2;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::backbone::BackboneHandle;
use crate::data;
use crate::error::{Error, Result};
use crate::eval::{self, EvalRecord};
use crate::prompts::PromptState;

use super::config::RunConfig;
use super::infer::{self, ImageResult};

#[derive(Serialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    /// Unweighted mean over classes, NaN-valued metrics excluded per column.
    pub mean: EvalRecord,
    pub warnings: Vec<String>,
}

/// Metric parameters for region-overlap area computation.
pub const AUPRO_FPR_LIMIT: f64 = 0.3;
pub const AUPRO_THRESHOLDS: usize = 200;

fn metric_or_nan(result: Result<f64>, name: &str, class: &str, warnings: &mut Vec<String>) -> f64 {
    match result {
        Ok(v) => v,
        Err(e) => {
            warnings.push(format!("{class}: {name} undefined: {e}"));
            f64::NAN
        }
    }
}

fn class_record(
    class: &str,
    results: &[&ImageResult],
    handle: &BackboneHandle,
    fingerprint: &str,
    warnings: &mut Vec<String>,
) -> Result<EvalRecord> {
    let scores: Vec<f64> = results.iter().map(|r| r.image_score).collect();
    let labels: Vec<u8> = results.iter().map(|r| r.sample.label).collect();

    let size = handle.spec.input_size;
    let mut maps: Vec<Array2<f64>> = Vec::new();
    let mut masks: Vec<Array2<f64>> = Vec::new();
    for r in results {
        let mask = match (&r.sample.mask_path, r.sample.label) {
            (Some(path), _) => data::load_mask(path, (size, size))?,
            (None, 0) => Array2::zeros((size, size)),
            _ => continue, // anomalous without mask: skip for pixel metrics
        };
        maps.push(r.map.clone());
        masks.push(mask);
    }

    Ok(EvalRecord {
        dataset: class.to_string(),
        image_auroc: metric_or_nan(eval::auroc(&scores, &labels), "image_auroc", class, warnings),
        image_ap: metric_or_nan(
            eval::average_precision(&scores, &labels),
            "image_ap",
            class,
            warnings,
        ),
        pixel_auroc: metric_or_nan(
            eval::pixel_auroc(&maps, &masks),
            "pixel_auroc",
            class,
            warnings,
        ),
        aupro: metric_or_nan(
            eval::aupro(&maps, &masks, AUPRO_FPR_LIMIT, AUPRO_THRESHOLDS),
            "aupro",
            class,
            warnings,
        ),
        n_images: results.len(),
        fingerprint: fingerprint.to_string(),
    })
}

fn nan_mean(values: impl Iterator<Item = f64>) -> f64 {
    let finite: Vec<f64> = values.filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

/// Evaluate a trained prompt state over the configured eval split. Never
/// touches the train root. Metric failures (single-class sets and similar)
/// are recorded as NaN with a warning, not fatal errors.
pub fn run_eval(
    config: &RunConfig,
    handle: &BackboneHandle,
    state: &PromptState,
) -> Result<EvalReport> {
    let eval_root = config
        .data
        .eval_root
        .as_ref()
        .ok_or_else(|| Error::Config("data.eval_root is required for evaluation".into()))?;
    let run = infer::run_infer(config, handle, state, eval_root)?;

    let mut by_class: BTreeMap<&str, Vec<&ImageResult>> = BTreeMap::new();
    for r in &run.results {
        by_class
            .entry(r.sample.class_name.as_str())
            .or_default()
            .push(r);
    }

    let fingerprint = config.fingerprint();
    let mut warnings = run.warnings.clone();
    let mut records = Vec::new();
    for (class, results) in &by_class {
        records.push(class_record(
            class,
            results,
            handle,
            &fingerprint,
            &mut warnings,
        )?);
    }

    let mean = EvalRecord {
        dataset: "mean".into(),
        image_auroc: nan_mean(records.iter().map(|r| r.image_auroc)),
        image_ap: nan_mean(records.iter().map(|r| r.image_ap)),
        pixel_auroc: nan_mean(records.iter().map(|r| r.pixel_auroc)),
        aupro: nan_mean(records.iter().map(|r| r.aupro)),
        n_images: records.iter().map(|r| r.n_images).sum(),
        fingerprint,
    };

    Ok(EvalReport {
        records,
        mean,
        warnings,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| dataset | image AUROC | image AP | pixel AUROC | AUPRO | images |\n\
             |---|---|---|---|---|---|\n",
        );
        let fmt = |v: f64| {
            if v.is_finite() {
                format!("{v:.4}")
            } else {
                "n/a".to_string()
            }
        };
        for r in self.records.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                r.dataset,
                fmt(r.image_auroc),
                fmt(r.image_ap),
                fmt(r.pixel_auroc),
                fmt(r.aupro),
                r.n_images
            ));
        }
        out
    }

    /// Write both report forms under `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let json_path = out_dir.join("eval_report.json");
        let md_path = out_dir.join("eval_report.md");
        std::fs::write(&json_path, self.to_json()).map_err(|e| Error::io(&json_path, e))?;
        std::fs::write(&md_path, self.to_markdown()).map_err(|e| Error::io(&md_path, e))?;
        Ok((json_path, md_path))
    }
}
