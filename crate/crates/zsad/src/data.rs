//! Dataset discovery, preprocessing, mask handling, and the synthetic-defect
//! generator used by desk-scale tests.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetLayout {
    /// `<root>/<class>/test/<defect_type>/*.png` with a `ground_truth` mask
    /// mirror (`<stem>_mask.png`).
    #[default]
    MvtecStyle,
    /// Images directly under the root; masks for anomalous images in a
    /// sibling `masks/` directory as `<stem>_mask.png`.
    FlatWithMasks,
}

#[derive(Debug, Clone, Serialize)]
pub struct Sample {
    pub image_path: PathBuf,
    pub class_name: String,
    /// 1 = anomalous.
    pub label: u8,
    pub mask_path: Option<PathBuf>,
    pub defect_type: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Dataset {
    pub classes: BTreeMap<String, Vec<Sample>>,
    /// Orphan masks and similar non-fatal findings.
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn total_samples(&self) -> usize {
        self.classes.values().map(|v| v.len()).sum()
    }

    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes")
    }
}

const IMAGE_EXTS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTS.contains(&e.to_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

/// Discover samples grouped by class, in deterministic lexicographic order.
pub fn discover_dataset(root: &Path, layout: DatasetLayout) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let dataset = match layout {
        DatasetLayout::MvtecStyle => discover_mvtec(root)?,
        DatasetLayout::FlatWithMasks => discover_flat(root)?,
    };
    if dataset.total_samples() == 0 {
        return Err(Error::Data(format!(
            "no samples found under {}",
            root.display()
        )));
    }
    Ok(dataset)
}

fn discover_mvtec(root: &Path) -> Result<Dataset> {
    let mut classes = BTreeMap::new();
    let mut warnings = Vec::new();
    for class_dir in sorted_entries(root)? {
        if !class_dir.is_dir() {
            continue;
        }
        let class_name = class_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let test_dir = class_dir.join("test");
        if !test_dir.is_dir() {
            continue;
        }
        let gt_dir = class_dir.join("ground_truth");
        let mut samples = Vec::new();
        for defect_dir in sorted_entries(&test_dir)? {
            if !defect_dir.is_dir() {
                continue;
            }
            let defect_type = defect_dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            let anomalous = defect_type != "good";
            for image in sorted_entries(&defect_dir)? {
                if !is_image(&image) {
                    continue;
                }
                let mask_path = if anomalous {
                    let stem = image
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or_default();
                    let candidate = gt_dir
                        .join(&defect_type)
                        .join(format!("{stem}_mask.png"));
                    if candidate.is_file() {
                        Some(candidate)
                    } else {
                        warnings.push(format!("missing mask for {}", image.display()));
                        None
                    }
                } else {
                    None
                };
                samples.push(Sample {
                    image_path: image,
                    class_name: class_name.clone(),
                    label: anomalous as u8,
                    mask_path,
                    defect_type: defect_type.clone(),
                });
            }
        }
        // Orphan masks: ground-truth files without a matching test image.
        if gt_dir.is_dir() {
            for defect_dir in sorted_entries(&gt_dir)? {
                if !defect_dir.is_dir() {
                    continue;
                }
                for mask in sorted_entries(&defect_dir)? {
                    if !is_image(&mask) {
                        continue;
                    }
                    let stem = mask
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or_default();
                    let matched = stem
                        .strip_suffix("_mask")
                        .map(|image_stem| {
                            samples.iter().any(|s| {
                                s.image_path
                                    .file_stem()
                                    .and_then(|st| st.to_str())
                                    .map(|st| st == image_stem)
                                    .unwrap_or(false)
                            })
                        })
                        .unwrap_or(false);
                    if !matched {
                        warnings.push(format!("orphan mask {}", mask.display()));
                    }
                }
            }
        }
        if !samples.is_empty() {
            classes.insert(class_name, samples);
        }
    }
    Ok(Dataset { classes, warnings })
}

fn discover_flat(root: &Path) -> Result<Dataset> {
    let class_name = root
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string();
    let masks_dir = root.join("masks");
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for image in sorted_entries(root)? {
        if !is_image(&image) {
            continue;
        }
        let stem = image
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let mask = masks_dir.join(format!("{stem}_mask.png"));
        let (label, mask_path) = if mask.is_file() {
            (1, Some(mask))
        } else {
            (0, None)
        };
        samples.push(Sample {
            image_path: image,
            class_name: class_name.clone(),
            label,
            mask_path,
            defect_type: if label == 1 { "defect" } else { "good" }.to_string(),
        });
    }
    if masks_dir.is_dir() {
        for mask in sorted_entries(&masks_dir)? {
            if !is_image(&mask) {
                continue;
            }
            let stem = mask
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default();
            let matched = stem
                .strip_suffix("_mask")
                .map(|s| root.join(format!("{s}.png")).is_file())
                .unwrap_or(false);
            if !matched {
                warnings.push(format!("orphan mask {}", mask.display()));
            }
        }
    }
    let mut classes = BTreeMap::new();
    if !samples.is_empty() {
        classes.insert(class_name, samples);
    }
    Ok(Dataset { classes, warnings })
}

// ── Preprocessing ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bicubic,
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub target_size: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub interpolation: Interpolation,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        // OpenCLIP normalization statistics.
        PreprocessSpec {
            target_size: 518,
            mean: [0.48145466, 0.4578275, 0.40821073],
            std: [0.26862954, 0.26130258, 0.27577711],
            interpolation: Interpolation::Bicubic,
        }
    }
}

impl PreprocessSpec {
    pub fn for_size(target_size: usize) -> Self {
        PreprocessSpec {
            target_size,
            ..Default::default()
        }
    }
}

/// Decode, resize to the target square, and channel-normalize. Deterministic.
pub fn preprocess_image(path: &Path, spec: &PreprocessSpec) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let filter = match spec.interpolation {
        Interpolation::Bicubic => image::imageops::FilterType::CatmullRom,
        Interpolation::Bilinear => image::imageops::FilterType::Triangle,
        Interpolation::Nearest => image::imageops::FilterType::Nearest,
    };
    let s = spec.target_size as u32;
    let resized = if rgb.dimensions() == (s, s) {
        rgb
    } else {
        image::imageops::resize(&rgb, s, s, filter)
    };
    let s = spec.target_size;
    let mut out = Array3::zeros((3, s, s));
    for y in 0..s {
        for x in 0..s {
            let px = resized.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[(c, y, x)] = (px[c] as f64 / 255.0 - spec.mean[c]) / spec.std[c];
            }
        }
    }
    Ok(out)
}

/// Load a grayscale mask, binarize at >127, and resize with nearest-neighbor
/// (top-left rule) to `out_size`.
pub fn load_mask(path: &Path, out_size: (usize, usize)) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Image {
            path: path.into(),
            message: "size-zero mask".into(),
        });
    }
    let (oh, ow) = out_size;
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let sy = (y * h as usize) / oh;
            let sx = (x * w as usize) / ow;
            let v = gray.get_pixel(sx as u32, sy as u32)[0];
            out[(y, x)] = if v > 127 { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}

// ── Synthetic dataset generator ──────────────────────────────────────

/// Write an mvtec_style tree of textured normal images and anomalous images
/// carrying a contrasting rectangle with an exact mask. Deterministic per
/// seed; half the images are anomalous.
pub fn generate_synthetic_dataset(
    root: &Path,
    seed: u64,
    n_images: usize,
    image_size: usize,
) -> Result<()> {
    if image_size < 32 {
        return Err(Error::Config("synthetic image size must be >= 32".into()));
    }
    let class_dir = root.join("synthetic");
    let good_dir = class_dir.join("test").join("good");
    let defect_dir = class_dir.join("test").join("defect");
    let gt_dir = class_dir.join("ground_truth").join("defect");
    for d in [&good_dir, &defect_dir, &gt_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d.clone(), e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_anomalous = n_images / 2;
    for i in 0..n_images {
        let anomalous = i < n_anomalous;
        let (pixels, mask) = synth_image(&mut rng, image_size, anomalous);
        let name = format!("{i:03}.png");
        let img_path = if anomalous {
            defect_dir.join(&name)
        } else {
            good_dir.join(&name)
        };
        save_rgb(&img_path, &pixels, image_size)?;
        if anomalous {
            let mask_path = gt_dir.join(format!("{i:03}_mask.png"));
            save_gray(&mask_path, &mask, image_size)?;
        }
    }
    Ok(())
}

fn synth_image(rng: &mut ChaCha8Rng, size: usize, anomalous: bool) -> (Vec<[u8; 3]>, Vec<u8>) {
    let s = size as f64;
    let fx: f64 = rng.gen_range(1.0..3.0);
    let fy: f64 = rng.gen_range(1.0..3.0);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let base: [f64; 3] = [
        rng.gen_range(0.52..0.58),
        rng.gen_range(0.52..0.58),
        rng.gen_range(0.52..0.58),
    ];

    let mut pixels = vec![[0u8; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let t = (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / s + phase).sin();
            let noise: f64 = rng.gen_range(-0.01..0.01);
            for c in 0..3 {
                let v = (base[c] + 0.06 * t + noise).clamp(0.0, 1.0);
                pixels[y * size + x][c] = (v * 255.0) as u8;
            }
        }
    }

    let mut mask = vec![0u8; size * size];
    if anomalous {
        let dw = rng.gen_range(size / 3..size / 2);
        let dh = rng.gen_range(size / 3..size / 2);
        let x0 = rng.gen_range(0..size - dw);
        let y0 = rng.gen_range(0..size - dh);
        for y in y0..y0 + dh {
            for x in x0..x0 + dw {
                let p = &mut pixels[y * size + x];
                for v in p.iter_mut() {
                    *v = (*v as f64 * 0.05) as u8;
                }
                mask[y * size + x] = 255;
            }
        }
    }
    (pixels, mask)
}

fn save_rgb(path: &Path, pixels: &[[u8; 3]], size: usize) -> Result<()> {
    let mut img = image::RgbImage::new(size as u32, size as u32);
    for (i, px) in pixels.iter().enumerate() {
        img.put_pixel((i % size) as u32, (i / size) as u32, image::Rgb(*px));
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })
}

fn save_gray(path: &Path, pixels: &[u8], size: usize) -> Result<()> {
    let img = image::GrayImage::from_raw(size as u32, size as u32, pixels.to_vec())
        .expect("buffer sized");
    img.save(path).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })
}
