//! Visual encoder forward pass with DPAM surgery and intermediate-layer taps.

use ndarray::{Array2, Array3, Axis};

use super::{BackboneHandle, DpamConfig, DpamMode, VisualFeatures};
use crate::error::{Error, Result};
use crate::math;

impl BackboneHandle {
    /// Encode a preprocessed (3, S, S) image.
    ///
    /// The global embedding comes from the class token; when `dual_path` is
    /// set it flows through the original QK attention while patch tokens take
    /// the DPAM route. Patch grids are tapped after each layer in
    /// `tap_layers` (1-indexed), projected by the frozen final visual
    /// projection after the final layer norm, and L2-normalized per token.
    pub fn encode_image(
        &self,
        image: &Array3<f64>,
        dpam: &DpamConfig,
        tap_layers: &[usize],
    ) -> Result<VisualFeatures> {
        let s = self.spec.input_size;
        if image.dim() != (3, s, s) {
            return Err(Error::Input(format!(
                "image has shape {:?}, expected (3, {s}, {s})",
                image.dim()
            )));
        }
        dpam.validate(self.spec.visual_layers)?;
        if tap_layers.is_empty() {
            return Err(Error::Config("tap_layers must not be empty".into()));
        }
        for pair in tap_layers.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Config("tap_layers must be strictly increasing".into()));
            }
        }
        for &t in tap_layers {
            if t < 1 || t > self.spec.visual_layers {
                return Err(Error::Config(format!(
                    "tap layer {t} out of range 1..={}",
                    self.spec.visual_layers
                )));
            }
        }

        let tokens = self.patchify(image);
        let class_row = self
            .visual
            .class_embed
            .view()
            .insert_axis(Axis(0))
            .to_owned();
        let tokens = ndarray::concatenate(Axis(0), &[class_row.view(), tokens.view()])
            .expect("widths match");
        let tokens = tokens + &self.visual.pos_embed;
        let mut x = self.visual.ln_pre.apply(&tokens);

        // Original-attention stream for the class token, split off lazily at
        // the surgery start layer.
        let mut x_orig: Option<Array2<f64>> = None;
        let mut patch_embeds = Vec::with_capacity(tap_layers.len());

        for (idx, layer) in self.visual.layers.iter().enumerate() {
            let layer_no = idx + 1;
            let surgered = dpam.mode != DpamMode::Qk && layer_no >= dpam.start_layer;
            if surgered && dpam.dual_path && x_orig.is_none() {
                x_orig = Some(x.clone());
            }
            if let Some(orig) = x_orig.take() {
                x_orig = Some(layer.forward(&orig, None, DpamMode::Qk));
            }
            let mode = if surgered { dpam.mode } else { DpamMode::Qk };
            x = layer.forward(&x, None, mode);

            if tap_layers.contains(&layer_no) {
                patch_embeds.push(self.project_patches(&x));
            }
        }

        let global_src = x_orig.as_ref().unwrap_or(&x);
        let class_out = global_src.slice(ndarray::s![0..1, ..]).to_owned();
        let class_out = self.visual.ln_post.apply(&class_out);
        let global = class_out.dot(&self.visual.proj);
        let global = math::l2_normalize_rows(&global).row(0).to_owned();

        Ok(VisualFeatures {
            global_embed: global,
            patch_embeds,
            tap_layers: tap_layers.to_vec(),
            grid: self.spec.patch_grid(),
        })
    }

    /// Flatten non-overlapping patches (row-major over the grid,
    /// channel-major within a patch) and apply the patch embedding.
    fn patchify(&self, image: &Array3<f64>) -> Array2<f64> {
        let p = self.spec.patch_size;
        let (gh, gw) = self.spec.patch_grid();
        let patch_dim = 3 * p * p;
        let mut rows = Array2::zeros((gh * gw, patch_dim));
        for gy in 0..gh {
            for gx in 0..gw {
                let row = gy * gw + gx;
                let mut col = 0;
                for c in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            rows[(row, col)] = image[(c, gy * p + py, gx * p + px)];
                            col += 1;
                        }
                    }
                }
            }
        }
        rows.dot(&self.visual.patch_embed)
    }

    fn project_patches(&self, x: &Array2<f64>) -> Array2<f64> {
        let patches = x.slice(ndarray::s![1.., ..]).to_owned();
        let patches = self.visual.ln_post.apply(&patches);
        let projected = patches.dot(&self.visual.proj);
        math::l2_normalize_rows(&projected)
    }
}
