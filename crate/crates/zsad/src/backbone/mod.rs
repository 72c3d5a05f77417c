//! Frozen dual-encoder backbone: text encoding with injected tuning tokens,
//! image encoding with intermediate-layer taps and DPAM attention surgery.
//!
//! All parameters are immutable after load. The `stub-2l` spec is a tiny
//! randomly initialized backbone used as a test fixture; `vit-l-14-336`
//! describes a CLIP-scale checkpoint exported into the tensor container
//! format.

mod layers;
mod text;
mod tokenizer;
mod visual;

pub use layers::{causal_mask, dpam_score_matrix, DpamMode, EncoderLayerParams, LayerNormParams, LinearParams};
pub use tokenizer::{Tokenizer, END_TOKEN, PAD_TOKEN, START_TOKEN};

use ndarray::{Array1, Array2};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::container::TensorContainer;
use crate::error::{Error, Result};

/// Static dimension table for a backbone architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub visual_layers: usize,
    pub text_layers: usize,
    pub visual_width: usize,
    pub text_width: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub input_size: usize,
    pub visual_heads: usize,
    pub text_heads: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub mlp_ratio: usize,
}

impl ModelSpec {
    pub fn lookup(name: &str) -> Result<ModelSpec> {
        match name {
            "vit-l-14-336" => Ok(ModelSpec {
                name: name.into(),
                visual_layers: 24,
                text_layers: 12,
                visual_width: 1024,
                text_width: 768,
                embed_dim: 768,
                patch_size: 14,
                input_size: 518,
                visual_heads: 16,
                text_heads: 12,
                context_length: 77,
                vocab_size: 49408,
                mlp_ratio: 4,
            }),
            "stub-2l" => Ok(ModelSpec {
                name: name.into(),
                visual_layers: 2,
                text_layers: 2,
                visual_width: 16,
                text_width: 16,
                embed_dim: 8,
                patch_size: 16,
                input_size: 64,
                visual_heads: 2,
                text_heads: 2,
                context_length: 32,
                vocab_size: 512,
                mlp_ratio: 4,
            }),
            other => Err(Error::Config(format!("unknown model spec '{other}'"))),
        }
    }

    /// Patch grid (H, W) for the configured input size.
    pub fn patch_grid(&self) -> (usize, usize) {
        let side = self.input_size / self.patch_size;
        (side, side)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.patch_grid();
        h * w
    }
}

/// DPAM attention-surgery configuration for the visual encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpamConfig {
    pub mode: DpamMode,
    /// First visual layer (1-indexed) running the surgered attention.
    pub start_layer: usize,
    /// Keep the global class token on the original QK path.
    pub dual_path: bool,
}

impl Default for DpamConfig {
    fn default() -> Self {
        DpamConfig {
            mode: DpamMode::Vv,
            start_layer: 6,
            dual_path: true,
        }
    }
}

impl DpamConfig {
    pub fn validate(&self, num_visual_layers: usize) -> Result<()> {
        if self.start_layer < 1 || self.start_layer > num_visual_layers {
            return Err(Error::Config(format!(
                "dpam start_layer {} out of range 1..={num_visual_layers}",
                self.start_layer
            )));
        }
        Ok(())
    }
}

/// Output of [`BackboneHandle::encode_image`]: the global class-token
/// embedding and one projected, L2-normalized patch-token grid per tap layer.
#[derive(Debug, Clone)]
pub struct VisualFeatures {
    pub global_embed: Array1<f64>,
    /// One (H*W) x D matrix per tap layer, row-major over the patch grid.
    pub patch_embeds: Vec<Array2<f64>>,
    pub tap_layers: Vec<usize>,
    pub grid: (usize, usize),
}

#[derive(Debug)]
pub struct TextEncoderParams {
    pub token_embed: Array2<f64>,
    pub pos_embed: Array2<f64>,
    pub layers: Vec<EncoderLayerParams>,
    pub ln_final: LayerNormParams,
    /// (width, D) projection into the shared similarity space.
    pub proj: Array2<f64>,
}

#[derive(Debug)]
pub struct VisualEncoderParams {
    /// (3 * patch^2, width) patch embedding applied to flattened patches.
    pub patch_embed: Array2<f64>,
    pub class_embed: Array1<f64>,
    pub pos_embed: Array2<f64>,
    pub ln_pre: LayerNormParams,
    pub layers: Vec<EncoderLayerParams>,
    pub ln_post: LayerNormParams,
    pub proj: Array2<f64>,
}

/// Immutable frozen backbone. Safe for concurrent read-only inference.
#[derive(Debug)]
pub struct BackboneHandle {
    pub spec: ModelSpec,
    pub(crate) text: TextEncoderParams,
    pub(crate) visual: VisualEncoderParams,
    /// Pretrained temperature 1/tau.
    pub logit_scale: f64,
    pub tokenizer: Tokenizer,
}

impl BackboneHandle {
    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    pub fn text_width(&self) -> usize {
        self.spec.text_width
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        self.spec.patch_grid()
    }

    pub fn token_embedding(&self, id: u32) -> Array1<f64> {
        self.text.token_embed.row(id as usize).to_owned()
    }

    /// Deterministic tiny backbone for desk-scale tests (2 layers, width 16,
    /// D = 8, 4x4 patch grid).
    pub fn stub(seed: u64) -> BackboneHandle {
        let spec = ModelSpec::lookup("stub-2l").expect("known spec");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_random(spec, &mut rng)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    /// Serialize every parameter into the tensor container format.
    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.set_meta("kind", "backbone");
        c.set_meta("model_spec", self.spec.name.clone());
        c.insert(
            "logit_scale",
            vec![1],
            vec![self.logit_scale],
        );
        c.insert_a2("text.token_embedding", &self.text.token_embed);
        c.insert_a2("text.pos_embedding", &self.text.pos_embed);
        for (i, l) in self.text.layers.iter().enumerate() {
            insert_layer(&mut c, &format!("text.layers.{i}"), l);
        }
        c.insert_a1("text.ln_final.gamma", &self.text.ln_final.gamma);
        c.insert_a1("text.ln_final.beta", &self.text.ln_final.beta);
        c.insert_a2("text.projection", &self.text.proj);

        c.insert_a2("visual.patch_embedding", &self.visual.patch_embed);
        c.insert_a1("visual.class_embedding", &self.visual.class_embed);
        c.insert_a2("visual.pos_embedding", &self.visual.pos_embed);
        c.insert_a1("visual.ln_pre.gamma", &self.visual.ln_pre.gamma);
        c.insert_a1("visual.ln_pre.beta", &self.visual.ln_pre.beta);
        for (i, l) in self.visual.layers.iter().enumerate() {
            insert_layer(&mut c, &format!("visual.layers.{i}"), l);
        }
        c.insert_a1("visual.ln_post.gamma", &self.visual.ln_post.gamma);
        c.insert_a1("visual.ln_post.beta", &self.visual.ln_post.beta);
        c.insert_a2("visual.projection", &self.visual.proj);
        c
    }

    /// SHA-256 over every parameter tensor, in deterministic order. Used to
    /// verify the backbone stays bit-identical through training.
    pub fn weights_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_container().to_bytes());
        format!("{:x}", hasher.finalize())
    }
}

fn insert_layer(c: &mut TensorContainer, prefix: &str, l: &EncoderLayerParams) {
    c.insert_a1(&format!("{prefix}.ln1.gamma"), &l.ln1.gamma);
    c.insert_a1(&format!("{prefix}.ln1.beta"), &l.ln1.beta);
    for (name, lin) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv), ("wo", &l.wo), ("fc1", &l.fc1), ("fc2", &l.fc2)] {
        c.insert_a2(&format!("{prefix}.{name}.w"), &lin.w);
        c.insert_a1(&format!("{prefix}.{name}.b"), &lin.b);
    }
    c.insert_a1(&format!("{prefix}.ln2.gamma"), &l.ln2.gamma);
    c.insert_a1(&format!("{prefix}.ln2.beta"), &l.ln2.beta);
}

fn load_layer(
    c: &TensorContainer,
    prefix: &str,
    width: usize,
    hidden: usize,
    heads: usize,
) -> Result<EncoderLayerParams> {
    let lin = |name: &str, out: usize, inp: usize| -> Result<LinearParams> {
        Ok(LinearParams {
            w: c.a2(&format!("{prefix}.{name}.w"), (out, inp))?,
            b: c.a1(&format!("{prefix}.{name}.b"), out)?,
        })
    };
    Ok(EncoderLayerParams {
        ln1: LayerNormParams {
            gamma: c.a1(&format!("{prefix}.ln1.gamma"), width)?,
            beta: c.a1(&format!("{prefix}.ln1.beta"), width)?,
        },
        wq: lin("wq", width, width)?,
        wk: lin("wk", width, width)?,
        wv: lin("wv", width, width)?,
        wo: lin("wo", width, width)?,
        ln2: LayerNormParams {
            gamma: c.a1(&format!("{prefix}.ln2.gamma"), width)?,
            beta: c.a1(&format!("{prefix}.ln2.beta"), width)?,
        },
        fc1: lin("fc1", hidden, width)?,
        fc2: lin("fc2", width, hidden)?,
        heads,
    })
}

/// Load a frozen backbone from a tensor container checkpoint.
///
/// Every tensor is shape-checked against the model spec; a missing or
/// truncated tensor produces a load error naming it, a shape mismatch a
/// config error.
pub fn load_backbone(model_spec: &str, weights_path: &Path) -> Result<BackboneHandle> {
    let spec = ModelSpec::lookup(model_spec)?;
    let c = TensorContainer::load(weights_path)?;
    if let Ok(stored) = c.meta_str("model_spec") {
        if stored != spec.name {
            return Err(Error::Config(format!(
                "checkpoint was exported for model spec '{stored}', requested '{}'",
                spec.name
            )));
        }
    }
    from_container(spec, &c)
}

fn from_container(spec: ModelSpec, c: &TensorContainer) -> Result<BackboneHandle> {
    let tw = spec.text_width;
    let vw = spec.visual_width;
    let d = spec.embed_dim;
    let text_hidden = tw * spec.mlp_ratio;
    let visual_hidden = vw * spec.mlp_ratio;

    let mut text_layers = Vec::with_capacity(spec.text_layers);
    for i in 0..spec.text_layers {
        text_layers.push(load_layer(c, &format!("text.layers.{i}"), tw, text_hidden, spec.text_heads)?);
    }
    let mut visual_layers = Vec::with_capacity(spec.visual_layers);
    for i in 0..spec.visual_layers {
        visual_layers.push(load_layer(c, &format!("visual.layers.{i}"), vw, visual_hidden, spec.visual_heads)?);
    }

    let patch_dim = 3 * spec.patch_size * spec.patch_size;
    let n_patches = spec.num_patches();

    let logit_scale = c.scalar("logit_scale")?;
    if logit_scale <= 0.0 {
        return Err(Error::Config("logit_scale must be positive".into()));
    }

    let handle = BackboneHandle {
        text: TextEncoderParams {
            token_embed: c.a2("text.token_embedding", (spec.vocab_size, tw))?,
            pos_embed: c.a2("text.pos_embedding", (spec.context_length, tw))?,
            layers: text_layers,
            ln_final: LayerNormParams {
                gamma: c.a1("text.ln_final.gamma", tw)?,
                beta: c.a1("text.ln_final.beta", tw)?,
            },
            proj: c.a2("text.projection", (tw, d))?,
        },
        visual: VisualEncoderParams {
            patch_embed: c.a2("visual.patch_embedding", (patch_dim, vw))?,
            class_embed: c.a1("visual.class_embedding", vw)?,
            pos_embed: c.a2("visual.pos_embedding", (1 + n_patches, vw))?,
            ln_pre: LayerNormParams {
                gamma: c.a1("visual.ln_pre.gamma", vw)?,
                beta: c.a1("visual.ln_pre.beta", vw)?,
            },
            layers: visual_layers,
            ln_post: LayerNormParams {
                gamma: c.a1("visual.ln_post.gamma", vw)?,
                beta: c.a1("visual.ln_post.beta", vw)?,
            },
            proj: c.a2("visual.projection", (vw, d))?,
        },
        tokenizer: Tokenizer::new(spec.vocab_size),
        logit_scale,
        spec,
    };
    Ok(handle)
}

fn sample2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

fn random_layer(
    rng: &mut ChaCha8Rng,
    width: usize,
    hidden: usize,
    heads: usize,
) -> EncoderLayerParams {
    let w_std = 1.0 / (width as f64).sqrt();
    let h_std = 1.0 / (hidden as f64).sqrt();
    let mut lin = |out: usize, inp: usize, std: f64| LinearParams {
        w: {
            let dist = Normal::new(0.0, std).unwrap();
            Array2::from_shape_fn((out, inp), |_| dist.sample(rng))
        },
        b: Array1::zeros(out),
    };
    EncoderLayerParams {
        ln1: LayerNormParams {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
        },
        wq: lin(width, width, w_std),
        wk: lin(width, width, w_std),
        wv: lin(width, width, w_std),
        wo: lin(width, width, w_std),
        ln2: LayerNormParams {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
        },
        fc1: lin(hidden, width, w_std),
        fc2: lin(width, hidden, h_std),
        heads,
    }
}

fn build_random(spec: ModelSpec, rng: &mut ChaCha8Rng) -> BackboneHandle {
    let tw = spec.text_width;
    let vw = spec.visual_width;
    let d = spec.embed_dim;
    let patch_dim = 3 * spec.patch_size * spec.patch_size;
    let n_patches = spec.num_patches();

    let embed = Normal::new(0.0, 0.02).unwrap();

    let text_layers: Vec<_> = (0..spec.text_layers)
        .map(|_| random_layer(rng, tw, tw * spec.mlp_ratio, spec.text_heads))
        .collect();
    let visual_layers: Vec<_> = (0..spec.visual_layers)
        .map(|_| random_layer(rng, vw, vw * spec.mlp_ratio, spec.visual_heads))
        .collect();

    BackboneHandle {
        text: TextEncoderParams {
            token_embed: sample2(rng, spec.vocab_size, tw, 0.02),
            pos_embed: sample2(rng, spec.context_length, tw, 0.02),
            layers: text_layers,
            ln_final: LayerNormParams {
                gamma: Array1::ones(tw),
                beta: Array1::zeros(tw),
            },
            proj: sample2(rng, tw, d, 1.0 / (tw as f64).sqrt()),
        },
        visual: VisualEncoderParams {
            patch_embed: sample2(rng, patch_dim, vw, 1.0 / (patch_dim as f64).sqrt()),
            class_embed: Array1::from_shape_fn(vw, |_| embed.sample(rng)),
            pos_embed: sample2(rng, 1 + n_patches, vw, 0.02),
            ln_pre: LayerNormParams {
                gamma: Array1::ones(vw),
                beta: Array1::zeros(vw),
            },
            layers: visual_layers,
            ln_post: LayerNormParams {
                gamma: Array1::ones(vw),
                beta: Array1::zeros(vw),
            },
            proj: sample2(rng, vw, d, 1.0 / (vw as f64).sqrt()),
        },
        tokenizer: Tokenizer::new(spec.vocab_size),
        logit_scale: 10.0,
        spec,
    }
}
