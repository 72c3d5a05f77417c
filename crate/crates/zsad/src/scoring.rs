//! From embeddings to probabilities, segmentation maps, and the smoothed
//! anomaly map. Pure functions, safe for concurrent use.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tape::{NodeId, Tape};

/// Aligned normal/abnormal probability maps at patch resolution.
#[derive(Debug, Clone)]
pub struct ScorePair {
    pub s_n: Array2<f64>,
    pub s_a: Array2<f64>,
    pub layer_id: LayerId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerId {
    Layer(usize),
    Fused,
}

/// Image-level anomaly score plus full-resolution smoothed anomaly map.
#[derive(Debug, Clone)]
pub struct AnomalyResult {
    pub image_score: f64,
    pub map: Array2<f64>,
    pub sigma: f64,
}

/// How per-layer abnormality maps are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionRule {
    #[default]
    Mean,
    Sum,
    Max,
}

/// Two-class softmax over cosine similarities scaled by the pretrained
/// temperature. The two-class case reduces to a sigmoid of the
/// similarity difference and is computed that way.
pub fn class_probability(
    g_set: &[ArrayView1<f64>],
    f: &Array1<f64>,
    logit_scale: f64,
) -> Result<Vec<f64>> {
    if g_set.is_empty() {
        return Err(Error::Input("empty class embedding set".into()));
    }
    if logit_scale <= 0.0 {
        return Err(Error::Input("logit_scale must be positive".into()));
    }
    for g in g_set {
        if g.len() != f.len() {
            return Err(Error::Input(format!(
                "class embedding dim {} != visual dim {}",
                g.len(),
                f.len()
            )));
        }
    }
    let sims: Vec<f64> = g_set.iter().map(|g| g.dot(f)).collect();
    if sims.len() == 2 {
        let p1 = math::sigmoid((sims[1] - sims[0]) * logit_scale);
        return Ok(vec![1.0 - p1, p1]);
    }
    let logits = Array2::from_shape_vec((1, sims.len()), sims)
        .expect("shape matches")
        .mapv(|s| s * logit_scale);
    Ok(math::softmax_rows(&logits).row(0).to_vec())
}

/// Abnormal-class probability of the global embedding — the image-level
/// anomaly score.
pub fn image_score(
    g_a: &Array1<f64>,
    g_n: &Array1<f64>,
    f: &Array1<f64>,
    logit_scale: f64,
) -> Result<f64> {
    let probs = class_probability(&[g_n.view(), g_a.view()], f, logit_scale)?;
    Ok(probs[1])
}

/// Per-pixel two-class probabilities over a patch-token grid.
///
/// `patches` is (H*W, D) row-major over the grid.
pub fn segmentation_maps(
    g_n: &Array1<f64>,
    g_a: &Array1<f64>,
    patches: &Array2<f64>,
    grid: (usize, usize),
    logit_scale: f64,
    layer_id: LayerId,
) -> Result<ScorePair> {
    let (h, w) = grid;
    if patches.nrows() != h * w {
        return Err(Error::Input(format!(
            "patch grid has {} tokens, expected {}x{}",
            patches.nrows(),
            h,
            w
        )));
    }
    if patches.ncols() != g_n.len() || g_n.len() != g_a.len() {
        return Err(Error::Input(format!(
            "embedding dim mismatch: patches {} vs g_n {} vs g_a {}",
            patches.ncols(),
            g_n.len(),
            g_a.len()
        )));
    }
    let mut s_n = Array2::zeros((h, w));
    let mut s_a = Array2::zeros((h, w));
    for (i, token) in patches.rows().into_iter().enumerate() {
        let diff = (token.dot(g_a) - token.dot(g_n)) * logit_scale;
        let pa = math::sigmoid(diff);
        s_a[(i / w, i % w)] = pa;
        s_n[(i / w, i % w)] = 1.0 - pa;
    }
    Ok(ScorePair { s_n, s_a, layer_id })
}

/// Combine per-layer pairs into one; the default rule is the arithmetic mean
/// of the abnormality maps, with `S_n := 1 - S_a` to keep the two-class
/// constraint.
pub fn fuse_layers(pairs: &[ScorePair], rule: FusionRule) -> Result<ScorePair> {
    if pairs.is_empty() {
        return Err(Error::Input("no score pairs to fuse".into()));
    }
    let dim = pairs[0].s_a.dim();
    for p in pairs {
        if p.s_a.dim() != dim || p.s_n.dim() != dim {
            return Err(Error::Input("score pairs have differing shapes".into()));
        }
    }
    let mut fused: Array2<f64> = Array2::zeros(dim);
    match rule {
        FusionRule::Mean => {
            for p in pairs {
                fused = fused + &p.s_a;
            }
            fused.mapv_inplace(|v| v / pairs.len() as f64);
        }
        FusionRule::Sum => {
            for p in pairs {
                fused = fused + &p.s_a;
            }
            fused.mapv_inplace(|v| v.min(1.0));
        }
        FusionRule::Max => {
            fused.fill(f64::NEG_INFINITY);
            for p in pairs {
                ndarray::Zip::from(&mut fused).and(&p.s_a).for_each(|f, &a| {
                    *f = f.max(a);
                });
            }
        }
    }
    let s_n = fused.mapv(|v| 1.0 - v);
    Ok(ScorePair {
        s_n,
        s_a: fused,
        layer_id: LayerId::Fused,
    })
}

/// `G_sigma(Bilinear(0.5 (1 - S_n + S_a)))`, values in [0, 1].
pub fn compose_anomaly_map(
    pair: &ScorePair,
    out_size: (usize, usize),
    sigma: f64,
) -> Result<Array2<f64>> {
    if out_size.0 == 0 || out_size.1 == 0 {
        return Err(Error::Input("output size must be positive".into()));
    }
    if sigma < 0.0 {
        return Err(Error::Input("sigma must be non-negative".into()));
    }
    let half = ndarray::Zip::from(&pair.s_n)
        .and(&pair.s_a)
        .map_collect(|&n, &a| 0.5 * (1.0 - n + a));
    let up = bilinear_upsample(&half, out_size.0, out_size.1);
    let blurred = gaussian_blur(&up, sigma);
    Ok(blurred.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Bilinear upsampling with half-pixel centers (the common `align_corners =
/// false` convention).
pub fn bilinear_upsample(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        src[(y0, x0)] * (1.0 - dy) * (1.0 - dx)
            + src[(y0, x1)] * (1.0 - dy) * dx
            + src[(y1, x0)] * dy * (1.0 - dx)
            + src[(y1, x1)] * dy * dx
    })
}

/// Separable Gaussian blur, truncated kernel of radius ceil(3 sigma),
/// reflect padding. `sigma == 0` is the identity.
pub fn gaussian_blur(src: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma == 0.0 {
        return src.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 / denom).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= sum;
    }

    let (h, w) = src.dim();
    let reflect = |i: i64, n: i64| -> usize {
        let mut i = i;
        // Mirror without edge repetition collapses for tiny maps; simple
        // symmetric reflection is stable for any size.
        while i < 0 || i >= n {
            if i < 0 {
                i = -i - 1;
            }
            if i >= n {
                i = 2 * n - 1 - i;
            }
        }
        i as usize
    };

    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = reflect(x as i64 + ki as i64 - radius, w as i64);
                acc += src[(y, sx)] * k;
            }
            tmp[(y, x)] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = reflect(y as i64 + ki as i64 - radius, h as i64);
                acc += tmp[(sy, x)] * k;
            }
            out[(y, x)] = acc;
        }
    }
    out
}

// ── Tape builders (training path) ────────────────────────────────────

/// Two-class probabilities of a constant visual embedding against the prompt
/// embedding nodes: returns a 1x2 softmax node.
pub fn class_probs_on_tape(
    tape: &mut Tape,
    g_n: NodeId,
    g_a: NodeId,
    f: &Array1<f64>,
    logit_scale: f64,
) -> NodeId {
    let g = tape.concat_rows(&[g_n, g_a]);
    let f_const = tape.constant(
        Array2::from_shape_vec((1, f.len()), f.to_vec()).expect("vector shape"),
    );
    let logits = tape.matmul_nt(f_const, g);
    let logits = tape.scale(logits, logit_scale);
    tape.softmax_rows(logits)
}

/// Per-patch two-class probabilities: returns (S_n, S_a) as (H*W, 1) nodes.
pub fn segmentation_on_tape(
    tape: &mut Tape,
    g_n: NodeId,
    g_a: NodeId,
    patches: &Array2<f64>,
    logit_scale: f64,
) -> (NodeId, NodeId) {
    let g = tape.concat_rows(&[g_n, g_a]);
    let patches_const = tape.constant(patches.clone());
    let logits = tape.matmul_nt(patches_const, g);
    let logits = tape.scale(logits, logit_scale);
    let probs = tape.softmax_rows(logits);
    let s_n = tape.slice_cols(probs, 0, 1);
    let s_a = tape.slice_cols(probs, 1, 1);
    (s_n, s_a)
}
