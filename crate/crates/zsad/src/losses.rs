//! The glocal objective: global cross-entropy plus per-layer focal and dice
//! segmentation losses.
//!
//! Plain entry points evaluate the same tape graphs used during training, so
//! there is exactly one definition of each loss.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScorePair;
use crate::tape::{NodeId, Tape};

/// Probabilities are clamped at this floor inside logs.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlocalConfig {
    /// Weight on the local (pixel-level) terms.
    pub lambda: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_smooth: f64,
}

impl Default for GlocalConfig {
    fn default() -> Self {
        GlocalConfig {
            lambda: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_smooth: 1.0,
        }
    }
}

impl GlocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.focal_alpha) || self.focal_alpha == 0.0 {
            return Err(Error::Config("focal_alpha must be in (0, 1)".into()));
        }
        if self.dice_smooth <= 0.0 {
            return Err(Error::Config("dice_smooth must be > 0".into()));
        }
        Ok(())
    }
}

fn flatten_column(a: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_vec((a.len(), 1), a.iter().cloned().collect()).expect("flatten")
}

fn check_binary(target: &Array2<f64>) -> Result<()> {
    if target.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Input("target mask must be binary".into()));
    }
    Ok(())
}

/// Focal loss on a two-class probability pair against a binary mask:
/// mean over pixels of `-alpha_t (1 - p_t)^gamma log p_t`.
pub fn focal_loss(
    pred: &ScorePair,
    target: &Array2<f64>,
    gamma: f64,
    alpha: f64,
) -> Result<f64> {
    if pred.s_a.dim() != target.dim() {
        return Err(Error::Input(format!(
            "focal: prediction {:?} vs target {:?}",
            pred.s_a.dim(),
            target.dim()
        )));
    }
    check_binary(target)?;
    let mut tape = Tape::new();
    let s_n = tape.constant(flatten_column(&pred.s_n));
    let s_a = tape.constant(flatten_column(&pred.s_a));
    let node = focal_on_tape(&mut tape, s_n, s_a, &flatten_column(target), gamma, alpha);
    Ok(tape.scalar_value(node))
}

/// Dice loss `1 - (2 sum(p t) + smooth) / (sum p + sum t + smooth)`.
pub fn dice_loss(pred: &Array2<f64>, target: &Array2<f64>, smooth: f64) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Input(format!(
            "dice: prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let mut tape = Tape::new();
    let p = tape.constant(flatten_column(pred));
    let node = dice_on_tape(&mut tape, p, &flatten_column(target), smooth);
    Ok(tape.scalar_value(node))
}

/// Mean negative log-likelihood of the true class over a batch of
/// probability rows.
pub fn global_loss(image_probs: &Array2<f64>, labels: &[u8]) -> Result<f64> {
    if image_probs.nrows() != labels.len() {
        return Err(Error::Input(format!(
            "global loss: {} probability rows vs {} labels",
            image_probs.nrows(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, &label) in image_probs.rows().into_iter().zip(labels) {
        let p = row[label as usize];
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Glocal combination: `L_global + lambda * sum over layers of L_local`.
pub fn glocal_total(global: f64, local_per_layer: &[f64], lambda: f64) -> f64 {
    global + lambda * local_per_layer.iter().sum::<f64>()
}

// ── Tape builders ────────────────────────────────────────────────────

/// Focal term on the tape. `s_n`/`s_a` are (N, 1) probability nodes, `target`
/// an (N, 1) binary grid.
pub fn focal_on_tape(
    tape: &mut Tape,
    s_n: NodeId,
    s_a: NodeId,
    target: &Array2<f64>,
    gamma: f64,
    alpha: f64,
) -> NodeId {
    let ones_minus_t = target.mapv(|t| 1.0 - t);
    let alpha_t = target.mapv(|t| alpha * t + (1.0 - alpha) * (1.0 - t));

    let pos = tape.mul_const(s_a, target.clone());
    let neg = tape.mul_const(s_n, ones_minus_t);
    let p_t = tape.add(pos, neg);

    let one_minus_pt = tape.affine(p_t, -1.0, 1.0);
    let focus = tape.pow_const(one_minus_pt, gamma);
    let log_pt = tape.log_clamped(p_t, PROB_FLOOR);
    let term = tape.mul(focus, log_pt);
    let term = tape.mul_const(term, alpha_t);
    let term = tape.scale(term, -1.0);
    tape.mean(term)
}

/// Dice term on the tape against a constant binary target.
pub fn dice_on_tape(tape: &mut Tape, pred: NodeId, target: &Array2<f64>, smooth: f64) -> NodeId {
    let t_sum: f64 = target.sum();
    let inter = tape.mul_const(pred, target.clone());
    let inter_sum = tape.sum(inter);
    let numer = tape.affine(inter_sum, 2.0, smooth);
    let pred_sum = tape.sum(pred);
    let denom = tape.affine(pred_sum, 1.0, t_sum + smooth);
    let ratio = tape.div(numer, denom);
    tape.affine(ratio, -1.0, 1.0)
}

/// Per-layer local term: `Focal([S_n, S_a], S) + Dice(S_n, I - S) + Dice(S_a, S)`.
pub fn local_loss_on_tape(
    tape: &mut Tape,
    s_n: NodeId,
    s_a: NodeId,
    target: &Array2<f64>,
    cfg: &GlocalConfig,
) -> NodeId {
    let inverted = target.mapv(|t| 1.0 - t);
    let focal = focal_on_tape(tape, s_n, s_a, target, cfg.focal_gamma, cfg.focal_alpha);
    let dice_n = dice_on_tape(tape, s_n, &inverted, cfg.dice_smooth);
    let dice_a = dice_on_tape(tape, s_a, target, cfg.dice_smooth);
    let partial = tape.add(focal, dice_n);
    tape.add(partial, dice_a)
}

/// Cross-entropy of a 1x2 probability node for one image.
pub fn cross_entropy_on_tape(tape: &mut Tape, probs: NodeId, label: u8) -> NodeId {
    let p_true = tape.slice_cols(probs, label as usize, 1);
    let log_p = tape.log_clamped(p_true, PROB_FLOOR);
    let neg = tape.scale(log_p, -1.0);
    tape.sum(neg)
}

/// Max-pool a full-resolution binary mask down to the patch grid: a patch is
/// anomalous if any covered pixel is.
pub fn downsample_mask_max(mask: &Array2<f64>, grid: (usize, usize)) -> Array2<f64> {
    let (gh, gw) = grid;
    let (h, w) = mask.dim();
    let mut out = Array2::zeros((gh, gw));
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] > 0.0 {
                let gy = (y * gh / h).min(gh - 1);
                let gx = (x * gw / w).min(gw - 1);
                out[(gy, gx)] = 1.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn downsample_mask_max_pools_any_positive_pixel() {
        let mut mask = Array2::zeros((8, 8));
        mask[(0, 0)] = 1.0;
        mask[(7, 7)] = 1.0;
        let grid = downsample_mask_max(&mask, (2, 2));
        assert_eq!(grid, array![[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn global_loss_clamps_zero_probability() {
        let probs = array![[1.0, 0.0]];
        let loss = global_loss(&probs, &[1]).unwrap();
        assert!(loss.is_finite());
        assert!((loss - (-(PROB_FLOOR.ln()))).abs() < 1e-9);
    }

    #[test]
    fn non_binary_target_is_rejected() {
        let pair = crate::scoring::ScorePair {
            s_n: array![[0.5]],
            s_a: array![[0.5]],
            layer_id: crate::scoring::LayerId::Layer(1),
        };
        let target = array![[0.5]];
        assert!(focal_loss(&pair, &target, 2.0, 0.25).is_err());
    }

    #[test]
    fn glocal_total_sums_layers() {
        let v = glocal_total(1.0, &[0.5, 0.25], 2.0);
        assert!((v - (1.0 + 2.0 * 0.75)).abs() < 1e-12);
    }

    #[test]
    fn config_validation_bounds() {
        let mut cfg = GlocalConfig::default();
        cfg.focal_alpha = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = GlocalConfig::default();
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
    }
}
